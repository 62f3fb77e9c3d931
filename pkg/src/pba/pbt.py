"""Population based training over augmentation policies.

Trials train in synchronous generations of ``ready_interval`` epochs.  At
each barrier the controller ranks the population, makes every bottom-quantile
trial clone a random top-quantile trial (weights, policy and history), and
perturbs the clone's policy with :func:`explore`.

Randomness: ``SeedSequence(master_seed)`` spawns one stream for the
controller and one per trial, each driving a counter-based Philox generator.
A trial's stream is only ever advanced by the worker training that trial, so
results do not depend on how many workers run or in what order they finish.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .augment import MAX_LEVEL
from .data import DatasetSplits
from .policy import MAX_PROB_LEVEL, NUM_SLOTS, PolicyParams, Schedule, ScheduleError, compress
from .trainer import Trainable

log = logging.getLogger(__name__)

# (data, seed) -> fresh child model
TrainableFactory = Callable[[DatasetSplits, np.random.SeedSequence], Trainable]


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    master_seed: int
    population_size: int = 16
    epochs: int = 200
    ready_interval: int = 3
    truncation_fraction: float = 0.25
    explore_resample_prob: float = 0.2
    perturb_amounts: tuple[int, ...] = (0, 1, 2, 3)
    workers: int = 1

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if not 0 < self.truncation_fraction <= 0.5:
            raise ValueError("truncation_fraction must be in (0, 0.5]")
        if self.ready_interval < 1:
            raise ValueError("ready_interval must be at least 1")
        if self.epochs < self.ready_interval:
            raise ValueError("epochs must be at least ready_interval")
        if not 0 <= self.explore_resample_prob <= 1:
            raise ValueError("explore_resample_prob must be in [0, 1]")
        if not self.perturb_amounts or min(self.perturb_amounts) < 0:
            raise ValueError("perturb_amounts must be non-empty and non-negative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @property
    def truncation_count(self) -> int:
        return int(self.truncation_fraction * self.population_size)


class CloneEvent(NamedTuple):
    src: int
    dst: int
    epoch: int


class Mutation(NamedTuple):
    """One explore call.  Arrays are (30, 2): column 0 the probability
    level, column 1 the magnitude level of each slot."""

    trial: int
    old: np.ndarray
    new: np.ndarray
    resampled: np.ndarray  # bool
    amount: np.ndarray  # signed perturbation; 0 where resampled


@dataclass
class Trial:
    id: int
    seed: np.random.SeedSequence
    rng: np.random.Generator
    params: PolicyParams
    checkpoint: Optional[bytes] = None
    history: list = field(default_factory=list)  # (epoch, PolicyParams), one per trained epoch
    score: float = 0.0
    epoch: int = 0


@dataclass
class IntervalRecord:
    interval: int
    epoch: int  # epochs completed by every trial
    scores: dict  # trial id -> validation accuracy
    params: dict  # trial id -> policy trained under during this interval
    clones: list
    mutations: list


@dataclass
class SearchResult:
    schedule: Schedule
    best_score: float
    winner: int
    population_log: list
    total_epochs: int
    trials: list


def params_digest(p: PolicyParams) -> str:
    levels = ",".join(f"{a}:{b}" for a, b in zip(p.probs, p.mags))
    return hashlib.sha256(levels.encode()).hexdigest()[:12]


# --- explore / exploit -----------------------------------------------------


_DOMAIN_HI = np.tile([MAX_PROB_LEVEL, MAX_LEVEL], NUM_SLOTS)  # slot-major: prob, mag, prob, ...


def explore(
    p: PolicyParams,
    rng: np.random.Generator,
    resample_prob: float = 0.2,
    amounts: Sequence[int] = (0, 1, 2, 3),
    trace: Optional[list] = None,
    trial: int = -1,
) -> PolicyParams:
    """Mutate each of the 60 probability and magnitude levels independently.

    With probability ``resample_prob`` a level is redrawn uniformly from its
    domain; otherwise a uniformly chosen amount is added or subtracted with
    equal odds and the result clipped.  Mutations are appended to ``trace``
    when one is given, one :class:`Mutation` per call.

    Every call consumes the same four blocks of 60 draws (resample coin,
    resampled value, amount index, sign coin), whether or not they are used.
    """
    old = p.levels
    n = old.size
    resample = rng.random(n) < resample_prob
    fresh = rng.integers(0, _DOMAIN_HI + 1)
    amt = np.asarray(amounts)[rng.integers(0, len(amounts), n)]
    amt = np.where(rng.random(n) >= 0.5, -amt, amt)
    new = np.where(resample, fresh, np.minimum(np.maximum(old + amt, 0), _DOMAIN_HI))
    if trace is not None:
        shape = (NUM_SLOTS, 2)
        trace.append(Mutation(
            trial, old.reshape(shape), new.reshape(shape), resample.reshape(shape),
            np.where(resample, 0, amt).reshape(shape),
        ))
    flat = new.tolist()
    return PolicyParams._unchecked(flat[0::2], flat[1::2], new)


def rank(trials: Sequence[Trial]) -> list[Trial]:
    """Best first; ties go to the lower trial id."""
    return sorted(trials, key=lambda t: (-t.score, t.id))


def exploit(
    trials: Sequence[Trial],
    cfg: SearchConfig,
    rng: np.random.Generator,
    mutations: Optional[list] = None,
) -> list[CloneEvent]:
    """Truncation selection followed by explore on every clone.

    Each of the bottom ``truncation_count`` trials copies checkpoint, policy,
    history and score from a uniformly chosen top trial, then explores.
    Trials in between are left alone.
    """
    k = cfg.truncation_count
    if k < 1:
        log.info("population of %d too small for truncation %.2f; skipping exploit",
                 len(trials), cfg.truncation_fraction)
        return []
    ranked = rank(trials)
    top, bottom = ranked[:k], ranked[-k:]
    events = []
    for dst in bottom:
        src = top[int(rng.integers(k))]
        dst.checkpoint = src.checkpoint
        dst.history = list(src.history)
        dst.score = src.score
        dst.epoch = src.epoch
        dst.params = explore(
            src.params, rng, cfg.explore_resample_prob, cfg.perturb_amounts, mutations, dst.id
        )
        events.append(CloneEvent(src.id, dst.id, src.epoch))
    return events


def extract_schedule(winner: Trial, cfg: SearchConfig) -> Schedule:
    """Compress the winner's per-epoch history into schedule segments."""
    epochs = [e for e, _ in winner.history]
    if epochs != list(range(cfg.epochs)):
        raise ScheduleError(
            f"trial {winner.id} history does not cover epochs 0..{cfg.epochs - 1} contiguously"
        )
    return compress([p for _, p in winner.history])


# --- stepping --------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(factory, data):
    _WORKER["factory"] = factory
    _WORKER["data"] = data


def _pooled_interval(task):
    return _train_interval(task, _WORKER["factory"], _WORKER["data"])


def _train_interval(task, factory, data):
    trial_id, seed, checkpoint, params, rng, n_epochs = task
    try:
        model = factory(data, seed)
        if checkpoint is not None:
            model.load_checkpoint(checkpoint)
        source = _ConstantSource(params)
        for _ in range(n_epochs):
            model.train_epoch(source, rng)
        score = float(model.evaluate("val"))
        return trial_id, model.save_checkpoint(), rng, score
    except Exception as exc:
        raise SearchError(f"trial {trial_id} failed: {exc!r}") from exc


class _ConstantSource:
    def __init__(self, params):
        self.params = params

    def __call__(self, epoch, batch, rng):
        return self.params


def init_population(cfg: SearchConfig) -> tuple[list[Trial], np.random.Generator]:
    """All-zero policies and independent per-trial streams from ``master_seed``."""
    root = np.random.SeedSequence(cfg.master_seed)
    controller_seed, *trial_seeds = root.spawn(cfg.population_size + 1)
    trials = []
    for i, ts in enumerate(trial_seeds):
        init_seed, stream_seed = ts.spawn(2)
        trials.append(Trial(
            id=i, seed=init_seed, rng=np.random.Generator(np.random.Philox(stream_seed)),
            params=PolicyParams.zeros(),
        ))
    return trials, np.random.Generator(np.random.Philox(controller_seed))


def run_search(
    cfg: SearchConfig,
    factory: TrainableFactory,
    data: DatasetSplits,
    progress: Optional[Callable[[IntervalRecord], None]] = None,
) -> SearchResult:
    trials, controller = init_population(cfg)
    population_log: list[IntervalRecord] = []
    total_epochs = 0
    done = 0
    interval = 0
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(factory, data))
    try:
        while done < cfg.epochs:
            n = min(cfg.ready_interval, cfg.epochs - done)
            tasks = [(t.id, t.seed, t.checkpoint, t.params, t.rng, n) for t in trials]
            if pool is None:
                results = [_train_interval(task, factory, data) for task in tasks]
            else:
                results = list(pool.map(_pooled_interval, tasks))
            trained = {}
            for (tid, ckpt, rng, score), t in zip(results, trials):
                assert tid == t.id
                t.checkpoint, t.rng, t.score = ckpt, rng, score
                for e in range(done, done + n):
                    t.history.append((e, t.params))
                t.epoch = done + n
                trained[t.id] = t.params
                total_epochs += n
            done += n
            for t in trials:
                if len(t.history) != done:
                    raise SearchError(f"trial {t.id} has {len(t.history)} history entries after {done} epochs")

            scores = {t.id: t.score for t in trials}
            winner = rank(trials)[0]
            mutations: list[Mutation] = []
            clones = exploit(trials, cfg, controller, mutations)
            record = IntervalRecord(interval, done, scores, trained, clones, mutations)
            population_log.append(record)
            log.debug("interval %d epoch %d best %.4f (trial %d)", interval, done, winner.score, winner.id)
            if progress is not None:
                progress(record)
            interval += 1
    finally:
        if pool is not None:
            pool.shutdown()

    return SearchResult(
        schedule=extract_schedule(winner, cfg),
        best_score=scores[winner.id],
        winner=winner.id,
        population_log=population_log,
        total_epochs=total_epochs,
        trials=trials,
    )


def lineage_params(population_log: Sequence[IntervalRecord], trial_id: int, cfg: SearchConfig) -> list[PolicyParams]:
    """Rebuild the per-epoch policies a trial's lineage trained under by
    walking the clone events backwards through the log."""
    per_epoch: list[PolicyParams] = []
    current = trial_id
    for rec in reversed(population_log):
        prev_end = population_log[rec.interval - 1].epoch if rec.interval else 0
        per_epoch[:0] = [rec.params[current]] * (rec.epoch - prev_end)
        if rec.interval:
            # whoever `current` cloned from at the previous barrier
            for ev in population_log[rec.interval - 1].clones:
                if ev.dst == current:
                    current = ev.src
                    break
    return per_epoch


SEARCH_LOG_COLUMNS = ("interval", "trial_id", "epoch", "score", "cloned_from", "params_digest")


def search_log_csv(result: SearchResult) -> str:
    """One row per trial per interval: the policy trained under, the
    validation score at the barrier, and the clone source if the trial was
    replaced at that barrier."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SEARCH_LOG_COLUMNS)
    for rec in result.population_log:
        sources = {ev.dst: ev.src for ev in rec.clones}
        for tid in sorted(rec.scores):
            writer.writerow([
                rec.interval, tid, rec.epoch, f"{rec.scores[tid]:.6f}",
                sources.get(tid, ""), params_digest(rec.params[tid]),
            ])
    return buf.getvalue()
