"""Experiment orchestration: schedule replay and ablations, random-schedule
baselines, the expected best-of-n curve, and schedule summaries."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .augment import MAX_LEVEL, OPS, rotate
from .data import DatasetSplits, SyntheticSpec, generate_synthetic
from .policy import (
    MAX_PROB_LEVEL,
    NUM_SLOTS,
    PolicyParams,
    Schedule,
    collapse_schedule,
    last_policy,
    schedule_at,
    shuffle_order,
    stretch_schedule,
)
from .trainer import ImageTransform, PolicySource, ToyTrainable, TrainerConfig

log = logging.getLogger(__name__)


class ReplayMode(enum.Enum):
    FULL_SCHEDULE = "full-schedule"
    FIXED_LAST = "fixed-last"
    ORDER_SHUFFLED = "order-shuffled"
    COLLAPSED_STATIONARY = "collapsed-stationary"
    NONE = "none"


@dataclass(frozen=True)
class RandomScheduleSpec:
    epochs: int
    interval_len_min: int = 1
    interval_len_max: int = 40

    def __post_init__(self):
        if not 1 <= self.interval_len_min <= self.interval_len_max:
            raise ValueError("need 1 <= interval_len_min <= interval_len_max")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


def random_policy(rng: np.random.Generator) -> PolicyParams:
    probs = rng.integers(0, MAX_PROB_LEVEL + 1, NUM_SLOTS)
    mags = rng.integers(0, MAX_LEVEL + 1, NUM_SLOTS)
    return PolicyParams.from_levels(probs.tolist(), mags.tolist())


def random_schedule(spec: RandomScheduleSpec, rng: np.random.Generator) -> Schedule:
    """Segments of uniform length in ``[min, max]`` (the last one cut to
    fit), each holding a uniformly random policy."""
    entries, start = [], 0
    while start < spec.epochs:
        entries.append((start, random_policy(rng)))
        start += int(rng.integers(spec.interval_len_min, spec.interval_len_max + 1))
    return Schedule(spec.epochs, tuple(entries))


def best_of_n_curve(scores: Sequence[float], n_max: int) -> list[tuple[int, float]]:
    """Expected maximum of ``n`` draws with replacement from ``scores``.

    With ``s_(1) <= ... <= s_(N)`` the sorted scores,
    ``E_n = sum_i s_(i) * ((i/N)^n - ((i-1)/N)^n)``.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("scores must be non-empty")
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    # Summation by parts: E_n = s_(N) - sum_{i<N} (s_(i+1) - s_(i)) (i/N)^n.
    # Every term shrinks with n; the running max only absorbs last-bit noise.
    gaps = np.diff(s)
    frac = np.arange(1, s.size) / s.size
    values = np.array([s[-1] - np.dot(gaps, frac ** n) for n in range(1, n_max + 1)])
    values = np.minimum(np.maximum.accumulate(values), s[-1])
    return [(n, float(v)) for n, v in zip(range(1, n_max + 1), values)]


# --- replay ----------------------------------------------------------------


class ScheduleSource:
    """Per-epoch policy from a schedule."""

    def __init__(self, schedule: Schedule):
        self.schedule = schedule

    def __call__(self, epoch, batch, rng):
        return schedule_at(self.schedule, epoch)


class StationarySource:
    """Independent duration-weighted draw per batch."""

    def __init__(self, schedule: Schedule):
        self.sampler = collapse_schedule(schedule)

    def __call__(self, epoch, batch, rng):
        return self.sampler.sample(rng)


def replay_source(
    schedule: Schedule,
    mode: ReplayMode,
    epochs: int,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Optional[PolicySource], Optional[Schedule]]:
    """Build the policy source for ``mode``.

    Returns the source and the schedule it effectively replays (``None`` for
    the stationary and no-policy modes).  A schedule whose length differs
    from ``epochs`` is stretched linearly first.  ``rng`` is only used to
    shuffle segments in order-shuffled mode.
    """
    mode = ReplayMode(mode)
    if mode is ReplayMode.NONE:
        return None, None
    if schedule.epochs != epochs:
        log.info("stretching schedule from %d to %d epochs", schedule.epochs, epochs)
        schedule = stretch_schedule(schedule, epochs)
    if mode is ReplayMode.FIXED_LAST:
        schedule = Schedule.constant(last_policy(schedule), epochs)
    elif mode is ReplayMode.ORDER_SHUFFLED:
        if rng is None:
            raise ValueError("order-shuffled replay needs an rng")
        schedule = shuffle_order(schedule, rng)
    elif mode is ReplayMode.COLLAPSED_STATIONARY:
        return StationarySource(schedule), None
    return ScheduleSource(schedule), schedule


@dataclass
class TrainingRun:
    mode: ReplayMode
    seed: int
    history: list  # dicts: epoch, loss, train_acc, val_acc, test_acc
    replayed: Optional[Schedule]

    @property
    def final(self) -> dict:
        return self.history[-1]


def train_with_schedule(
    data: DatasetSplits,
    schedule: Optional[Schedule],
    mode: ReplayMode,
    cfg: TrainerConfig,
    seed: int,
    extra_transform: Optional[ImageTransform] = None,
    eval_every: int = 1,
) -> TrainingRun:
    """Train an evaluation model for ``cfg.epochs`` under a replayed schedule.

    ``seed`` derives three independent streams: model init, training draws,
    and the segment shuffle of order-shuffled mode.
    """
    mode = ReplayMode(mode)
    init_seed, train_seed, shuffle_seed = np.random.SeedSequence(seed).spawn(3)
    if schedule is None:
        if mode is not ReplayMode.NONE:
            raise ValueError(f"mode {mode.value} needs a schedule")
        source, replayed = None, None
    else:
        source, replayed = replay_source(
            schedule, mode, cfg.epochs, np.random.Generator(np.random.Philox(shuffle_seed))
        )
    model = ToyTrainable(data, cfg, init_seed, extra_transform=extra_transform)
    rng = np.random.Generator(np.random.Philox(train_seed))
    history = []
    for epoch in range(cfg.epochs):
        stats = model.train_epoch(source, rng)
        row = {"epoch": epoch, "loss": stats["loss"], "train_acc": stats["train_acc"]}
        if (epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1:
            row["val_acc"] = model.evaluate("val")
            row["test_acc"] = model.evaluate("test")
        history.append(row)
    return TrainingRun(mode, seed, history, replayed)


def oracle_rotation(max_degrees: float) -> ImageTransform:
    """Rotation by an angle uniform in ``[-max_degrees, max_degrees]``,
    matching the synthetic nuisance distribution."""

    def transform(img, rng):
        return rotate(img, rng.uniform(-max_degrees, max_degrees))

    return transform


def oracle_gap(spec: SyntheticSpec, cfg: TrainerConfig, seeds: Sequence[int]) -> dict:
    """Median test accuracy with and without oracle rotation augmentation.

    Each seed regenerates the dataset (``spec.seed + seed``) and trains both
    arms from the same initialization.
    """
    plain, oracle = [], []
    for seed in seeds:
        data = generate_synthetic(_reseed(spec, seed))
        plain.append(train_with_schedule(data, None, ReplayMode.NONE, cfg, seed, eval_every=cfg.epochs).final["test_acc"])
        oracle.append(train_with_schedule(
            data, None, ReplayMode.NONE, cfg, seed,
            extra_transform=oracle_rotation(spec.rotation_range), eval_every=cfg.epochs,
        ).final["test_acc"])
    return {
        "plain": plain,
        "oracle": oracle,
        "plain_median": float(np.median(plain)),
        "oracle_median": float(np.median(oracle)),
        "gap": float(np.median(oracle) - np.median(plain)),
    }


def _reseed(spec: SyntheticSpec, offset: int) -> SyntheticSpec:
    return replace(spec, seed=spec.seed + offset)


def random_baseline(
    data: DatasetSplits,
    cfg: TrainerConfig,
    trials: int,
    seed: int,
    spec: Optional[RandomScheduleSpec] = None,
) -> list[dict]:
    """Train ``trials`` child models, each under its own random schedule.

    Every trial gets an independent seed spawned from ``seed``; the seed's
    spawn key is returned with the scores.
    """
    spec = spec or RandomScheduleSpec(cfg.epochs)
    rows = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        sched_seed, train_seed = child.spawn(2)
        schedule = random_schedule(spec, np.random.Generator(np.random.Philox(sched_seed)))
        train_int = int(train_seed.generate_state(1)[0])
        run = train_with_schedule(data, schedule, ReplayMode.FULL_SCHEDULE, cfg, train_int, eval_every=cfg.epochs)
        rows.append({
            "trial": i,
            "seed": train_int,
            "segments": len(schedule.entries),
            "val_acc": run.final["val_acc"],
            "test_acc": run.final["test_acc"],
        })
    return rows


# --- summaries -------------------------------------------------------------


def schedule_summary(schedule: Schedule) -> list[dict]:
    """Per epoch and operation: mean probability level (0-10) and mean
    magnitude level over the operation's two slots, and the operation's share of the
    epoch's total probability mass (0 when every probability is zero)."""
    rows = []
    for epoch, params in enumerate(schedule.expand()):
        by_op = {op: ([], []) for op in OPS}
        for slot in params.params:
            by_op[slot.op][0].append(slot.prob)
            by_op[slot.op][1].append(slot.mag)
        means = {op: (float(np.mean(p)), float(np.mean(m))) for op, (p, m) in by_op.items()}
        total = sum(p for p, _ in means.values())
        for op in OPS:
            mp, mm = means[op]
            rows.append({
                "epoch": epoch,
                "op": op.value,
                "mean_prob": mp,
                "mean_mag": mm,
                "prob_share": mp / total if total else 0.0,
            })
    return rows
