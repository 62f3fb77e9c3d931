"""Augmentation policy template and policy schedules.

A policy is a fixed list of 30 ``(op, prob, mag)`` slots, two per operation.
The slots' operations never change; only the probability level (0..10, in
tenths) and magnitude level (0..9) are tuned.  A :class:`Schedule` assigns a
policy to every training epoch as a list of contiguous segments.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .augment import MAX_LEVEL, OPS, OpKind, apply_op

MAX_PROB_LEVEL = 10
COPIES_PER_OP = 2
NUM_SLOTS = len(OPS) * COPIES_PER_OP
COUNT_PROBS = (0.2, 0.3, 0.5)
_COUNT_CDF = tuple(np.cumsum(COUNT_PROBS)[:-1])

# slot i holds operation SLOT_OPS[i]: the 15 operations, then the same 15 again
SLOT_OPS: tuple[OpKind, ...] = OPS * COPIES_PER_OP


class ScheduleError(ValueError):
    pass


class OpParam(NamedTuple):
    op: OpKind
    prob: int
    mag: int


@dataclass(frozen=True)
class PolicyParams:
    """The 30 slots of the policy template."""

    params: tuple[OpParam, ...]

    def __post_init__(self):
        if len(self.params) != NUM_SLOTS:
            raise ValueError(f"expected {NUM_SLOTS} slots, got {len(self.params)}")
        for slot, (want, p) in enumerate(zip(SLOT_OPS, self.params)):
            if p.op is not want:
                raise ValueError(f"slot {slot} must hold {want.value}, got {p.op}")
            if not 0 <= p.prob <= MAX_PROB_LEVEL:
                raise ValueError(f"slot {slot}: probability level {p.prob} out of range")
            if not 0 <= p.mag <= MAX_LEVEL:
                raise ValueError(f"slot {slot}: magnitude level {p.mag} out of range")

    @classmethod
    def from_levels(cls, probs: Sequence[int], mags: Sequence[int]) -> "PolicyParams":
        if len(probs) != NUM_SLOTS or len(mags) != NUM_SLOTS:
            raise ValueError(f"need {NUM_SLOTS} probability and magnitude levels")
        return cls(tuple(OpParam(op, int(p), int(m)) for op, p, m in zip(SLOT_OPS, probs, mags)))

    @classmethod
    def _unchecked(cls, probs: Sequence[int], mags: Sequence[int], levels=None) -> "PolicyParams":
        # hot path for levels already known to be in range
        obj = object.__new__(cls)
        object.__setattr__(obj, "params", tuple(map(OpParam, SLOT_OPS, probs, mags)))
        if levels is not None:
            levels.flags.writeable = False
            obj.__dict__["levels"] = levels
        return obj

    @classmethod
    def zeros(cls) -> "PolicyParams":
        return cls.from_levels([0] * NUM_SLOTS, [0] * NUM_SLOTS)

    @cached_property
    def levels(self) -> np.ndarray:
        """Read-only int array ``[prob_0, mag_0, prob_1, mag_1, ...]``."""
        arr = np.array([self.probs, self.mags]).T.ravel()
        arr.flags.writeable = False
        return arr

    @property
    def probs(self) -> tuple[int, ...]:
        return tuple(p.prob for p in self.params)

    @property
    def mags(self) -> tuple[int, ...]:
        return tuple(p.mag for p in self.params)

    def to_list(self) -> list[dict]:
        return [{"op": p.op.value, "prob": p.prob, "mag": p.mag} for p in self.params]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "PolicyParams":
        try:
            return cls(tuple(
                OpParam(OpKind.from_name(d["op"]), _as_int(d["prob"]), _as_int(d["mag"]))
                for d in items
            ))
        except (KeyError, TypeError) as exc:
            raise ScheduleError(f"malformed policy parameters: {exc}") from None


def _as_int(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScheduleError(f"expected an integer level, got {value!r}")
    return value


def sample_count(rng: np.random.Generator) -> int:
    """Draw the operation budget, 0, 1 or 2, with probabilities ``COUNT_PROBS``."""
    u = rng.random()
    return int(np.searchsorted(_COUNT_CDF, u, side="right"))


def select_ops(p: PolicyParams, rng: np.random.Generator) -> list[OpParam]:
    """Pick the slots that fire for one image.

    Shuffles the slots, draws a budget of 0-2 operations, then walks the
    shuffled slots and fires each with probability ``prob / 10`` until the
    budget is spent.  Slots at level 0 or 10 have a certain outcome and skip
    the uniform draw.
    """
    order = rng.permutation(NUM_SLOTS)
    count = sample_count(rng)
    chosen = []
    for idx in order:
        if count == 0:
            break
        slot = p.params[idx]
        if slot.prob == 0:
            continue
        if slot.prob == MAX_PROB_LEVEL or rng.random() < slot.prob / MAX_PROB_LEVEL:
            chosen.append(slot)
            count -= 1
    return chosen


def apply_policy(img: np.ndarray, p: PolicyParams, rng: np.random.Generator) -> np.ndarray:
    for slot in select_ops(p, rng):
        img = apply_op(img, slot.op, slot.mag, rng)
    return img


def search_space_size() -> int:
    """Number of distinct policies: 10 magnitudes x 11 probabilities per slot."""
    return ((MAX_LEVEL + 1) * (MAX_PROB_LEVEL + 1)) ** NUM_SLOTS


# --- schedules -------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Epoch-indexed policies as ``(start_epoch, params)`` segments.

    Segment ``i`` covers epochs ``[start_i, start_{i+1})`` and the last one runs
    to ``epochs``.
    """

    epochs: int
    entries: tuple[tuple[int, PolicyParams], ...]

    def __post_init__(self):
        if self.epochs < 1:
            raise ScheduleError(f"schedule must cover at least one epoch, got {self.epochs}")
        if not self.entries:
            raise ScheduleError("schedule has no entries")
        starts = [s for s, _ in self.entries]
        if starts[0] != 0:
            raise ScheduleError(f"first entry must start at epoch 0, got {starts[0]}")
        for a, b in zip(starts, starts[1:]):
            if b <= a:
                raise ScheduleError(f"entry starts must be strictly increasing ({a} then {b})")
        if starts[-1] >= self.epochs:
            raise ScheduleError(f"entry start {starts[-1]} beyond schedule length {self.epochs}")
        for _, params in self.entries:
            if not isinstance(params, PolicyParams):
                raise ScheduleError("schedule entries must hold PolicyParams")

    @property
    def starts(self) -> list[int]:
        return [s for s, _ in self.entries]

    def segments(self) -> list[tuple[int, int, PolicyParams]]:
        """``(start, duration, params)`` for every entry."""
        ends = self.starts[1:] + [self.epochs]
        return [(s, e - s, p) for (s, p), e in zip(self.entries, ends)]

    def expand(self) -> list[PolicyParams]:
        """One policy per epoch."""
        return [p for _, d, p in self.segments() for _ in range(d)]

    @classmethod
    def constant(cls, params: PolicyParams, epochs: int) -> "Schedule":
        return cls(epochs, ((0, params),))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "entries": [{"start": s, "params": p.to_list()} for s, p in self.entries],
        }

    @classmethod
    def from_dict(cls, obj) -> "Schedule":
        try:
            epochs = _as_int(obj["epochs"])
            entries = tuple(
                (_as_int(e["start"]), PolicyParams.from_list(e["params"])) for e in obj["entries"]
            )
        except (KeyError, TypeError) as exc:
            raise ScheduleError(f"malformed schedule: {exc}") from None
        except ValueError as exc:
            raise ScheduleError(str(exc)) from None
        return cls(epochs, entries)


def compress(per_epoch: Sequence[PolicyParams]) -> Schedule:
    """Merge runs of equal consecutive policies into segments."""
    if not per_epoch:
        raise ScheduleError("cannot build a schedule from an empty history")
    entries = []
    for e, p in enumerate(per_epoch):
        if not entries or entries[-1][1] != p:
            entries.append((e, p))
    return Schedule(len(per_epoch), tuple(entries))


def schedule_to_json(s: Schedule) -> str:
    return json.dumps(s.to_dict(), indent=1) + "\n"


def schedule_from_json(text: str) -> Schedule:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScheduleError(f"schedule is not valid JSON: {exc}") from None
    return Schedule.from_dict(obj)


def schedule_at(s: Schedule, epoch: int) -> PolicyParams:
    if not 0 <= epoch < s.epochs:
        raise IndexError(f"epoch {epoch} outside schedule of {s.epochs} epochs")
    i = bisect.bisect_right(s.starts, epoch) - 1
    return s.entries[i][1]


def stretch_schedule(s: Schedule, new_epochs: int) -> Schedule:
    """Rescale to ``new_epochs``; output epoch ``e`` uses input epoch
    ``floor(e * s.epochs / new_epochs)``."""
    if new_epochs < 1:
        raise ValueError(f"new_epochs must be positive, got {new_epochs}")
    entries = []
    for start, params in s.entries:
        # first output epoch that maps at or after `start`
        new_start = -(-start * new_epochs // s.epochs)
        if new_start >= new_epochs:
            continue
        if entries and entries[-1][0] == new_start:
            entries[-1] = (new_start, params)  # earlier segment vanished when shrinking
        else:
            entries.append((new_start, params))
    return Schedule(new_epochs, tuple(entries))


def last_policy(s: Schedule) -> PolicyParams:
    return s.entries[-1][1]


def shuffle_order(s: Schedule, rng: np.random.Generator) -> Schedule:
    """Permute the segments uniformly, keeping each segment's duration."""
    segs = s.segments()
    order = rng.permutation(len(segs))
    entries, start = [], 0
    for i in order:
        _, duration, params = segs[i]
        entries.append((start, params))
        start += duration
    return Schedule(s.epochs, tuple(entries))


class StationarySampler:
    """Draws a policy per batch with probability proportional to the
    time its segment occupies in the schedule.  A single-segment schedule
    needs no draw and consumes none."""

    def __init__(self, s: Schedule):
        segs = s.segments()
        self.policies = [p for _, _, p in segs]
        self.weights = np.array([d for _, d, _ in segs], dtype=np.float64) / s.epochs
        self._cdf = np.cumsum(self.weights)
        self._cdf[-1] = 1.0

    def sample(self, rng: np.random.Generator) -> PolicyParams:
        if len(self.policies) == 1:
            return self.policies[0]
        i = int(np.searchsorted(self._cdf, rng.random(), side="right"))
        return self.policies[i]


def collapse_schedule(s: Schedule) -> StationarySampler:
    return StationarySampler(s)
