"""Micro-batch resizing within a DP group after membership changes.

The number of micro-batches per step stays fixed; the samples of one
micro-batch are re-split across the surviving slots so the global batch is
conserved exactly.  Remainder samples go to the lowest surviving slots.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, NoSurvivors

WEIGHT_TOL = 1e-12


def even_split(total: int, slots: Iterable[int]) -> Dict[int, int]:
    slots = sorted(set(slots))
    if not slots:
        raise NoSurvivors("no slots to split across")
    base, rem = divmod(total, len(slots))
    return {s: base + (1 if i < rem else 0) for i, s in enumerate(slots)}


@dataclass(frozen=True)
class MicrobatchAssignment:
    """Samples per slot for every micro-batch of a step.

    With ``rotate`` set, micro-batch ``m`` hands its remainder samples to the
    slots starting at position ``m * rem`` (mod the slot count) instead of
    always the lowest ones, so per-step totals differ by at most one
    micro-batch's worth of remainder.  ``per_slot_mbs`` is micro-batch 0.
    """

    per_slot_mbs: Mapping[int, int]
    num_microbatches: int
    rotate: bool = False

    def __post_init__(self):
        if self.num_microbatches < 1:
            raise ValueError("num_microbatches must be >= 1")
        if not self.per_slot_mbs:
            raise NoSurvivors("assignment has no slots")
        if any(v < 0 for v in self.per_slot_mbs.values()):
            raise ValueError("negative micro-batch size")

    @classmethod
    def uniform(cls, dp: int, mbs: int, num_microbatches: int, rotate: bool = False) -> "MicrobatchAssignment":
        return cls({s: mbs for s in range(dp)}, num_microbatches, rotate)

    @property
    def slots(self) -> List[int]:
        return sorted(self.per_slot_mbs)

    @property
    def samples_per_microbatch(self) -> int:
        return sum(self.per_slot_mbs.values())

    @property
    def global_batch(self) -> int:
        return self.samples_per_microbatch * self.num_microbatches

    @property
    def max_mbs(self) -> int:
        return max(self.per_slot_mbs.values())

    @property
    def per_slot_weight(self) -> Dict[int, Fraction]:
        """Gradient-averaging weights, exact rationals summing to 1."""
        total = self.samples_per_microbatch
        return {s: Fraction(self.per_slot_mbs[s], total) for s in self.slots}

    def mbs_at(self, microbatch: int) -> Dict[int, int]:
        if not self.rotate:
            return dict(self.per_slot_mbs)
        slots = self.slots
        n = len(slots)
        base, rem = divmod(self.samples_per_microbatch, n)
        start = (microbatch * rem) % n
        extra = {slots[(start + i) % n] for i in range(rem)}
        return {s: base + (1 if s in extra else 0) for s in slots}

    def step_samples(self) -> Dict[int, int]:
        """Samples each slot processes over one step."""
        out = {s: 0 for s in self.slots}
        for m in range(self.num_microbatches):
            for s, n in self.mbs_at(m).items():
                out[s] += n
        return out

    @property
    def mean_mbs(self) -> Fraction:
        return Fraction(self.samples_per_microbatch, len(self.slots))

    def sample_ranges(self, microbatch: int, step: int = 0) -> Dict[int, range]:
        """Global sample ids each slot handles in ``microbatch`` of ``step``.

        Samples are laid out contiguously in ascending slot order, so the
        owner of any sample id is recomputable after a reshard.
        """
        if not 0 <= microbatch < self.num_microbatches:
            raise IndexError(microbatch)
        start = step * self.global_batch + microbatch * self.samples_per_microbatch
        sizes = self.mbs_at(microbatch)
        out = {}
        for s in self.slots:
            n = sizes[s]
            out[s] = range(start, start + n)
            start += n
        return out

    def owner_of(self, sample_id: int) -> int:
        offset = sample_id % self.samples_per_microbatch
        sizes = self.mbs_at((sample_id % self.global_batch) // self.samples_per_microbatch)
        for s in self.slots:
            n = sizes[s]
            if offset < n:
                return s
            offset -= n
        raise AssertionError("unreachable")


def reshard_microbatches(old: MicrobatchAssignment, survivors: Sequence[int]) -> MicrobatchAssignment:
    """Re-split one micro-batch's samples over ``survivors``.

    Works for scale-out as well: a larger slot set lowers every slot's size.
    """
    survivors = sorted(set(survivors))
    if not survivors:
        raise NoSurvivors("DP group is empty; escalate to the graph planner")
    if survivors == old.slots:
        return old
    return MicrobatchAssignment(even_split(old.samples_per_microbatch, survivors), old.num_microbatches,
                                old.rotate)


def weighted_grad_average(contributions: Sequence[Tuple[object, Sequence]]):
    """``sum(w_j * g_j)`` accumulated left to right in the given order.

    Callers pass contributions sorted by ascending slot id; that order is the
    documented reduction order.  Works on floats and on exact rationals.
    """
    if not contributions:
        raise ValueError("no contributions")
    total_w = sum(w for w, _ in contributions)
    if abs(float(total_w) - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights sum to {float(total_w)!r}, expected 1")
    vecs = [np.asarray(g, dtype=object if isinstance(w, Fraction) else float) for w, g in contributions]
    shape = vecs[0].shape
    for v in vecs[1:]:
        if v.shape != shape:
            raise DimensionMismatch(f"gradient shapes differ: {shape} vs {v.shape}")
    acc = None
    for (w, _), v in zip(contributions, vecs):
        term = v * w
        acc = term if acc is None else acc + term
    return acc
