"""Minimax contiguous layer partitioning under per-stage memory caps.

Layers are 1-based, stages are 1-based.  Segment costs are supplied as
callables ``time(p, a, b)`` and ``mem(p, a, b)`` over the inclusive layer
block ``[a..b]`` placed on stage ``p``; both are tabulated once before the
DP runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .errors import IncompatibleL, Infeasible

SegmentFn = Callable[[int, int, int], float]
INF = math.inf


@dataclass(frozen=True)
class LayerAssignment:
    boundaries: Tuple[int, ...]
    num_layers: int
    objective: float = math.nan

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(self.boundaries))
        edges = (0,) + self.boundaries + (self.num_layers,)
        if any(x >= y for x, y in zip(edges, edges[1:])):
            raise ValueError(f"boundaries {self.boundaries} leave an empty stage over L={self.num_layers}")

    @classmethod
    def from_counts(cls, counts: Sequence[int], objective: float = math.nan) -> "LayerAssignment":
        edges, acc = [], 0
        for c in counts[:-1]:
            acc += c
            edges.append(acc)
        return cls(tuple(edges), sum(counts), objective)

    @property
    def num_stages(self) -> int:
        return len(self.boundaries) + 1

    def stage_ranges(self) -> List[Tuple[int, int]]:
        edges = (0,) + self.boundaries + (self.num_layers,)
        return [(lo + 1, hi) for lo, hi in zip(edges, edges[1:])]

    def counts(self) -> List[int]:
        return [hi - lo + 1 for lo, hi in self.stage_ranges()]

    def stage_of(self, layer: int) -> int:
        for p, (lo, hi) in enumerate(self.stage_ranges(), start=1):
            if lo <= layer <= hi:
                return p
        raise IndexError(layer)


@dataclass
class DpTable:
    f: Dict[Tuple[int, int], float]
    k_star: Dict[Tuple[int, int], int]


@dataclass(frozen=True)
class LayerMove:
    layer: int
    src: int
    dst: int


def _tabulate(L: int, P: int, caps: Sequence[float], time_fn: SegmentFn, mem_fn: Optional[SegmentFn]):
    """t[p][a][b] with memory-infeasible blocks set to +inf."""
    t = [None] * (P + 1)
    for p in range(1, P + 1):
        rows = [[INF] * (L + 1) for _ in range(L + 1)]
        # stage p holds some block [a..b] with a >= p and b <= L - (P - p)
        for a in range(p, L - (P - p) + 1):
            row = rows[a]
            for b in range(a, L - (P - p) + 1):
                if mem_fn is not None and mem_fn(p, a, b) > caps[p - 1]:
                    continue
                row[b] = time_fn(p, a, b)
        t[p] = rows
    return t


def _explain_infeasible(L, P, caps, mem_fn) -> Infeasible:
    worst, worst_deficit = None, -INF
    for p in range(1, P + 1):
        smallest = min(mem_fn(p, a, a) for a in range(1, L + 1)) if mem_fn else 0.0
        deficit = smallest - caps[p - 1]
        if deficit > worst_deficit:
            worst, worst_deficit = p, deficit
    return Infeasible(
        f"no {P}-way partition of {L} layers fits memory; tightest stage {worst} "
        f"(min single-layer footprint exceeds cap by {worst_deficit:.0f} bytes)",
        stage=worst, deficit_bytes=worst_deficit,
    )


def solve_table(L: int, P: int, t) -> DpTable:
    """Forward DP: f[p, l] = min_k max(f[p-1, k], t_p([k+1..l]))."""
    f: Dict[Tuple[int, int], float] = {}
    k_star: Dict[Tuple[int, int], int] = {}
    for l in range(1, L + 1):
        f[(1, l)] = t[1][1][l]
    for p in range(2, P + 1):
        for l in range(p, L + 1):
            best, arg = INF, None
            for k in range(p - 1, l):
                v = max(f[(p - 1, k)], t[p][k + 1][l])
                if v < best:
                    best, arg = v, k
            f[(p, l)] = best
            if arg is not None:
                k_star[(p, l)] = arg
    return DpTable(f, k_star)


def plan_partition(
    L: int,
    P: int,
    caps: Sequence[float],
    time_fn: SegmentFn,
    mem_fn: Optional[SegmentFn] = None,
) -> LayerAssignment:
    """Minimise the worst stage time over contiguous ``P``-way splits.

    Among optimal splits the lexicographically smallest boundary vector is
    returned.  Raises :class:`Infeasible` when no split fits ``caps``.
    """
    if not L >= P >= 1:
        raise Infeasible(f"need L >= P >= 1, got L={L}, P={P}")
    if len(caps) != P or any(c <= 0 for c in caps):
        raise ValueError("need one positive cap per stage")
    t = _tabulate(L, P, caps, time_fn, mem_fn)
    table = solve_table(L, P, t)
    best = table.f[(P, L)]
    if best == INF:
        raise _explain_infeasible(L, P, caps, mem_fn)

    # suffix DP g[p][k]: best worst-time for layers k+1..L on stages p..P
    g = [[INF] * (L + 1) for _ in range(P + 2)]
    g[P + 1][L] = -INF
    for p in range(P, 0, -1):
        for k in range(p - 1, L - (P - p)):
            bestv = INF
            for j in range(k + 1, L - (P - p) + 1):
                v = max(t[p][k + 1][j], g[p + 1][j])
                if v < bestv:
                    bestv = v
            g[p][k] = bestv

    # smallest b_1 first, then b_2, ... among splits achieving ``best``
    bounds: List[int] = []
    k = 0
    for p in range(1, P):
        for j in range(k + 1, L - (P - p) + 1):
            if max(t[p][k + 1][j], g[p + 1][j]) <= best:
                bounds.append(j)
                k = j
                break
        else:  # pragma: no cover - guarded by best < inf
            raise AssertionError("reconstruction failed")
    return LayerAssignment(tuple(bounds), L, best)


def brute_force_partition(L, P, caps, time_fn, mem_fn=None) -> Optional[LayerAssignment]:
    """Enumerate all C(L-1, P-1) splits; reference for tests and verify."""
    best, arg = INF, None
    for cut in combinations(range(1, L), P - 1):
        edges = (0,) + cut + (L,)
        worst = -INF
        for p in range(1, P + 1):
            a, b = edges[p - 1] + 1, edges[p]
            if mem_fn is not None and mem_fn(p, a, b) > caps[p - 1]:
                worst = INF
                break
            worst = max(worst, time_fn(p, a, b))
        if worst < best:  # combinations() is lexicographic, keep the first
            best, arg = worst, cut
    if arg is None:
        return None
    return LayerAssignment(arg, L, best)


def diff_assignments(old: LayerAssignment, new: LayerAssignment) -> List[LayerMove]:
    if old.num_layers != new.num_layers:
        raise IncompatibleL(f"{old.num_layers} layers vs {new.num_layers}")
    moves = []
    for layer in range(1, old.num_layers + 1):
        src, dst = old.stage_of(layer), new.stage_of(layer)
        if src != dst:
            moves.append(LayerMove(layer, src, dst))
    return moves


def per_layer_cost(times: Sequence[float], mems: Optional[Sequence[float]] = None):
    """Segment callables for explicit per-layer times (and memory), stage-agnostic."""
    prefix_t = [0]
    for x in times:
        prefix_t.append(prefix_t[-1] + x)

    def time_fn(p, a, b):
        return prefix_t[b] - prefix_t[a - 1]

    if mems is None:
        return time_fn, None
    prefix_m = [0]
    for x in mems:
        prefix_m.append(prefix_m[-1] + x)

    def mem_fn(p, a, b):
        return prefix_m[b] - prefix_m[a - 1]

    return time_fn, mem_fn
