"""Discrete-event 1F1B pipeline simulation with elastic recovery policies.

One step is simulated per distinct pipeline plan and reused while the plan
is unchanged, so a run costs one event simulation per recovery.  Every DP
member of a stage runs its own 1F1B op sequence.  Within a micro-batch,
members hold consecutive sample ranges in member order, and a member's op
waits only on the neighbouring-stage members whose ranges overlap its own.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .cost import CostProfile, MemModel, stage_phase_times

FWD, BWD = 0, 1
EV_COMPUTE = 0  # event-class rank in the heap's tie order


def one_f_one_b(stage: int, num_stages: int, num_microbatches: int) -> List[Tuple[int, int]]:
    """Op order of 0-based ``stage``: warm-up forwards, then alternate, then drain."""
    warm = min(num_stages - stage - 1, num_microbatches)
    ops = [(FWD, m) for m in range(warm)]
    for i in range(num_microbatches - warm):
        ops.append((FWD, warm + i))
        ops.append((BWD, i))
    ops.extend((BWD, m) for m in range(num_microbatches - warm, num_microbatches))
    return ops


@dataclass(frozen=True)
class Member:
    device: int
    slot: int
    freq_scale: float = 1.0
    slow_factor: float = 1.0
    mem_capacity: float = math.inf


@dataclass(frozen=True)
class StagePlan:
    """One pipeline stage: its layers, DP members and per-micro-batch sizes.

    ``sizes[m][j]`` is the number of samples member ``j`` handles in
    micro-batch ``m``.  ``defer_w`` marks rerouted stages whose extra
    weight-gradient work is deferred into idle time.
    """

    first_layer: int
    last_layer: int
    members: Tuple[Member, ...]
    sizes: Tuple[Tuple[int, ...], ...]
    base_mbs: int = 0
    defer_w: bool = False

    @property
    def num_layers(self) -> int:
        return self.last_layer - self.first_layer + 1

    @property
    def width(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class PipelinePlan:
    stages: Tuple[StagePlan, ...]

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def num_microbatches(self) -> int:
        return len(self.stages[0].sizes)

    @property
    def samples_per_step(self) -> int:
        return sum(sum(row) for row in self.stages[0].sizes)

    @property
    def devices(self) -> List[int]:
        return sorted(m.device for s in self.stages for m in s.members)

    def check(self) -> None:
        M = self.num_microbatches
        per_mb = [sum(r) for r in self.stages[0].sizes]
        for s in self.stages:
            assert len(s.sizes) == M, "stages disagree on micro-batch count"
            assert [sum(r) for r in s.sizes] == per_mb, "stages disagree on micro-batch sizes"
            assert all(len(r) == s.width for r in s.sizes)
        edges = [(s.first_layer, s.last_layer) for s in self.stages]
        for (a, b), (c, d) in zip(edges, edges[1:]):
            assert c == b + 1, "layer ranges not contiguous"


@dataclass
class StepResult:
    makespan_s: float
    busy_s: List[float]
    bubble_ratio: List[float]
    peak_in_flight: List[int]
    peak_mem: Dict[int, float]
    oom: List[int] = field(default_factory=list)
    deferred_tail_s: float = 0.0


def _durations(plan: PipelinePlan, profile: CostProfile):
    """Per-member cached (fwd, bwd) lookup keyed by sample count."""
    P = plan.num_stages
    out = []
    for s, st in enumerate(plan.stages):
        r_prev = plan.stages[s - 1].width if s > 0 else None
        r_next = plan.stages[s + 1].width if s < P - 1 else None
        per_member = []
        for mem in st.members:
            cache: Dict[int, Tuple[float, float]] = {}

            def dur(n, mem=mem, st=st, r_prev=r_prev, r_next=r_next, cache=cache):
                if n == 0:
                    return (0.0, 0.0)
                if n not in cache:
                    cache[n] = stage_phase_times(profile, st.num_layers, n, r_prev, st.width, r_next,
                                                 mem.freq_scale, mem.slow_factor)
                return cache[n]

            per_member.append(dur)
        out.append(per_member)
    return out


def _static_bytes(st: StagePlan, mem: MemModel) -> float:
    return mem.fixed_overhead + st.num_layers * (mem.bytes_param_per_layer + mem.bytes_grad_per_layer
                                                 + mem.bytes_optstate_per_layer / st.width)


def _ranges(row: Sequence[int]) -> List[Tuple[int, int]]:
    out, lo = [], 0
    for n in row:
        out.append((lo, lo + n))
        lo += n
    return out


def _overlaps(plan: PipelinePlan):
    """``deps[s][0][m][j]``: stage s-1 members feeding member j's forward of
    micro-batch m; ``deps[s][1][m][j]``: stage s+1 members its backward waits on."""
    P, M = plan.num_stages, plan.num_microbatches
    rng = [[_ranges(st.sizes[m]) for m in range(M)] for st in plan.stages]

    def hits(mine, theirs):
        lo, hi = mine
        if lo == hi:
            return ()
        return tuple(i for i, (a, b) in enumerate(theirs) if a < hi and lo < b)

    deps = []
    for s in range(P):
        fwd = [[hits(r, rng[s - 1][m]) for r in rng[s][m]] for m in range(M)] if s > 0 else None
        bwd = [[hits(r, rng[s + 1][m]) for r in rng[s][m]] for m in range(M)] if s < P - 1 else None
        deps.append((fwd, bwd))
    return deps


def simulate_step(plan: PipelinePlan, profile: CostProfile, mem: Optional[MemModel] = None,
                  w_share: float = 0.5) -> StepResult:
    """Event-driven 1F1B over all members of all stages for one step.

    Heap entries are ``(time, event class, sequence)`` so equal-time events
    resolve in a fixed order.  ``w_share`` is the weight-gradient fraction of
    backward, used only by stages with ``defer_w``.
    """
    P, M = plan.num_stages, plan.num_microbatches
    dur = _durations(plan, profile)
    orders = [one_f_one_b(s, P, M) for s in range(P)]
    nxt = [[0] * st.width for st in plan.stages]
    free_at = [[0.0] * st.width for st in plan.stages]
    first_bwd_done = [[False] * st.width for st in plan.stages]
    pool = [[0.0] * st.width for st in plan.stages]          # deferred seconds
    pool_samples = [[0.0] * st.width for st in plan.stages]
    peak_pool = [[0.0] * st.width for st in plan.stages]
    in_flight_samples = [[0] * st.width for st in plan.stages]
    peak_samples = [[0] * st.width for st in plan.stages]
    remaining = {}
    done_at: Dict[Tuple[int, int, int], float] = {}
    member_busy = [[0.0] * st.width for st in plan.stages]
    stage_live = [0] * P
    stage_peak = [0] * P
    heap: List[Tuple[float, int, int, int, int]] = []
    seq = 0
    budget = [[max(1, P - 1 - s) * st.base_mbs for _ in st.members] for s, st in enumerate(plan.stages)]
    if mem is not None:
        # deferral only uses memory left over after the 1F1B warm-up footprint
        for s, st in enumerate(plan.stages):
            if not st.defer_w:
                continue
            per_sample = st.num_layers * mem.bytes_act_per_layer_per_sample
            for j, member in enumerate(st.members):
                warm = sum(st.sizes[m][j] for m in range(min(P - s, M)))
                free = member.mem_capacity - _static_bytes(st, mem) - per_sample * warm
                budget[s][j] = min(budget[s][j], max(0, math.floor(free / per_sample)))

    deps = _overlaps(plan)
    done_member = set()

    def ready(s, j, kind, m):
        if kind == FWD:
            return s == 0 or all((s - 1, FWD, m, i) in done_member for i in deps[s][0][m][j])
        return s == P - 1 or all((s + 1, BWD, m, i) in done_member for i in deps[s][1][m][j])

    def try_start(s, j, now):
        nonlocal seq
        k = nxt[s][j]
        if k >= len(orders[s]) or k < 0:
            return
        kind, m = orders[s][k]
        if not ready(s, j, kind, m):
            return
        st = plan.stages[s]
        n = st.sizes[m][j]
        f, b = dur[s][j](n)
        t = f if kind == FWD else b
        gap = now - free_at[s][j]
        if st.defer_w and first_bwd_done[s][j] and gap > 0 and pool[s][j] > 0:
            used = min(gap, pool[s][j])
            frac = used / pool[s][j]
            pool[s][j] -= used
            member_busy[s][j] += used
            pool_samples[s][j] *= 1.0 - frac
        if kind == BWD and st.defer_w and n > st.base_mbs > 0:
            extra_w = b * w_share * (n - st.base_mbs) / n
            if pool_samples[s][j] + (n - st.base_mbs) <= budget[s][j]:
                t -= extra_w
                pool[s][j] += extra_w
                pool_samples[s][j] += n - st.base_mbs
                peak_pool[s][j] = max(peak_pool[s][j], pool_samples[s][j])
        member_busy[s][j] += t
        nxt[s][j] = -1 - k  # running
        start = max(now, free_at[s][j])
        heapq.heappush(heap, (start + t, EV_COMPUTE, seq, s, j))
        seq += 1

    for s in range(P):
        for j in range(plan.stages[s].width):
            try_start(s, j, 0.0)

    end = 0.0
    while heap:
        now, _, _, s, j = heapq.heappop(heap)
        k = -1 - nxt[s][j]
        kind, m = orders[s][k]
        st = plan.stages[s]
        n = st.sizes[m][j]
        if kind == FWD:
            in_flight_samples[s][j] += n
            peak_samples[s][j] = max(peak_samples[s][j], in_flight_samples[s][j])
        else:
            in_flight_samples[s][j] -= n
            first_bwd_done[s][j] = True
        nxt[s][j] = k + 1
        done_member.add((s, kind, m, j))
        free_at[s][j] = now
        end = max(end, now)
        key = (s, kind, m)
        cnt = remaining.get(key, st.width) - 1
        remaining[key] = cnt
        if cnt == 0:
            done_at[key] = now
            if kind == FWD:
                stage_live[s] += 1
                stage_peak[s] = max(stage_peak[s], stage_live[s])
            else:
                stage_live[s] -= 1
        try_start(s, j, now)
        for r in ((s + 1,) if kind == FWD else (s - 1,)):
            if not 0 <= r < P:
                continue
            for jj in range(plan.stages[r].width):
                if nxt[r][jj] >= 0:
                    try_start(r, jj, now)

    tail = 0.0
    for s in range(P):
        for j in range(plan.stages[s].width):
            if pool[s][j] > 0:
                tail = max(tail, free_at[s][j] + pool[s][j] - end)
    makespan = end + max(0.0, tail)
    peak_mem: Dict[int, float] = {}
    oom = []
    if mem is not None:
        for s, st in enumerate(plan.stages):
            static = _static_bytes(st, mem)
            for j, member in enumerate(st.members):
                acts = st.num_layers * mem.bytes_act_per_layer_per_sample * (peak_samples[s][j] + peak_pool[s][j])
                peak_mem[member.device] = static + acts
                if peak_mem[member.device] > member.mem_capacity:
                    oom.append(member.device)
    busy = [max(row) for row in member_busy]
    bubbles = [1.0 - b / makespan if makespan else 0.0 for b in busy]
    return StepResult(makespan, busy, bubbles, stage_peak, peak_mem, sorted(oom), max(0.0, tail))
