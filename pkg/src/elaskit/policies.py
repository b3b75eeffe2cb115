"""Recovery policies: how a pipeline reconfigures after an elastic event.

``ElasWave`` resizes micro-batches, re-partitions layers, up-clocks a lone
straggler and edits communicators in place.  ``Reroute`` keeps the layer
split and pushes a lost member's samples to its stage peers, deferring their
extra weight-gradient work into idle time.  ``ReplicaDrop`` removes every DP
replica that lost a device and restarts.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from .cluster import ClusterState, ElasticEvent, EventKind
from .comm import CommConstants, CommGroup, compare_rebuilds, link, plan_edit
from .cost import CostProfile, MemModel, mem_footprint, stage_phase_times
from .dataflow import MicrobatchAssignment, even_split, reshard_microbatches
from .dvfs import DvfsQuery, DvfsStatus, plan_frequency
from .errors import Infeasible, NoSurvivors
from .fabric import SnapshotRing, consolidate, equal_layout, overlap_matrix
from .migration import LayerPayload, MigrationMode, MttrBreakdown, migration_stall, mttr_reduction
from .partition import LayerAssignment, LayerMove, plan_partition
from .sim import Member, PipelinePlan, StagePlan, simulate_step


class Policy(enum.Enum):
    ELASWAVE = "elaswave"
    REROUTE = "reroute"
    REPLICA_DROP = "replicadrop"


@dataclass(frozen=True)
class RecoveryConstants:
    """Pause-time constants; fitted to reported recovery times, not measured."""

    comm: CommConstants = CommConstants()
    detect_s: float = 0.0
    planning_s: float = 0.05       # modeled planner time, kept constant for determinism
    full_restart_s: float = 20.0
    remap_bw: float = 4 * 25e9     # host-to-device per logical device
    dvfs_epsilon_frac: float = 0.005
    dvfs_step_mhz: float = 10.0
    dvfs: bool = True


@dataclass
class Group:
    """A stage's DP group, identified by the stage it started as."""

    gid: int
    members: List[Member]
    assignment: MicrobatchAssignment
    base_mbs: int
    defer_w: bool = False
    sizes: Optional[Tuple[Tuple[int, ...], ...]] = None   # explicit override

    @property
    def width(self) -> int:
        return len(self.members)

    def size_table(self) -> Tuple[Tuple[int, ...], ...]:
        if self.sizes is not None:
            return self.sizes
        a = self.assignment
        return tuple(tuple(a.mbs_at(m)[mem.slot] for mem in self.members)
                     for m in range(a.num_microbatches))


@dataclass
class PipelineState:
    groups: List[Group]
    layers: LayerAssignment

    def to_plan(self) -> PipelinePlan:
        stages = []
        for g, (lo, hi) in zip(self.groups, self.layers.stage_ranges()):
            stages.append(StagePlan(lo, hi, tuple(g.members), g.size_table(), g.base_mbs, g.defer_w))
        return PipelinePlan(tuple(stages))

    @property
    def devices(self) -> List[int]:
        return sorted(m.device for g in self.groups for m in g.members)

    def comm_groups(self) -> List[CommGroup]:
        out = [CommGroup(f"dp{g.gid}", tuple(m.device for m in g.members)) for g in self.groups if g.members]
        slots = sorted({m.slot for g in self.groups for m in g.members})
        for s in slots:
            chain = [m.device for g in self.groups for m in g.members if m.slot == s]
            links = frozenset(link(a, b) for a, b in zip(chain, chain[1:]))
            out.append(CommGroup(f"pp{s}", tuple(chain), links, topology="chain"))
        return out

    def layer_owner(self) -> Dict[int, int]:
        return {l: self.groups[p - 1].gid for p, (lo, hi) in enumerate(self.layers.stage_ranges(), 1)
                for l in range(lo, hi + 1)}


@dataclass
class Recovery:
    """Pause attribution for one handled event."""

    event_index: int
    time_s: float
    kind: str
    policy: str
    detect_s: float = 0.0
    comm_repair_s: float = 0.0
    remap_s: float = 0.0
    migration_stall_s: float = 0.0
    other_s: float = 0.0
    layer_moves: int = 0
    notes: str = ""

    @property
    def total_s(self) -> float:
        return self.detect_s + self.comm_repair_s + self.remap_s + self.migration_stall_s + self.other_s

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["total_s"] = self.total_s
        return d


@dataclass(frozen=True)
class Workload:
    num_layers: int
    mbs: int
    num_microbatches: int
    profile: CostProfile
    mem: MemModel
    link_bw: float
    base_freq_mhz: float = 1400.0
    rotate: bool = True
    migration_mode: MigrationMode = MigrationMode.NON_BLOCKING


def member_for(cluster: ClusterState, dev: int, slot: int, base_freq: float) -> Member:
    d = cluster.devices[dev]
    return Member(dev, slot, d.freq_mhz / base_freq, d.slow_factor, d.mem_capacity_bytes)


def initial_state(cluster: ClusterState, w: Workload) -> PipelineState:
    topo = cluster.topology
    groups = []
    for stage in range(1, topo.pp + 1):
        slots = topo.slots(stage)
        members = [member_for(cluster, topo.rank_grid[(stage, s)], s, w.base_freq_mhz) for s in slots]
        a = MicrobatchAssignment({s: w.mbs for s in slots}, w.num_microbatches, w.rotate)
        groups.append(Group(stage, members, a, w.mbs))
    layers = partition_for(groups, w)
    return PipelineState(groups, layers)


# --- ElasWave planning -------------------------------------------------------

def _group_factor(g: Group) -> float:
    return max(m.slow_factor / m.freq_scale for m in g.members)


def _stage_time(w: Workload, groups: Sequence[Group], p: int, layers: int, factor: Optional[float] = None,
                peak: bool = False) -> float:
    """Model time of one micro-batch on stage ``p``; ``peak`` uses the largest share, else the mean."""
    g = groups[p - 1]
    if g.sizes is not None:
        m = max(max(r) for r in g.sizes)
    else:
        m = g.assignment.max_mbs if peak else float(g.assignment.mean_mbs)
    r_prev = groups[p - 2].width if p > 1 else None
    r_next = groups[p].width if p < len(groups) else None
    f = _group_factor(g) if factor is None else factor
    fwd, bwd = stage_phase_times(w.profile, layers, max(1.0, m), r_prev, g.width, r_next, 1.0, 1.0)
    return (fwd + bwd) * f


def partition_for(groups: Sequence[Group], w: Workload, peak: bool = False) -> LayerAssignment:
    P = len(groups)

    def time_fn(p, a, b):
        return _stage_time(w, groups, p, b - a + 1, peak=peak)

    def mem_fn(p, a, b):
        g = groups[p - 1]
        mbs = max(max(r) for r in g.sizes) if g.sizes is not None else g.assignment.max_mbs
        return mem_footprint(w.mem, b - a + 1, mbs, p, P, g.width)

    caps = [min(m.mem_capacity for m in g.members) for g in groups]
    return plan_partition(w.num_layers, P, caps, time_fn, mem_fn)


def stage_times(state: PipelineState, w: Workload) -> List[float]:
    return [_stage_time(w, state.groups, p, n) for p, n in enumerate(state.layers.counts(), 1)]


def apply_dvfs(state: PipelineState, w: Workload, c: RecoveryConstants, f_max_mhz: float) -> Optional[float]:
    """Up-clock a unique straggler stage toward the runner-up's time."""
    times = stage_times(state, w)
    if len(times) < 2:
        return None
    order = sorted(range(len(times)), key=lambda i: -times[i])
    top, second = order[0], order[1]
    t_star = times[second]
    eps = c.dvfs_epsilon_frac * t_star
    if times[top] <= t_star + eps:
        return None
    g = state.groups[top]
    n = state.layers.counts()[top]
    cur = min(m.freq_scale for m in g.members) * w.base_freq_mhz
    slow = max(m.slow_factor for m in g.members)

    def observe(f):
        return _stage_time(w, state.groups, top + 1, n, slow * w.base_freq_mhz / f)

    q = DvfsQuery(cur, max(cur, f_max_mhz), t_star, eps, c.dvfs_step_mhz)
    res = plan_frequency(q, observe)
    f = res.f_star
    g.members = [dataclasses.replace(m, freq_scale=f / w.base_freq_mhz) for m in g.members]
    return f


def _best_layout(groups: List[Group], w: Workload) -> PipelineState:
    """Pick the candidate layout with the shortest simulated step.

    Uneven shares couple DP members through neighbouring stages, so the true
    stage time sits between the mean-share and peak-share estimates; both
    partitions are tried.  The slots intact on every stage may also run as
    whole replicas at the original micro-batch size, idling the rest, which
    wins when rebalancing cannot recover the lost capacity.
    """
    options = [(groups, False), (groups, True)]
    common = set.intersection(*({m.slot for m in g.members} for g in groups))
    if common:
        G = sum(groups[0].assignment.step_samples().values())
        even = []
        for g in groups:
            g = dataclasses.replace(g, members=[m for m in g.members if m.slot in common])
            even.append(dataclasses.replace(g, sizes=replica_sizes(G, g.width, w.mbs)))
        options.append((even, False))
    best, best_t = None, math.inf
    for gs, peak in options:
        try:
            cand = PipelineState(gs, partition_for(gs, w, peak))
        except Infeasible:
            continue
        res = simulate_step(cand.to_plan(), w.profile, w.mem)
        if not res.oom and res.makespan_s < best_t - 1e-12:
            best, best_t = cand, res.makespan_s
    if best is None:
        raise Infeasible("no feasible layout for the surviving devices")
    return best


def _moves(old: Dict[int, int], new: Dict[int, int]) -> List[LayerMove]:
    return [LayerMove(l, old[l], new[l]) for l in sorted(old) if old[l] != new[l]]


def _remap_seconds(old_groups: Dict[int, Group], dead: set, w: Workload, old_counts: Dict[int, int],
                   c: RecoveryConstants) -> float:
    """Time to rebuild lost ZeRO partitions from host snapshots, per group in parallel."""
    worst = 0.0
    for gid, g in old_groups.items():
        ranks = [m.device for m in g.members]
        lost = [r for r in ranks if r in dead]
        survivors = [r for r in ranks if r not in dead]
        if not lost or not survivors:
            continue
        units = 720720  # divisible by every width up to 16
        src = equal_layout(units, range(len(ranks)))
        ring = SnapshotRing.of_size(len(ranks))
        idx = [i for i, r in enumerate(ranks) if r in dead]
        try:
            cons = consolidate(src, ring, idx)
        except Exception:
            continue  # unrecoverable from snapshots; the caller reports it
        dst = equal_layout(units, [i for i, r in enumerate(ranks) if r not in dead])
        plan = overlap_matrix(cons, dst)
        per_dst: Dict[int, int] = {}
        for e in plan.entries:
            per_dst[e.dst] = per_dst.get(e.dst, 0) + e.nbytes
        total = old_counts[gid] * w.mem.bytes_optstate_per_layer
        worst = max(worst, max(per_dst.values(), default=0) / units * total / c.remap_bw)
    return worst


def migration_seconds(moves: Sequence[LayerMove], w: Workload, slot_s: float,
                      mode: Optional[MigrationMode] = None, zero_factor: float = 1.0,
                      min_width: int = 1) -> float:
    """Critical-path seconds of a move set.

    Each layer carries its bf16 parameters plus the optimizer bytes one
    receiving rank takes; ``zero_factor`` scales optimizer traffic for
    contiguous sharding's extra intra-stage rounds.
    """
    if not moves:
        return 0.0
    mode = mode or w.migration_mode
    payload = LayerPayload(w.mem.bytes_param_per_layer, w.mem.bytes_grad_per_layer,
                           zero_factor * w.mem.bytes_optstate_per_layer / max(1, min_width))
    return migration_stall(moves, mode, payload, w.link_bw, slot_s, w.num_microbatches)


def elaswave_handle(state: PipelineState, cluster: ClusterState, ev: ElasticEvent, w: Workload,
                    c: RecoveryConstants, index: int) -> Tuple[PipelineState, Recovery]:
    rec = Recovery(index, ev.time_s, ev.kind.value, Policy.ELASWAVE.value)
    old_owner = state.layer_owner()
    old_counts = {g.gid: n for g, n in zip(state.groups, state.layers.counts())}
    old_groups = {g.gid: dataclasses.replace(g, members=list(g.members)) for g in state.groups}
    old_comm = state.comm_groups()
    old_plan_slot = max(stage_times(state, w)) if state.groups else 1.0
    groups = [dataclasses.replace(g, members=list(g.members)) for g in state.groups]
    joins: Dict[str, List[int]] = {}
    dead = set(ev.targets) if ev.removes_devices else set()

    if ev.removes_devices:
        for g in groups:
            keep = [m for m in g.members if m.device not in dead]
            if len(keep) != g.width:
                g.members = keep
                if keep:
                    g.assignment = reshard_microbatches(g.assignment, [m.slot for m in keep])
        groups = [g for g in groups if g.members]
        if not groups:
            raise NoSurvivors("every stage lost all members")
        if len(groups) < len(state.groups):
            rec.notes = f"merged {len(state.groups) - len(groups)} emptied stage(s)"
    elif ev.kind is EventKind.FAIL_SLOW:
        for g in groups:
            g.members = [member_for(cluster, m.device, m.slot, w.base_freq_mhz)
                         if m.device in ev.targets else m for m in g.members]
    elif ev.kind is EventKind.SCALE_OUT:
        joins = _place_new(groups, cluster, ev.targets, w)

    new_state = _best_layout(groups, w)
    f_max = min(cluster.devices[m.device].freq_max_mhz for g in groups for m in g.members)
    if c.dvfs:
        apply_dvfs(new_state, w, c, f_max)
    moves = _moves(old_owner, new_state.layer_owner())
    moves = [mv for mv in moves if mv.src in {g.gid for g in groups}]  # orphaned layers restore from snapshot

    if ev.kind is not EventKind.FAIL_SLOW:
        rec.comm_repair_s = plan_edit(old_comm, ev, joins=joins, constants=c.comm).est_time_s
    if ev.removes_devices:
        rec.remap_s = _remap_seconds(old_groups, dead, w, old_counts, c)
    elif joins:
        # newcomers pull their stage's parameters and a ZeRO share
        rec.remap_s = max(old_counts[g.gid] * (w.mem.bytes_param_per_layer + w.mem.bytes_optstate_per_layer / g.width)
                          for g in groups if f"dp{g.gid}" in joins) / c.remap_bw
    min_w = min(g.width for g in groups)
    rec.migration_stall_s = migration_seconds(moves, w, old_plan_slot, min_width=min_w)
    rec.layer_moves = len(moves)
    rec.detect_s = c.detect_s if ev.kind is EventKind.FAIL_STOP else 0.0
    rec.other_s = c.planning_s
    return new_state, rec


def _place_new(groups: List[Group], cluster: ClusterState, new_devs: Sequence[int], w: Workload) -> Dict[str, List[int]]:
    """Refill the least-populated groups first; slot ids fill the lowest gaps."""
    joins: Dict[str, List[int]] = {}
    for dev in sorted(new_devs):
        g = min(groups, key=lambda x: (x.width, x.gid))
        used = {m.slot for m in g.members}
        slot = next(s for s in range(len(used) + 1) if s not in used)
        g.members = sorted(g.members + [member_for(cluster, dev, slot, w.base_freq_mhz)], key=lambda m: m.slot)
        g.assignment = reshard_microbatches(g.assignment, [m.slot for m in g.members])
        joins.setdefault(f"dp{g.gid}", []).append(dev)
    return joins


# --- Reroute -----------------------------------------------------------------

def reroute_handle(state: PipelineState, cluster: ClusterState, ev: ElasticEvent, w: Workload,
                   c: RecoveryConstants, index: int) -> Tuple[PipelineState, Recovery]:
    rec = Recovery(index, ev.time_s, ev.kind.value, Policy.REROUTE.value)
    if ev.kind is EventKind.FAIL_SLOW:
        groups = [dataclasses.replace(g, members=[member_for(cluster, m.device, m.slot, w.base_freq_mhz)
                                                  if m.device in ev.targets else m for m in g.members])
                  for g in state.groups]
        return PipelineState(groups, state.layers), rec
    groups = [dataclasses.replace(g, members=list(g.members)) for g in state.groups]
    joins: Dict[str, List[int]] = {}
    if ev.removes_devices:
        dead = set(ev.targets)
        for g in groups:
            keep = [m for m in g.members if m.device not in dead]
            if len(keep) != g.width:
                if not keep:
                    rec.notes = "stage emptied; falling back to replica drop"
                    return replicadrop_handle(state, cluster, ev, w, c, index, policy=Policy.REROUTE)
                g.members = keep
                g.assignment = reshard_microbatches(g.assignment, [m.slot for m in keep])
                g.defer_w = True
        rec.remap_s = _remap_seconds({g.gid: g for g in state.groups}, dead, w,
                                     {g.gid: n for g, n in zip(state.groups, state.layers.counts())}, c)
    else:
        joins = _place_new(groups, cluster, ev.targets, w)
        for g in groups:
            g.defer_w = any(n > g.base_mbs for n in g.assignment.per_slot_mbs.values())
    costs = compare_rebuilds(state.comm_groups(), ev, joins=joins, constants=c.comm)
    rec.comm_repair_s = costs.partial_s
    rec.detect_s = c.detect_s if ev.kind is EventKind.FAIL_STOP else 0.0
    rec.other_s = c.planning_s
    return PipelineState(groups, state.layers), rec


# --- ReplicaDrop -------------------------------------------------------------

def replica_sizes(global_batch: int, width: int, mbs: int) -> Tuple[Tuple[int, ...], ...]:
    """Micro-batches of ``width * mbs`` samples; the last one takes the remainder."""
    per = width * mbs
    full, rem = divmod(global_batch, per)
    rows = [tuple([mbs] * width)] * full
    if rem:
        split = even_split(rem, range(width))
        rows.append(tuple(split[j] for j in range(width)))
    return tuple(rows)


def replicadrop_handle(state: PipelineState, cluster: ClusterState, ev: ElasticEvent, w: Workload,
                       c: RecoveryConstants, index: int, policy: Policy = Policy.REPLICA_DROP
                       ) -> Tuple[PipelineState, Recovery]:
    rec = Recovery(index, ev.time_s, ev.kind.value, policy.value)
    if ev.kind is EventKind.FAIL_SLOW:
        return state, rec
    slots = sorted({m.slot for g in state.groups for m in g.members})
    by_slot = {s: [m for g in state.groups for m in g.members if m.slot == s] for s in slots}
    G = state.to_plan().samples_per_step
    if ev.removes_devices:
        dead = set(ev.targets)
        keep = [s for s in slots if len(by_slot[s]) == len(state.groups)
                and not any(m.device in dead for m in by_slot[s])]
    else:
        keep = [s for s in slots if len(by_slot[s]) == len(state.groups)]
        free = sorted(ev.targets)
        P = len(state.groups)
        new_slot = max(slots, default=-1) + 1
        groups = [dataclasses.replace(g, members=list(g.members)) for g in state.groups]
        while len(free) >= P:
            take, free = free[:P], free[P:]
            for g, dev in zip(groups, take):
                g.members.append(member_for(cluster, dev, new_slot, w.base_freq_mhz))
            keep.append(new_slot)
            new_slot += 1
        state = PipelineState(groups, state.layers)
        if len(keep) == len(slots):
            return state, rec
    if not keep:
        raise NoSurvivors("no intact DP replica left")
    groups = []
    for g in state.groups:
        members = [m for m in g.members if m.slot in keep]
        sizes = replica_sizes(G, len(members), w.mbs)
        a = MicrobatchAssignment({m.slot: w.mbs for m in members}, len(sizes), False)
        groups.append(Group(g.gid, members, a, w.mbs, False, sizes))
    rec.other_s = c.full_restart_s
    return PipelineState(groups, state.layers), rec


HANDLERS = {
    Policy.ELASWAVE: elaswave_handle,
    Policy.REROUTE: reroute_handle,
    Policy.REPLICA_DROP: replicadrop_handle,
}


def layer_migration_mttr(state: PipelineState, cluster: ClusterState, ev: ElasticEvent, w: Workload,
                         c: RecoveryConstants) -> Tuple[MttrBreakdown, MttrBreakdown]:
    """(Blocking under contiguous ZeRO, NonBlocking under interleaved ZeRO) for one event.

    Both share the communicator edit and planning time.  Contiguous sharding
    moves ``(D + 1) / 2`` times the optimizer bytes of interleaved sharding
    because every rank's block shifts.  Snapshot remapping is excluded: it is
    the same for both and not part of layer migration.
    """
    new_state, rec = elaswave_handle(state, cluster, ev, w, c, 0)
    alive = {g.gid for g in new_state.groups}
    moves = [mv for mv in _moves(state.layer_owner(), new_state.layer_owner()) if mv.src in alive]
    slot_s = max(stage_times(state, w))
    D = min(g.width for g in new_state.groups)
    fixed = rec.comm_repair_s + rec.other_s
    blocking = migration_seconds(moves, w, slot_s, MigrationMode.BLOCKING, (D + 1) / 2, D)
    overlapped = migration_seconds(moves, w, slot_s, MigrationMode.NON_BLOCKING, 1.0, D)
    return MttrBreakdown(fixed, blocking), MttrBreakdown(fixed, overlapped)


def layer_move_mttr(w: Workload, num_layers: int, width: int, slot_s: float,
                    fixed_s: float) -> Tuple[MttrBreakdown, MttrBreakdown]:
    """Same comparison for ``num_layers`` consecutive layers crossing one stage boundary."""
    moves = [LayerMove(l, 1, 2) for l in range(num_layers)]
    blocking = migration_seconds(moves, w, slot_s, MigrationMode.BLOCKING, (width + 1) / 2, width)
    overlapped = migration_seconds(moves, w, slot_s, MigrationMode.NON_BLOCKING, 1.0, width)
    return MttrBreakdown(fixed_s, blocking), MttrBreakdown(fixed_s, overlapped)
