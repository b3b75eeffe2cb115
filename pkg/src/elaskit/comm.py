"""Communication groups as link sets, and in-place edits on membership change.

A link is an unordered rank pair stored as a sorted tuple.  Edits remove the
links of departed ranks and add only links that do not already exist
anywhere in the cluster; every other group keeps its links untouched.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .cluster import ClusterState, ElasticEvent, EventKind
from .errors import DisconnectedGroup

Link = Tuple[int, int]

MESH = "mesh"
RING = "ring"


def link(a: int, b: int) -> Link:
    if a == b:
        raise ValueError("self link")
    return (a, b) if a < b else (b, a)


def mesh_links(members: Sequence[int]) -> FrozenSet[Link]:
    return frozenset(link(a, b) for a, b in itertools.combinations(members, 2))


def ring_links(members: Sequence[int]) -> FrozenSet[Link]:
    n = len(members)
    if n < 2:
        return frozenset()
    if n == 2:
        return frozenset({link(*members)})
    return frozenset(link(members[i], members[(i + 1) % n]) for i in range(n))


def _connected(members: Sequence[int], links: Iterable[Link]) -> bool:
    if len(members) <= 1:
        return True
    adj: Dict[int, Set[int]] = {m: set() for m in members}
    for a, b in links:
        adj[a].add(b)
        adj[b].add(a)
    seen, todo = {members[0]}, [members[0]]
    while todo:
        for nb in adj[todo.pop()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return len(seen) == len(members)


@dataclass(frozen=True)
class CommGroup:
    id: str
    members: Tuple[int, ...]
    links: FrozenSet[Link] = None
    topology: str = MESH

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.links is None:
            build = ring_links if self.topology == RING else mesh_links
            object.__setattr__(self, "links", build(self.members))
        else:
            object.__setattr__(self, "links", frozenset(link(*l) for l in self.links))
        mem = set(self.members)
        if any(a not in mem or b not in mem for a, b in self.links):
            raise ValueError(f"group {self.id} has a link outside its members")
        if not _connected(self.members, self.links):
            raise DisconnectedGroup(f"group {self.id} is not connected")


@dataclass(frozen=True)
class EditPlan:
    links_to_add: FrozenSet[Link]
    links_to_remove: FrozenSet[Link]
    groups_touched: FrozenSet[str]
    new_groups: Tuple[CommGroup, ...] = ()
    est_time_s: float = 0.0

    def __post_init__(self):
        if self.links_to_add & self.links_to_remove:
            raise ValueError("a link is both added and removed")


def cluster_groups(state: ClusterState, topology: str = MESH) -> List[CommGroup]:
    """One DP group per stage and one PP group per slot, in rank-grid order."""
    grid = state.topology.rank_grid
    groups = []
    for stage in range(1, state.topology.pp + 1):
        members = [grid[(stage, s)] for s in state.topology.slots(stage)]
        if members:
            groups.append(CommGroup(f"dp{stage}", tuple(members), topology=topology))
    slots = sorted({s for _, s in grid})
    for s in slots:
        chain = [grid[(st, s)] for st in range(1, state.topology.pp + 1) if (st, s) in grid]
        if chain:
            # pipeline neighbours only talk to the next stage
            links = frozenset(link(a, b) for a, b in zip(chain, chain[1:]))
            groups.append(CommGroup(f"pp{s}", tuple(chain), links, topology="chain"))
    return groups


def global_pool(groups: Iterable[CommGroup]) -> FrozenSet[Link]:
    out: Set[Link] = set()
    for g in groups:
        out |= g.links
    return frozenset(out)


def _shrink(g: CommGroup, gone: Set[int]) -> Tuple[CommGroup, Set[Link]]:
    members = tuple(m for m in g.members if m not in gone)
    kept = {l for l in g.links if l[0] not in gone and l[1] not in gone}
    if g.topology == RING and len(members) >= 2:
        kept |= ring_links(members)  # neighbours of a departed rank reconnect
    elif g.topology == "chain" and len(members) >= 2:
        kept |= {link(a, b) for a, b in zip(members, members[1:])}
    if not _connected(members, kept):
        raise DisconnectedGroup(f"removing {sorted(gone & set(g.members))} disconnects group {g.id}")
    return CommGroup(g.id, members, frozenset(kept), g.topology), kept


def _grow(g: CommGroup, joining: Sequence[int]) -> Tuple[CommGroup, Set[Link]]:
    members = g.members + tuple(j for j in joining if j not in g.members)
    if g.topology == RING:
        links = set(ring_links(members))
    elif g.topology == "chain":
        links = set(g.links) | {link(a, b) for a, b in zip(members, members[1:])}
    else:
        links = set(g.links) | set(mesh_links(members))
    return CommGroup(g.id, members, frozenset(links), g.topology), links


def plan_edit(groups: Sequence[CommGroup], ev: ElasticEvent, pool: Optional[Iterable[Link]] = None,
              joins: Optional[Mapping[str, Sequence[int]]] = None,
              constants: Optional["CommConstants"] = None) -> EditPlan:
    """Minimal link edits for ``ev``.

    Scale-down events remove every link incident to departed ranks in the
    groups containing them.  Scale-out needs ``joins`` (group id -> joining
    ranks) since membership is a placement decision; only pairs absent from
    ``pool`` are created.  Fail-slow events edit nothing.
    """
    pool = frozenset(pool) if pool is not None else global_pool(groups)
    constants = constants or CommConstants()
    add: Set[Link] = set()
    remove: Set[Link] = set()
    touched: Set[str] = set()
    out = []
    gone = set(ev.targets) if ev.removes_devices else set()
    joins = dict(joins or {}) if ev.kind is EventKind.SCALE_OUT else {}
    for g in groups:
        if gone & set(g.members):
            new, links = _shrink(g, gone)
        elif g.id in joins:
            new, links = _grow(g, joins[g.id])
        else:
            out.append(g)
            continue
        touched.add(g.id)
        remove |= set(g.links) - links
        add |= links - set(g.links)
        if new.members:
            out.append(new)
    add -= pool
    # a link dropped by one group but still used by another is not removed
    still_used = global_pool(out)
    remove -= still_used
    plan = EditPlan(frozenset(add), frozenset(remove), frozenset(touched), tuple(out))
    return EditPlan(plan.links_to_add, plan.links_to_remove, plan.groups_touched, plan.new_groups,
                    estimate_recovery_time(plan, constants.per_link_setup_s, constants.per_group_fixed_s))


def estimate_recovery_time(plan: EditPlan, per_link_setup_s: float, per_group_fixed_s: float) -> float:
    """Affine edit cost; removals are free."""
    return per_group_fixed_s * len(plan.groups_touched) + per_link_setup_s * len(plan.links_to_add)


@dataclass(frozen=True)
class CommConstants:
    """Fitted to reported recovery times, not measured.

    Edit: a fixed per-group renegotiation plus a per-link setup.  Partial
    rebuild: affected groups are torn down and recreated.  Full rebuild: a
    global re-initialisation plus per-rank bootstrap.
    """

    per_link_setup_s: float = 0.002
    per_group_fixed_s: float = 0.09
    per_group_rebuild_s: float = 0.27
    global_init_s: float = 12.0
    per_rank_init_s: float = 0.01


@dataclass(frozen=True)
class RebuildCosts:
    edit_links: int
    partial_links: int
    full_links: int
    edit_s: float
    partial_s: float
    full_s: float

    @property
    def speedup_vs_full(self) -> float:
        return self.full_s / self.edit_s if self.edit_s else float("inf")

    @property
    def speedup_vs_partial(self) -> float:
        return self.partial_s / self.edit_s if self.edit_s else float("inf")


def compare_rebuilds(groups: Sequence[CommGroup], ev: ElasticEvent,
                     joins: Optional[Mapping[str, Sequence[int]]] = None,
                     constants: Optional[CommConstants] = None) -> RebuildCosts:
    """Links created and seconds spent by edit, partial and full rebuild."""
    c = constants or CommConstants()
    plan = plan_edit(groups, ev, joins=joins, constants=c)
    after = {g.id: g for g in plan.new_groups}
    affected = [after[i] for i in plan.groups_touched if i in after]
    partial_links = sum(len(g.links) for g in affected)
    full_links = len(global_pool(plan.new_groups))
    ranks = {m for g in plan.new_groups for m in g.members}
    partial_s = c.per_group_rebuild_s * len(plan.groups_touched) + c.per_link_setup_s * partial_links
    full_s = c.global_init_s + c.per_rank_init_s * len(ranks) + c.per_link_setup_s * full_links
    return RebuildCosts(len(plan.links_to_add), partial_links, full_links,
                        plan.est_time_s, partial_s, full_s)
