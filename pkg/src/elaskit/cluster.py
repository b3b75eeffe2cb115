"""Resource pool, parallel topology and elastic events.

Devices here are *logical* devices: one tensor-parallel group counts as one
device and is lost as a whole.  States are immutable values; every event
returns a fresh :class:`ClusterState`.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .errors import DuplicateDeviceId, EmptyStage, EventOnDeadDevice, UnknownDevice

NPUS_PER_NODE = 8

Slot = Tuple[int, int]  # (stage, dp-slot); stages are 1-based, slots 0-based


@dataclass(frozen=True)
class Device:
    id: int
    node_id: int
    mem_capacity_bytes: int
    freq_mhz: float = 1400.0
    freq_max_mhz: float = 1650.0
    slow_factor: float = 1.0
    alive: bool = True

    def __post_init__(self):
        if self.mem_capacity_bytes <= 0:
            raise ValueError(f"device {self.id}: mem_capacity_bytes must be > 0")
        if self.freq_mhz > self.freq_max_mhz:
            raise ValueError(f"device {self.id}: freq {self.freq_mhz} above max {self.freq_max_mhz}")
        if self.slow_factor < 1.0:
            raise ValueError(f"device {self.id}: slow_factor must be >= 1")


@dataclass(frozen=True)
class Topology:
    tp: int
    pp: int
    rank_grid: Mapping[Slot, int] = field(default_factory=dict)

    @property
    def dp_per_stage(self) -> List[int]:
        counts = [0] * self.pp
        for stage, _slot in self.rank_grid:
            counts[stage - 1] += 1
        return counts

    def slots(self, stage: int) -> List[int]:
        return sorted(slot for s, slot in self.rank_grid if s == stage)

    def position_of(self, device_id: int) -> Optional[Slot]:
        for pos, dev in self.rank_grid.items():
            if dev == device_id:
                return pos
        return None


class EventKind(enum.Enum):
    FAIL_STOP = "fail_stop"
    FAIL_SLOW = "fail_slow"
    SCALE_IN = "scale_in"
    SCALE_OUT = "scale_out"


@dataclass(frozen=True)
class ElasticEvent:
    time_s: float
    kind: EventKind
    targets: Tuple[int, ...]
    slow_factor: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.time_s < 0:
            raise ValueError("event time must be >= 0")
        if not self.targets:
            raise ValueError("event targets must be non-empty")
        if self.kind is EventKind.FAIL_SLOW:
            if self.slow_factor is None or self.slow_factor <= 1.0:
                raise ValueError("fail_slow requires slow_factor > 1")

    @property
    def removes_devices(self) -> bool:
        return self.kind in (EventKind.FAIL_STOP, EventKind.SCALE_IN)


@dataclass(frozen=True)
class ClusterState:
    devices: Mapping[int, Device]
    topology: Topology
    step: int = 0
    free_pool: Tuple[int, ...] = ()
    devices_per_node: int = NPUS_PER_NODE

    @property
    def alive_ids(self) -> List[int]:
        return sorted(d.id for d in self.devices.values() if d.alive)

    def node_devices(self, node_id: int) -> List[int]:
        return sorted(d.id for d in self.devices.values() if d.node_id == node_id)

    def advance(self, steps: int = 1) -> "ClusterState":
        if steps < 0:
            raise ValueError("step counter cannot go backwards")
        return dataclasses.replace(self, step=self.step + steps)

    def check(self) -> None:
        """Assert the structural invariants; used by the fuzz tests."""
        seen = set()
        for pos, dev in self.topology.rank_grid.items():
            if dev in seen:
                raise AssertionError(f"device {dev} placed twice")
            seen.add(dev)
            if not self.devices[dev].alive:
                raise AssertionError(f"dead device {dev} still placed at {pos}")
        for dev in self.free_pool:
            if dev in seen:
                raise AssertionError(f"pooled device {dev} is also placed")


def build_cluster(
    tp: int,
    pp: int,
    dp: int,
    mem_capacity_bytes: int = 32 * 2**30,
    npus_per_node: int = NPUS_PER_NODE,
    freq_mhz: float = 1400.0,
    freq_max_mhz: float = 1650.0,
) -> ClusterState:
    """Lay out a ``pp x dp`` grid of logical devices, replica-major.

    Logical index ``slot * pp + (stage - 1)`` fills nodes in order, so a node
    holds consecutive stages of one DP replica (a replica of the 34B preset is
    exactly four nodes).
    """
    if npus_per_node % tp:
        raise ValueError(f"tp={tp} does not divide a node of {npus_per_node} NPUs")
    per_node = npus_per_node // tp
    devices: Dict[int, Device] = {}
    grid: Dict[Slot, int] = {}
    for slot in range(dp):
        for stage in range(1, pp + 1):
            idx = slot * pp + (stage - 1)
            devices[idx] = Device(idx, idx // per_node, mem_capacity_bytes, freq_mhz, freq_max_mhz)
            grid[(stage, slot)] = idx
    return ClusterState(devices, Topology(tp, pp, grid), 0, (), per_node)


def node_event(state: ClusterState, kind: EventKind, node_ids: Iterable[int], time_s: float = 0.0,
               slow_factor: Optional[float] = None) -> ElasticEvent:
    """Expand whole-node events into their device targets."""
    targets: List[int] = []
    for node in node_ids:
        members = state.node_devices(node)
        if not members:
            raise UnknownDevice(f"node {node} has no devices")
        targets.extend(members)
    return ElasticEvent(time_s, kind, tuple(targets), slow_factor)


def apply_event(state: ClusterState, ev: ElasticEvent) -> ClusterState:
    devices = dict(state.devices)
    grid = dict(state.topology.rank_grid)
    pool = list(state.free_pool)

    if ev.kind is EventKind.SCALE_OUT:
        if len(set(ev.targets)) != len(ev.targets):
            raise DuplicateDeviceId(f"repeated id in {ev.targets}")
        clash = [t for t in ev.targets if t in devices]
        if clash:
            raise DuplicateDeviceId(f"device ids already in use: {clash}")
        template = devices[min(devices)] if devices else Device(0, 0, 32 * 2**30)
        next_node = max((d.node_id for d in devices.values()), default=-1) + 1
        for i, dev_id in enumerate(sorted(ev.targets)):
            devices[dev_id] = Device(
                dev_id,
                next_node + i // state.devices_per_node,
                template.mem_capacity_bytes,
                min(template.freq_mhz, template.freq_max_mhz),
                template.freq_max_mhz,
            )
            pool.append(dev_id)
        return dataclasses.replace(state, devices=devices, free_pool=tuple(pool))

    for t in ev.targets:
        if t not in devices:
            raise UnknownDevice(f"device {t} not in cluster")
        if not devices[t].alive:
            raise EventOnDeadDevice(f"device {t} is already gone")

    if ev.kind is EventKind.FAIL_SLOW:
        for t in ev.targets:
            devices[t] = dataclasses.replace(devices[t], slow_factor=float(ev.slow_factor))
        return dataclasses.replace(state, devices=devices)

    gone = set(ev.targets)
    for t in gone:
        devices[t] = dataclasses.replace(devices[t], alive=False)
    grid = {pos: dev for pos, dev in grid.items() if dev not in gone}
    pool = [d for d in pool if d not in gone]
    topo = dataclasses.replace(state.topology, rank_grid=grid)
    return dataclasses.replace(state, devices=devices, topology=topo, free_pool=tuple(pool))


def place_devices(state: ClusterState, placements: Mapping[Slot, int]) -> ClusterState:
    """Move pooled devices into grid slots (the planners decide where)."""
    grid = dict(state.topology.rank_grid)
    pool = list(state.free_pool)
    for pos, dev in placements.items():
        if dev not in pool:
            raise UnknownDevice(f"device {dev} is not in the free pool")
        if pos in grid:
            raise DuplicateDeviceId(f"slot {pos} already occupied by {grid[pos]}")
        grid[pos] = dev
        pool.remove(dev)
    topo = dataclasses.replace(state.topology, rank_grid=grid)
    return dataclasses.replace(state, topology=topo, free_pool=tuple(pool))


def _check_stage(state: ClusterState, stage: int) -> None:
    if not 1 <= stage <= state.topology.pp:
        raise ValueError(f"stage {stage} outside 1..{state.topology.pp}")


def dp_group(state: ClusterState, stage: int) -> List[int]:
    """Alive members of ``stage`` in ascending slot order."""
    _check_stage(state, stage)
    grid = state.topology.rank_grid
    members = [grid[(stage, slot)] for slot in state.topology.slots(stage)]
    members = [m for m in members if state.devices[m].alive]
    if not members:
        raise EmptyStage(stage)
    return members


def pp_neighbors(state: ClusterState, stage: int) -> Tuple[Optional[int], Optional[int]]:
    _check_stage(state, stage)
    prev = stage - 1 if stage > 1 else None
    nxt = stage + 1 if stage < state.topology.pp else None
    return prev, nxt
