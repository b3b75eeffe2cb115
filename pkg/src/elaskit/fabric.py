"""Optimizer-state snapshots on a ring of DP ranks and the live remap plan.

Each rank ``i`` keeps a host copy of its neighbour ``(i+1) mod n``'s
optimizer-state partition, refreshed every step from gradient shards.  After
a membership change the surviving ranks rebuild the target layout from
device copies where possible and from host snapshots otherwise.

Byte intervals are half-open ``(lo, hi)`` over a flat address space.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .errors import CoverageMismatch, MissingBackup, StaleSnapshot

Interval = Tuple[int, int]


def _intersect(a: Interval, b: Interval) -> Optional[Interval]:
    lo, hi = max(a[0], b[0]), min(a[1], b[1])
    return (lo, hi) if lo < hi else None


@dataclass(frozen=True)
class PartitionLayout:
    ranges: Mapping[int, Tuple[Interval, ...]]
    total_bytes: int

    def __post_init__(self):
        norm = {r: tuple(sorted((int(lo), int(hi)) for lo, hi in iv)) for r, iv in self.ranges.items()}
        object.__setattr__(self, "ranges", norm)
        flat = sorted(iv for ivs in norm.values() for iv in ivs if iv[0] < iv[1])
        pos = 0
        for lo, hi in flat:
            if lo != pos:
                raise CoverageMismatch(f"layout has a gap or overlap at byte {min(lo, pos)}")
            pos = hi
        if pos != self.total_bytes:
            raise CoverageMismatch(f"layout covers {pos} of {self.total_bytes} bytes")

    @property
    def ranks(self) -> List[int]:
        return sorted(self.ranges)

    def size_of(self, rank: int) -> int:
        return sum(hi - lo for lo, hi in self.ranges.get(rank, ()))

    def owner_of(self, byte: int) -> int:
        for r, ivs in self.ranges.items():
            for lo, hi in ivs:
                if lo <= byte < hi:
                    return r
        raise IndexError(byte)


def equal_layout(total_bytes: int, ranks: Iterable[int]) -> PartitionLayout:
    """Contiguous equal split in ascending rank order, remainder to the first ranks."""
    ranks = sorted(set(ranks))
    if not ranks:
        raise CoverageMismatch("no ranks to lay out over")
    base, rem = divmod(total_bytes, len(ranks))
    out, pos = {}, 0
    for i, r in enumerate(ranks):
        n = base + (1 if i < rem else 0)
        out[r] = ((pos, pos + n),) if n else ()
        pos += n
    return PartitionLayout(out, total_bytes)


@dataclass(frozen=True)
class SnapshotRing:
    """``members`` in ring order; position ``i`` backs up position ``i+1``."""

    members: Tuple[int, ...]
    step_tag: int = 0

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if len(set(self.members)) != len(self.members):
            raise ValueError("duplicate ring member")

    @classmethod
    def of_size(cls, n: int, step_tag: int = 0) -> "SnapshotRing":
        return cls(tuple(range(n)), step_tag)

    @property
    def holder(self) -> Dict[int, int]:
        """rank -> rank whose partition it backs up."""
        m, n = self.members, len(self.members)
        return {m[i]: m[(i + 1) % n] for i in range(n)}

    def holder_of(self, rank: int) -> int:
        """Rank keeping the host snapshot of ``rank``'s partition."""
        m = self.members
        return m[(m.index(rank) - 1) % len(m)]


@dataclass(frozen=True)
class IntegrityReport:
    recoverable: bool
    missing: Mapping[int, Tuple[Interval, ...]] = field(default_factory=dict)

    def __bool__(self):
        return self.recoverable


def integrity_check(ring: SnapshotRing, failed: Iterable[int],
                    layout: Optional[PartitionLayout] = None) -> IntegrityReport:
    """A failed rank's state survives iff its snapshot holder is alive.

    With a single member there is no distinct holder, so a failure loses the
    state.  ``missing`` carries the lost byte ranges when ``layout`` is given.
    """
    failed = frozenset(failed)
    unknown = failed - set(ring.members)
    if unknown:
        raise ValueError(f"failed ranks {sorted(unknown)} not in ring")
    lost = sorted(f for f in failed
                  if len(ring.members) < 2 or ring.holder_of(f) in failed)
    if not lost:
        return IntegrityReport(True)
    missing = {f: (layout.ranges.get(f, ()) if layout else ()) for f in lost}
    return IntegrityReport(False, missing)


class Medium(enum.Enum):
    D2D = "D2D"
    H2D_D2D = "H2D_D2D"


@dataclass(frozen=True)
class SourceRange:
    interval: Interval
    owner: int      # rank whose partition these bytes were
    src: int        # rank that can supply them now
    medium: Medium


@dataclass(frozen=True)
class ConsolidatedLayout:
    sources: Tuple[SourceRange, ...]
    total_bytes: int


def consolidate(layout: PartitionLayout, ring: SnapshotRing, failed: Iterable[int],
                current_step: Optional[int] = None) -> ConsolidatedLayout:
    """Pick a live source for every byte: the device copy, else the host snapshot."""
    failed = frozenset(failed)
    if current_step is not None and ring.step_tag != current_step:
        raise StaleSnapshot(f"snapshot from step {ring.step_tag}, recovering at {current_step}")
    report = integrity_check(ring, failed & set(ring.members), layout)
    if not report:
        raise MissingBackup(f"unrecoverable ranks {sorted(report.missing)}")
    out = []
    for r in layout.ranks:
        for iv in layout.ranges[r]:
            if r not in failed:
                out.append(SourceRange(iv, r, r, Medium.D2D))
            else:
                out.append(SourceRange(iv, r, ring.holder_of(r), Medium.H2D_D2D))
    out.sort(key=lambda s: s.interval)
    return ConsolidatedLayout(tuple(out), layout.total_bytes)


@dataclass(frozen=True)
class TransferEntry:
    src: int
    dst: int
    interval: Interval
    medium: Medium

    @property
    def nbytes(self) -> int:
        return self.interval[1] - self.interval[0]


@dataclass(frozen=True)
class TransferPlan:
    entries: Tuple[TransferEntry, ...]
    total_bytes_moved: int

    def to_json(self) -> str:
        rows = [{"src": e.src, "dst": e.dst, "lo": e.interval[0], "hi": e.interval[1],
                 "medium": e.medium.value} for e in self.entries]
        return json.dumps({"entries": rows, "total_bytes_moved": self.total_bytes_moved},
                          sort_keys=True)


def overlap_matrix(src, dst: PartitionLayout) -> TransferPlan:
    """Intersect source ranges with target ranges; the diagonal stays local.

    ``src`` is a :class:`ConsolidatedLayout` or, when nothing failed, a plain
    :class:`PartitionLayout`.  A byte is emitted iff its original owner is not
    its target rank, so the plan moves each ownership-changing byte once.
    """
    if isinstance(src, PartitionLayout):
        src = ConsolidatedLayout(tuple(SourceRange(iv, r, r, Medium.D2D)
                                       for r in src.ranks for iv in src.ranges[r]), src.total_bytes)
    if src.total_bytes != dst.total_bytes:
        raise CoverageMismatch(f"source covers {src.total_bytes} bytes, target {dst.total_bytes}")
    entries = []
    for s in src.sources:
        for j in dst.ranks:
            if j == s.owner:
                continue
            for iv in dst.ranges[j]:
                x = _intersect(s.interval, iv)
                if x:
                    entries.append(TransferEntry(s.src, j, x, s.medium))
    entries.sort(key=lambda e: (e.interval, e.dst))
    return TransferPlan(tuple(entries), sum(e.nbytes for e in entries))


def ownership_change_bytes(src: PartitionLayout, dst: PartitionLayout) -> int:
    """Reference count: bytes whose owning rank differs between layouts."""
    a = np.full(src.total_bytes, -1)
    b = np.full(dst.total_bytes, -1)
    for lay, arr in ((src, a), (dst, b)):
        for r, ivs in lay.ranges.items():
            for lo, hi in ivs:
                arr[lo:hi] = r
    return int(np.count_nonzero(a != b))


# --- byte-level replay -----------------------------------------------------

@dataclass
class ToyState:
    """Device and host buffers of a toy optimizer state, one array per rank."""

    content: np.ndarray
    device: Dict[int, np.ndarray]
    device_mask: Dict[int, np.ndarray]
    host: Dict[int, np.ndarray]
    host_mask: Dict[int, np.ndarray]


def make_toy_state(layout: PartitionLayout, ring: SnapshotRing, rng: np.random.Generator) -> ToyState:
    n = layout.total_bytes
    content = rng.integers(0, 256, size=n, dtype=np.uint8)
    dev, dmask, host, hmask = {}, {}, {}, {}
    for r in ring.members:
        dev[r], dmask[r] = np.zeros(n, np.uint8), np.zeros(n, bool)
        host[r], hmask[r] = np.zeros(n, np.uint8), np.zeros(n, bool)
        for lo, hi in layout.ranges.get(r, ()):
            dev[r][lo:hi], dmask[r][lo:hi] = content[lo:hi], True
    for r, backed in ring.holder.items():
        for lo, hi in layout.ranges.get(backed, ()):
            host[r][lo:hi], hmask[r][lo:hi] = content[lo:hi], True
    return ToyState(content, dev, dmask, host, hmask)


def apply_plan(state: ToyState, plan: TransferPlan, dst: PartitionLayout,
               failed: Iterable[int]) -> Dict[int, np.ndarray]:
    """Execute ``plan`` against ``state`` and return each target rank's bytes.

    Raises ``AssertionError`` if an entry reads from a dead rank or from bytes
    the source does not hold, or if a target byte is left unfilled.
    """
    failed = frozenset(failed)
    n = state.content.size
    out = {}
    for j in dst.ranks:
        buf, have = np.zeros(n, np.uint8), np.zeros(n, bool)
        if j in state.device and j not in failed:
            for lo, hi in dst.ranges[j]:
                keep = state.device_mask[j][lo:hi]
                buf[lo:hi][keep] = state.device[j][lo:hi][keep]
                have[lo:hi] |= keep
        out[j] = (buf, have)
    for e in plan.entries:
        assert e.src not in failed, f"entry sources from dead rank {e.src}"
        lo, hi = e.interval
        pool, mask = ((state.device, state.device_mask) if e.medium is Medium.D2D
                      else (state.host, state.host_mask))
        assert mask[e.src][lo:hi].all(), f"rank {e.src} lacks bytes [{lo},{hi}) on {e.medium.value}"
        buf, have = out[e.dst]
        buf[lo:hi] = pool[e.src][lo:hi]
        have[lo:hi] = True
    result = {}
    for j in dst.ranks:
        buf, have = out[j]
        for lo, hi in dst.ranges[j]:
            assert have[lo:hi].all(), f"rank {j} missing target bytes in [{lo},{hi})"
        result[j] = buf
    return result


# --- snapshot overhead -----------------------------------------------------

@dataclass(frozen=True)
class SnapshotConfig:
    """Per-step quantities of the snapshot pipeline on one rank.

    Gradient shards (not optimizer state) cross the links; the host applies
    the optimizer update to its copy off the critical path.
    """

    grad_shard_bytes: float
    optstate_shard_bytes: float
    d2d_bw: float
    d2h_bw: float
    host_update_s: float
    opt_step_s: float
    allgather_s: float
    next_compute_s: float
    sync_s: float = 0.0


def snapshot_timeline(cfg: SnapshotConfig) -> float:
    """Seconds the snapshot adds to a step's critical path."""
    if cfg.d2h_bw <= 0:
        # nothing streams to the host ahead of time, so the update can't hide
        return cfg.host_update_s
    d2d = cfg.grad_shard_bytes / cfg.d2d_bw
    d2h = cfg.grad_shard_bytes / cfg.d2h_bw
    return (max(0.0, d2d - cfg.opt_step_s) + max(0.0, d2h - cfg.allgather_s)
            + max(0.0, cfg.host_update_s - cfg.next_compute_s) + cfg.sync_s)


def adam_mixed_precision_bytes(params: float) -> Tuple[float, float]:
    """(bf16 gradient bytes, fp32 master + two moments bytes) for ``params``."""
    return 2.0 * params, 12.0 * params
