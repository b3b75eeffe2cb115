"""Layer and optimizer-state movement between pipeline stages.

Two concerns live here:

* timing a layer move, either blocking (stop, copy, resume) or non-blocking
  (the source keeps a shadow copy and computes the layer's backward for the
  first ``k`` micro-batches while the parameters are in flight, then pays the
  accumulated gradient back to the target);
* the byte-level transfer graph for moving a layer's ZeRO optimizer shards
  under contiguous or interleaved sharding.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InsufficientTargetMemory, MismatchedDpDegree
from .partition import LayerMove


class MigrationMode(enum.Enum):
    BLOCKING = "blocking"
    NON_BLOCKING = "non_blocking"


@dataclass(frozen=True)
class TransferSegment:
    what: str            # "params", "payback" or "optimizer"
    src_stage: int
    dst_stage: int
    start_s: float
    end_s: float
    nbytes: float


@dataclass(frozen=True)
class MigrationSchedule:
    mode: MigrationMode
    move: LayerMove
    transfers: Tuple[TransferSegment, ...]
    shadow_span: range
    target_span: range
    payback_bytes: float
    stall_s: float

    @property
    def k(self) -> int:
        return len(self.shadow_span)


@dataclass(frozen=True)
class LayerPayload:
    """Bytes that travel when one layer changes stage."""

    param_bytes: float
    grad_bytes: float
    opt_bytes: float = 0.0


def plan_layer_migration(
    move: LayerMove,
    mode: MigrationMode,
    payload: LayerPayload,
    bw: float,
    slot_s: float,
    num_microbatches: int,
    window_s: Optional[float] = None,
    target_headroom: float = math.inf,
    start_s: float = 0.0,
) -> MigrationSchedule:
    """Time one layer move.

    ``slot_s`` is the target's per-micro-batch interval and ``window_s`` the
    time until the step's optimizer update needs every gradient and optimizer
    shard in place (defaults to ``num_microbatches * slot_s``).  The source
    computes the layer's gradients for micro-batches ``0..k-1``, where ``k``
    counts the slots that end strictly before the parameters arrive.
    """
    if bw <= 0 or slot_s <= 0:
        raise ValueError("bandwidth and slot time must be positive")
    M = num_microbatches
    window = M * slot_s if window_s is None else window_s
    p, g, o = payload.param_bytes, payload.grad_bytes, payload.opt_bytes
    need = p + o + (g if mode is MigrationMode.NON_BLOCKING else 0.0)
    if need > target_headroom:
        raise InsufficientTargetMemory(
            f"layer {move.layer} needs {need:.0f} bytes on stage {move.dst}, {target_headroom:.0f} free")
    t_param = p / bw
    t_opt = o / bw
    segs = []
    if mode is MigrationMode.BLOCKING:
        segs.append(TransferSegment("params", move.src, move.dst, start_s, start_s + t_param, p))
        if o:
            segs.append(TransferSegment("optimizer", move.src, move.dst, start_s + t_param,
                                        start_s + t_param + t_opt, o))
        return MigrationSchedule(mode, move, tuple(segs), range(0), range(M), 0.0, t_param + t_opt)

    arrival = t_param
    # an arrival exactly on a boundary lets the target take that micro-batch
    k = min(M, math.ceil(arrival / slot_s - 1e-12)) if arrival > 0 else 0
    payback = g if k else 0.0
    segs.append(TransferSegment("params", move.src, move.dst, start_s, start_s + arrival, p))
    t = start_s + arrival
    if o:
        segs.append(TransferSegment("optimizer", move.src, move.dst, t, t + t_opt, o))
        t += t_opt
    if payback:
        # lower priority: the payback starts once the shadow span is done
        begin = max(t, start_s + k * slot_s)
        segs.append(TransferSegment("payback", move.src, move.dst, begin, begin + payback / bw, payback))
        t = begin + payback / bw
    stall = max(0.0, t - start_s - window)
    # A heavy payback can cost more than simply waiting for the parameters
    # while the optimizer state still streams in the background.
    wait_stall = t_param + max(0.0, t_opt - window)
    if k and wait_stall < stall:
        segs = [sg for sg in segs if sg.what != "payback"]
        return MigrationSchedule(mode, move, tuple(segs), range(0), range(M), 0.0, wait_stall)
    return MigrationSchedule(mode, move, tuple(segs), range(k), range(k, M), payback, stall)


def gradient_coverage(schedule: MigrationSchedule, num_microbatches: int) -> bool:
    """Every micro-batch's gradient for the layer is produced exactly once."""
    src, dst = set(schedule.shadow_span), set(schedule.target_span)
    return not (src & dst) and (src | dst) == set(range(num_microbatches))


def migration_stall(moves: Sequence[LayerMove], mode: MigrationMode, payload: LayerPayload,
                    bw: float, slot_s: float, num_microbatches: int,
                    window_s: Optional[float] = None) -> float:
    """Stall of a batch of moves: links run in parallel, moves on one link queue."""
    per_link: Dict[Tuple[int, int], int] = {}
    for mv in moves:
        per_link[(mv.src, mv.dst)] = per_link.get((mv.src, mv.dst), 0) + 1
    worst = 0.0
    for (src, dst), n in per_link.items():
        agg = LayerPayload(payload.param_bytes * n, payload.grad_bytes * n, payload.opt_bytes * n)
        sched = plan_layer_migration(LayerMove(0, src, dst), mode, agg, bw, slot_s,
                                     num_microbatches, window_s)
        worst = max(worst, sched.stall_s)
    return worst


@dataclass(frozen=True)
class MttrBreakdown:
    fixed_s: float
    migration_s: float

    @property
    def total_s(self) -> float:
        return self.fixed_s + self.migration_s


def mttr_reduction(blocking: MttrBreakdown, non_blocking: MttrBreakdown) -> float:
    return 1.0 - non_blocking.total_s / blocking.total_s


# --- ZeRO shard movement ---------------------------------------------------

class ZeroKind(enum.Enum):
    CONTIGUOUS = "contiguous"
    INTERLEAVED = "interleaved"


Segment = Tuple[int, int, int]  # (layer, lo, hi) in the layer's own byte space


@dataclass(frozen=True)
class ZeroLayout:
    """Which bytes of which layer each DP rank of one stage owns.

    ``blocks[j]`` lists rank ``j``'s segments in storage order.  Under
    contiguous sharding the concatenation of all blocks in rank order is the
    stage's flat array and the blocks are equal to within one byte.
    """

    kind: ZeroKind
    D: int
    layer_bytes: int
    blocks: Tuple[Tuple[Segment, ...], ...]

    @classmethod
    def build(cls, kind: ZeroKind, D: int, layers: Sequence[int], layer_bytes: int) -> "ZeroLayout":
        if D < 1 or layer_bytes % D:
            raise ValueError(f"layer size {layer_bytes} must split evenly over D={D}")
        if kind is ZeroKind.INTERLEAVED:
            s = layer_bytes // D
            blocks = tuple(tuple((l, j * s, (j + 1) * s) for l in layers) for j in range(D))
            return cls(kind, D, layer_bytes, blocks)
        flat = [(l, 0, layer_bytes) for l in layers]
        return cls(kind, D, layer_bytes, _cut(flat, D))

    @property
    def layers(self) -> List[int]:
        return sorted({seg[0] for b in self.blocks for seg in b})

    def rank_bytes(self, j: int) -> int:
        return sum(hi - lo for _, lo, hi in self.blocks[j])

    @property
    def shard_map(self) -> Dict[Tuple[int, int], List[Tuple[int, int]]]:
        out: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
        for j, b in enumerate(self.blocks):
            for l, lo, hi in b:
                out.setdefault((l, j), []).append((lo, hi))
        return out

    def check(self) -> None:
        cover: Dict[int, List[Tuple[int, int]]] = {}
        for b in self.blocks:
            for l, lo, hi in b:
                cover.setdefault(l, []).append((lo, hi))
        for l, ivs in cover.items():
            pos = 0
            for lo, hi in sorted(ivs):
                assert lo == pos, f"layer {l} has a gap or overlap at {lo}"
                pos = hi
            assert pos == self.layer_bytes, f"layer {l} covered to {pos} of {self.layer_bytes}"
        if self.kind is ZeroKind.CONTIGUOUS:
            sizes = [self.rank_bytes(j) for j in range(self.D)]
            assert max(sizes) - min(sizes) <= 1, f"contiguous blocks unbalanced: {sizes}"
        else:
            s = self.layer_bytes // self.D
            for (l, j), ivs in self.shard_map.items():
                assert ivs == [(j * s, (j + 1) * s)], f"rank {j} does not own shard {j} of layer {l}"


def _cut(flat: Sequence[Segment], D: int) -> Tuple[Tuple[Segment, ...], ...]:
    """Split a segment sequence into ``D`` contiguous blocks, remainder first."""
    total = sum(hi - lo for _, lo, hi in flat)
    base, rem = divmod(total, D)
    sizes = [base + (1 if j < rem else 0) for j in range(D)]
    blocks, cur, left = [], [], sizes[0]
    it = [list(s) for s in flat]
    i = 0
    while len(blocks) < D:
        if left == 0 or i == len(it):
            blocks.append(tuple(cur))
            cur = []
            if len(blocks) < D:
                left = sizes[len(blocks)]
            continue
        l, lo, hi = it[i]
        take = min(left, hi - lo)
        cur.append((l, lo, lo + take))
        left -= take
        if lo + take == hi:
            i += 1
        else:
            it[i][1] = lo + take
    return tuple(blocks)


def _flat(layout: ZeroLayout) -> List[Segment]:
    return [seg for b in layout.blocks for seg in b]


@dataclass(frozen=True)
class ZeroTransfer:
    round: int          # 0 = cross-stage; j = intra-stage neighbour round j
    src: Tuple[int, int]  # (stage, rank)
    dst: Tuple[int, int]
    layer: int
    lo: int
    hi: int

    @property
    def nbytes(self) -> int:
        return self.hi - self.lo


@dataclass(frozen=True)
class ZeroMigration:
    transfers: Tuple[ZeroTransfer, ...]
    new_src: ZeroLayout
    new_dst: ZeroLayout

    @property
    def total_bytes(self) -> int:
        return sum(t.nbytes for t in self.transfers)

    def to_json(self) -> str:
        rows = [{"round": t.round, "src": list(t.src), "dst": list(t.dst), "layer": t.layer,
                 "lo": t.lo, "hi": t.hi} for t in self.transfers]
        return json.dumps({"transfers": rows, "total_bytes": self.total_bytes}, sort_keys=True)


def _owners(layout: ZeroLayout, stage: int) -> Dict[int, List[Tuple[int, int, Tuple[int, int]]]]:
    out: Dict[int, List[Tuple[int, int, Tuple[int, int]]]] = {}
    for j, b in enumerate(layout.blocks):
        for l, lo, hi in b:
            out.setdefault(l, []).append((lo, hi, (stage, j)))
    return out


def _diff(old_owners, new_layout: ZeroLayout, stage: int) -> List[ZeroTransfer]:
    out = []
    for j, b in enumerate(new_layout.blocks):
        for l, lo, hi in b:
            for olo, ohi, who in old_owners[l]:
                a, z = max(lo, olo), min(hi, ohi)
                if a < z and who != (stage, j):
                    rnd = 0 if who[0] != stage else max(who[1], j)
                    out.append(ZeroTransfer(rnd, who, (stage, j), l, a, z))
    return out


def plan_zero_migration(layer: int, src_stage: int, dst_stage: int,
                        src: ZeroLayout, dst: ZeroLayout) -> ZeroMigration:
    """Move ``layer``'s optimizer shards from ``src_stage`` to ``dst_stage``.

    Interleaved: rank ``j`` sends shard ``j`` to rank ``j``, nothing else.
    Contiguous: the layer must sit at the end of the source array (moving to
    the next stage) or at its start (moving to the previous one); the source
    re-cuts its shorter array in neighbour rounds and each destination rank
    appends an equal slice of the layer to its block.
    """
    if src.D != dst.D:
        raise MismatchedDpDegree(f"source D={src.D}, destination D={dst.D}")
    if src.kind is not dst.kind or src.layer_bytes != dst.layer_bytes:
        raise ValueError("source and destination layouts differ in kind or layer size")
    if layer not in src.layers:
        raise ValueError(f"layer {layer} is not on the source stage")
    D, O = src.D, src.layer_bytes
    old = _owners(src, src_stage)
    for l, owners in _owners(dst, dst_stage).items():
        old.setdefault(l, []).extend(owners)
    if src.kind is ZeroKind.INTERLEAVED:
        new_src = ZeroLayout(src.kind, D, O, tuple(tuple(s for s in b if s[0] != layer) for b in src.blocks))
        s = O // D
        new_dst = ZeroLayout(dst.kind, D, O, tuple(b + ((layer, j * s, (j + 1) * s),)
                                                      for j, b in enumerate(dst.blocks)))
        moves = _diff(old, new_dst, dst_stage)
        return ZeroMigration(tuple(moves), new_src, new_dst)

    flat = _flat(src)
    if flat and flat[-1][0] == layer:
        rest = [sg for sg in flat if sg[0] != layer]
    elif flat and flat[0][0] == layer:
        rest = [sg for sg in flat if sg[0] != layer]
    else:
        raise ValueError(f"layer {layer} is interior to the source stage; only edge layers migrate")
    if len(src.layers) < D:
        raise ValueError("source stage holds fewer than D layers; neighbour rounds do not suffice")
    merged: List[Segment] = []
    for l, lo, hi in rest:
        if merged and merged[-1][0] == l and merged[-1][2] == lo:
            merged[-1] = (l, merged[-1][1], hi)
        else:
            merged.append((l, lo, hi))
    new_src = ZeroLayout(src.kind, D, O, _cut(merged, D))
    s = O // D
    new_dst = ZeroLayout(dst.kind, D, O, tuple(b + ((layer, j * s, (j + 1) * s),)
                                                  for j, b in enumerate(dst.blocks)))
    moves = _diff(old, new_dst, dst_stage) + _diff(old, new_src, src_stage)
    moves.sort(key=lambda t: (t.round, t.src, t.dst, t.layer, t.lo))
    return ZeroMigration(tuple(moves), new_src, new_dst)


def zero_total_bytes(kind: ZeroKind, D: int, layer_bytes) -> Fraction:
    """Closed-form byte count for one layer move."""
    O = Fraction(layer_bytes)
    return O if kind is ZeroKind.INTERLEAVED else (D + 1) * O / 2


def apply_zero_migration(content: Mapping[int, np.ndarray], before: Mapping[Tuple[int, int], ZeroLayout],
                         mig: ZeroMigration, src_stage: int, dst_stage: int) -> Dict[Tuple[int, int], np.ndarray]:
    """Replay ``mig`` on byte buffers; returns ``{(stage, rank): bytes}`` in block order.

    ``before`` maps ``(stage, 0)`` to each stage's layout (rank index ignored).
    Asserts every transfer reads bytes its source actually holds and that the
    resulting buffers match the new layouts.
    """
    held: Dict[Tuple[int, int], Dict[Tuple[int, int, int], np.ndarray]] = {}
    for (stage, _), lay in before.items():
        for j, b in enumerate(lay.blocks):
            held[(stage, j)] = {seg: content[seg[0]][seg[1]:seg[2]].copy() for seg in b}

    def read(who, l, lo, hi):
        for (sl, slo, shi), buf in held[who].items():
            if sl == l and slo <= lo and hi <= shi:
                return buf[lo - slo:hi - slo]
        raise AssertionError(f"{who} does not hold layer {l} bytes [{lo},{hi})")

    incoming: Dict[Tuple[int, int], List[Tuple[Segment, np.ndarray]]] = {}
    for t in mig.transfers:
        incoming.setdefault(t.dst, []).append(((t.layer, t.lo, t.hi), read(t.src, t.layer, t.lo, t.hi)))

    out = {}
    for stage, lay in ((src_stage, mig.new_src), (dst_stage, mig.new_dst)):
        for j, b in enumerate(lay.blocks):
            parts = []
            for l, lo, hi in b:
                buf = np.zeros(hi - lo, np.uint8)
                have = np.zeros(hi - lo, bool)
                for (sl, slo, shi), data in held[(stage, j)].items():
                    a, z = max(lo, slo), min(hi, shi)
                    if sl == l and a < z:
                        buf[a - lo:z - lo] = data[a - slo:z - slo]
                        have[a - lo:z - lo] = True
                for (sl, slo, shi), data in incoming.get((stage, j), []):
                    a, z = max(lo, slo), min(hi, shi)
                    if sl == l and a < z:
                        buf[a - lo:z - lo] = data[a - slo:z - slo]
                        have[a - lo:z - lo] = True
                assert have.all(), f"rank {(stage, j)} missing bytes of layer {l}"
                parts.append(buf)
            out[(stage, j)] = np.concatenate(parts) if parts else np.zeros(0, np.uint8)
    return out
