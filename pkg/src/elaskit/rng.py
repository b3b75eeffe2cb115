"""Keyed per-(sample, layer, op) random streams and their reshard map.

Values come from Philox4x32-10 (Salmon et al., SC'11), a counter-based
generator: the output is a pure function of (key, counter), so "moving an
RNG state" between devices is a metadata copy.

Counter layout per 128-bit block: ``(block, op_index, layer_id, sample_id)``
as four 32-bit words; the 64-bit key is the stream seed.  Every block yields
two doubles with 53 random bits each.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from importlib import resources
from typing import Dict, FrozenSet, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import MissingBackup
from .partition import LayerMove

M32 = 0xFFFFFFFF
PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85


def philox4x32(counter: Sequence[int], key: Sequence[int], rounds: int = 10) -> Tuple[int, int, int, int]:
    """Scalar reference implementation, one block."""
    c0, c1, c2, c3 = (x & M32 for x in counter)
    k0, k1 = (x & M32 for x in key)
    for r in range(rounds):
        if r:
            k0 = (k0 + PHILOX_W0) & M32
            k1 = (k1 + PHILOX_W1) & M32
        p0 = PHILOX_M0 * c0
        p1 = PHILOX_M1 * c2
        c0, c1, c2, c3 = ((p1 >> 32) ^ c1 ^ k0, p1 & M32, (p0 >> 32) ^ c3 ^ k1, p0 & M32)
    return c0, c1, c2, c3


def philox4x32_np(ctr: np.ndarray, key: Tuple[int, int], rounds: int = 10) -> np.ndarray:
    """Vectorised Philox over an ``(n, 4)`` uint64 array of 32-bit counter words."""
    c = [ctr[:, i].astype(np.uint64) for i in range(4)]
    k0, k1 = np.uint64(key[0] & M32), np.uint64(key[1] & M32)
    mask, m0, m1, s32 = np.uint64(M32), np.uint64(PHILOX_M0), np.uint64(PHILOX_M1), np.uint64(32)
    for r in range(rounds):
        if r:
            k0 = (k0 + np.uint64(PHILOX_W0)) & mask
            k1 = (k1 + np.uint64(PHILOX_W1)) & mask
        p0 = m0 * c[0]
        p1 = m1 * c[2]
        c = [(p1 >> s32) ^ c[1] ^ k0, p1 & mask, (p0 >> s32) ^ c[3] ^ k1, p0 & mask]
    return np.stack(c, axis=1)


@dataclass(frozen=True)
class RngKey:
    seed: int
    sample_id: int
    layer_id: int
    op_index: int = 0


def draw(key: RngKey, n: int) -> List[float]:
    """``n`` doubles in [0, 1) for ``key``; bit-identical on every platform."""
    return draw_array(key, n).tolist()


def draw_array(key: RngKey, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    blocks = (n + 1) // 2
    ctr = np.zeros((blocks, 4), dtype=np.uint64)
    ctr[:, 0] = np.arange(blocks, dtype=np.uint64)
    ctr[:, 1] = key.op_index & M32
    ctr[:, 2] = key.layer_id & M32
    ctr[:, 3] = key.sample_id & M32
    out = philox4x32_np(ctr, (key.seed & M32, (key.seed >> 32) & M32))
    # two 53-bit mantissas per block: (27 bits of w0, 26 of w1) and (w2, w3)
    a = (out[:, 0] >> np.uint64(5)) * np.uint64(1 << 26) + (out[:, 1] >> np.uint64(6))
    b = (out[:, 2] >> np.uint64(5)) * np.uint64(1 << 26) + (out[:, 3] >> np.uint64(6))
    words = np.empty(blocks * 2, dtype=np.uint64)
    words[0::2] = a
    words[1::2] = b
    return words[:n].astype(np.float64) * (1.0 / 9007199254740992.0)


def golden_vectors() -> dict:
    """Pinned outputs shipped with the package for cross-platform checks."""
    text = resources.files("elaskit").joinpath("data/rng_golden.json").read_text()
    return json.loads(text)


# --- stream descriptors and resharding -------------------------------------

Position = Tuple[int, int]  # (dp slot, pp stage)


@dataclass(frozen=True, order=True)
class StreamDescriptor:
    """Identity of one device's random stream ``R^t_{slot,stage}``."""

    seed: int
    owner_slot: int
    owner_stage: int
    counter_base: int = 0

    def stream_seed(self) -> int:
        w = philox4x32((self.owner_slot, self.owner_stage, self.counter_base, M32), (self.seed, self.seed >> 32))
        return (w[1] << 32) | w[0]

    def key(self, sample_id: int, layer_id: int, op_index: int = 0) -> RngKey:
        return RngKey(self.stream_seed(), sample_id, layer_id, op_index)


@dataclass(frozen=True)
class StreamStateMap:
    """Who owns which stream, who executes what, and who holds backups.

    ``origin_slot``/``origin_stage`` record the static (fault-free) owner of
    every sample and layer; ``exec_slot``/``exec_stage`` record where they
    run now.  ``backups[pos]`` lists the descriptors a device holds for its
    stage peers.
    """

    seed: int
    step: int
    states: Mapping[Position, StreamDescriptor]
    backups: Mapping[Position, FrozenSet[StreamDescriptor]]
    origin_slot: Mapping[int, int]
    origin_stage: Mapping[int, int]
    exec_slot: Mapping[int, int]
    exec_stage: Mapping[int, int]
    alive: FrozenSet[Position]

    def descriptor(self, slot: int, stage: int) -> StreamDescriptor:
        return StreamDescriptor(self.seed, slot, stage, self.step)

    def resolve(self, sample_id: int, layer_id: int) -> StreamDescriptor:
        """Stream used for (sample, layer): always the static owner's stream.

        Raises :class:`MissingBackup` when no live device can supply it.
        """
        want = self.descriptor(self.origin_slot[sample_id], self.origin_stage[layer_id])
        owner_pos = (want.owner_slot, want.owner_stage)
        run_slot = self.exec_slot[sample_id]
        if owner_pos in self.alive:
            # own state, or forwarded from the origin stage each forward pass
            return want
        holder = (run_slot, want.owner_stage)
        if holder in self.alive and want in self.backups.get(holder, frozenset()):
            return want
        raise MissingBackup(f"no live holder of stream {owner_pos} for sample {sample_id}, layer {layer_id}")

    def resolve_naive(self, sample_id: int, layer_id: int) -> StreamDescriptor:
        """Stream the executing device would use without resharding."""
        return self.descriptor(self.exec_slot[sample_id], self.exec_stage[layer_id])


def init_stream_map(seed: int, step: int, sample_slot: Mapping[int, int], layer_stage: Mapping[int, int],
                    positions: Iterable[Position]) -> StreamStateMap:
    positions = frozenset(positions)
    states = {pos: StreamDescriptor(seed, pos[0], pos[1], step) for pos in positions}
    backups: Dict[Position, FrozenSet[StreamDescriptor]] = {}
    for pos in positions:
        peers = [states[q] for q in positions if q[1] == pos[1] and q != pos]
        backups[pos] = frozenset(peers)
    return StreamStateMap(seed, step, states, backups, dict(sample_slot), dict(layer_stage),
                          dict(sample_slot), dict(layer_stage), positions)


def advance_stream_map(m: StreamStateMap, step: int, sample_origin: Mapping[int, int],
                       sample_exec: Mapping[int, int]) -> StreamStateMap:
    """Roll the map to ``step`` with a fresh batch of samples.

    Backups advance with their owners: a descriptor is metadata, so the
    holder can derive the next step's stream without a transfer.
    """
    states = {pos: dataclasses.replace(d, counter_base=step) for pos, d in m.states.items()}
    backups = {pos: frozenset(dataclasses.replace(d, counter_base=step) for d in ds)
               for pos, ds in m.backups.items()}
    return dataclasses.replace(m, step=step, states=states, backups=backups,
                               origin_slot=dict(sample_origin), exec_slot=dict(sample_exec))


def reshard_rng(m: StreamStateMap, moves: Sequence[LayerMove], reassigned: Mapping[int, int],
                dead: Iterable[Position] = ()) -> StreamStateMap:
    """Apply layer moves and sample reassignments to the map.

    Migrated layers keep resolving to their origin stage's stream; reassigned
    samples resolve through the backup of their original slot.  Every
    (sample, layer) pair is checked, so an incomplete backup set surfaces as
    :class:`MissingBackup` here rather than mid-step.
    """
    alive = frozenset(m.alive) - frozenset(dead)
    exec_stage = dict(m.exec_stage)
    for mv in moves:
        if exec_stage.get(mv.layer) != mv.src:
            raise ValueError(f"layer {mv.layer} is not on stage {mv.src}")
        exec_stage[mv.layer] = mv.dst
    exec_slot = dict(m.exec_slot)
    exec_slot.update(reassigned)
    out = dataclasses.replace(m, exec_stage=exec_stage, exec_slot=exec_slot, alive=alive)
    for s in out.exec_slot:
        if (out.exec_slot[s], 1) not in alive and not any(pos[0] == out.exec_slot[s] for pos in alive):
            raise ValueError(f"sample {s} assigned to slot {out.exec_slot[s]} with no live device")
        for layer in out.exec_stage:
            out.resolve(s, layer)
    return out
