"""Toy-model check that elastic recovery leaves the optimization trajectory unchanged.

The model has ``pp`` stages of ``layers_per_stage`` layers.  Each layer holds
a small vector of exact rationals.  A sample's gradient for a layer is a
deterministic function of the sample and the current weights, multiplied by
a dropout-style mask whose randomness comes from the layer's RNG stream.
Everything is a :class:`~fractions.Fraction`, so equality is bit-exact
regardless of summation order.

An elastic run loses one DP slot at ``event_step`` and moves one layer to
the neighbouring stage with non-blocking migration.  Its RNG transcript and
final parameters must equal those of the static run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .dataflow import MicrobatchAssignment, reshard_microbatches, weighted_grad_average
from .migration import LayerPayload, MigrationMode, gradient_coverage, plan_layer_migration
from .partition import LayerMove
from .rng import StreamStateMap, advance_stream_map, draw, init_stream_map, reshard_rng

DROP_P = Fraction(1, 4)
MUTATIONS = ("naive_rng", "wrong_weights", "double_count")


@dataclass(frozen=True)
class ToyConfig:
    dp: int = 8
    pp: int = 4
    layers_per_stage: int = 2
    mbs: int = 2
    num_microbatches: int = 3
    dim: int = 2
    steps: int = 4
    event_step: int = 2
    seed: int = 1234
    failed_slot: int = 7
    move: LayerMove = LayerMove(2, 2, 1)   # first layer of stage 2 joins stage 1
    lr: Fraction = Fraction(1, 8)

    @property
    def num_layers(self) -> int:
        return self.pp * self.layers_per_stage


@dataclass
class ToyResult:
    params: List[Tuple[Fraction, ...]]
    transcript: Dict[Tuple[int, int, int], Tuple[float, ...]]
    coverage_ok: bool = True
    notes: List[str] = field(default_factory=list)


def _input(sample: int, dim: int) -> Tuple[Fraction, ...]:
    return tuple(Fraction((sample * 37 + 11 * i) % 13 - 6, 7) for i in range(dim))


def _sample_grad(w: Tuple[Fraction, ...], x: Tuple[Fraction, ...], u: List[float]) -> List[Fraction]:
    keep = 1 / (1 - DROP_P)
    return [(xi - wi) * (keep if ui >= DROP_P else 0) for wi, xi, ui in zip(w, x, u)]


def _initial_params(cfg: ToyConfig) -> List[Tuple[Fraction, ...]]:
    return [tuple(Fraction(l - i, 3) for i in range(cfg.dim)) for l in range(cfg.num_layers)]


def _owners(a: MicrobatchAssignment, step: int) -> Dict[int, int]:
    out = {}
    for m in range(a.num_microbatches):
        for slot, ids in a.sample_ranges(m, step).items():
            out.update({s: slot for s in ids})
    return out


def run_toy(cfg: ToyConfig = ToyConfig(), elastic: bool = False, mutation: Optional[str] = None) -> ToyResult:
    """Train the toy model for ``cfg.steps`` steps and record every draw.

    ``mutation`` injects a known bug so tests can show the check has teeth:
    ``naive_rng`` draws from the executing device's stream, ``wrong_weights``
    averages slot gradients with equal weights, ``double_count`` lets both
    sides of a migrating layer contribute the same micro-batch.
    """
    if mutation is not None and mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutation!r}")
    static = MicrobatchAssignment.uniform(cfg.dp, cfg.mbs, cfg.num_microbatches, rotate=True)
    layer_stage = {l: l // cfg.layers_per_stage + 1 for l in range(cfg.num_layers)}
    positions = [(s, p) for s in range(cfg.dp) for p in range(1, cfg.pp + 1)]
    origin0 = _owners(static, 0)
    rmap: StreamStateMap = init_stream_map(cfg.seed, 0, origin0, layer_stage, positions)
    params = _initial_params(cfg)
    out = ToyResult(params, {})
    assign = static

    for step in range(cfg.steps):
        origin = _owners(static, step)
        shadow_span: range = range(0)
        if elastic and step == cfg.event_step:
            survivors = [s for s in static.slots if s != cfg.failed_slot]
            assign = reshard_microbatches(static, survivors)
            dead = [(cfg.failed_slot, p) for p in range(1, cfg.pp + 1)]
            rmap = advance_stream_map(rmap, step, origin, origin)
            rmap = reshard_rng(rmap, [cfg.move], _owners(assign, step), dead)
            sched = plan_layer_migration(cfg.move, MigrationMode.NON_BLOCKING, LayerPayload(1.5, 1.0), 1.0,
                                         1.0, cfg.num_microbatches)
            shadow_span = sched.shadow_span
            out.coverage_ok &= gradient_coverage(sched, cfg.num_microbatches)
        else:
            rmap = advance_stream_map(rmap, step, origin, _owners(assign, step))

        # per slot, per layer: ascending sample order within the slot
        sums: Dict[int, List[List[Fraction]]] = {s: [[Fraction(0)] * cfg.dim for _ in params]
                                                 for s in assign.slots}
        counts = {s: 0 for s in assign.slots}
        for m in range(cfg.num_microbatches):
            for slot, ids in assign.sample_ranges(m, step).items():
                counts[slot] += len(ids)
                for sample in ids:
                    x = _input(sample, cfg.dim)
                    for layer in range(cfg.num_layers):
                        desc = rmap.resolve_naive(sample, layer) if mutation == "naive_rng" \
                            else rmap.resolve(sample, layer)
                        u = draw(desc.key(sample, layer), cfg.dim)
                        out.transcript[(step, sample, layer)] = tuple(u)
                        g = _sample_grad(params[layer], x, u)
                        reps = 1
                        if layer == cfg.move.layer and m in shadow_span and mutation == "double_count":
                            reps = 2
                        acc = sums[slot][layer]
                        for _ in range(reps):
                            acc[:] = [a + b for a, b in zip(acc, g)]

        G = sum(counts.values())
        live = [s for s in assign.slots if counts[s]]
        if mutation == "wrong_weights":
            weights = {s: Fraction(1, len(live)) for s in live}
        else:
            weights = {s: Fraction(counts[s], G) for s in live}
        new = []
        for layer, w in enumerate(params):
            contribs = [(weights[s], [v / counts[s] for v in sums[s][layer]]) for s in live]
            grad = weighted_grad_average(contribs)
            new.append(tuple(wi - cfg.lr * gi for wi, gi in zip(w, grad)))
        params = new

    out.params = params
    return out


def check_consistency(cfg: ToyConfig = ToyConfig(), mutation: Optional[str] = None) -> Dict[str, bool]:
    """Pass/fail per invariant for the elastic run against the static one."""
    ref = run_toy(cfg)
    got = run_toy(cfg, elastic=True, mutation=mutation)
    return {
        "rng_transcript_equal": got.transcript == ref.transcript,
        "final_params_equal": got.params == ref.params,
        "gradient_coverage": got.coverage_ok,
    }
