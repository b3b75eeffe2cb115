"""Per-stage mini-step time and memory footprint.

A mini-step is forward + backward of one micro-batch on one stage.  Compute
comes either from an analytic form or from a profiled ``(layers, mbs)`` table
with bilinear interpolation.  P2P times derive from bytes per sample and a
width-dependent link bandwidth.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from .errors import ConfigError, ProfileOutOfRange


@dataclass(frozen=True)
class AnalyticCompute:
    """``t = a*l*m + b*m + c*l + d`` seconds (l layers, m samples)."""

    a: float
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0

    def __call__(self, layers: float, mbs: float) -> float:
        return self.a * layers * mbs + self.b * mbs + self.c * layers + self.d


class TableCompute:
    """Bilinear interpolation over a full ``layers x mbs`` grid of seconds."""

    def __init__(self, points: Dict[Tuple[int, int], float]):
        self.layers = sorted({l for l, _ in points})
        self.mbs = sorted({m for _, m in points})
        missing = [(l, m) for l in self.layers for m in self.mbs if (l, m) not in points]
        if missing:
            raise ConfigError(f"profile table is not a full grid, missing {missing[:3]}")
        self.points = dict(points)
        for l in self.layers:
            row = [self.points[(l, m)] for m in self.mbs]
            if any(x >= y for x, y in zip(row, row[1:])):
                raise ConfigError(f"profile not strictly increasing in mbs at layers={l}")
        for m in self.mbs:
            col = [self.points[(l, m)] for l in self.layers]
            if any(x >= y for x, y in zip(col, col[1:])):
                raise ConfigError(f"profile not strictly increasing in layers at mbs={m}")

    @staticmethod
    def _bracket(axis, x):
        if x < axis[0] or x > axis[-1]:
            raise ProfileOutOfRange(f"{x} outside profiled range [{axis[0]}, {axis[-1]}]")
        hi = bisect.bisect_left(axis, x)
        if axis[hi] == x:
            return hi, hi, 0.0
        lo = hi - 1
        return lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo])

    def __call__(self, layers: float, mbs: float) -> float:
        i0, i1, u = self._bracket(self.layers, layers)
        j0, j1, v = self._bracket(self.mbs, mbs)
        L, M, p = self.layers, self.mbs, self.points
        top = p[(L[i0], M[j0])] * (1 - v) + p[(L[i0], M[j1])] * v
        bot = p[(L[i1], M[j0])] * (1 - v) + p[(L[i1], M[j1])] * v
        return top * (1 - u) + bot * u


Compute = Union[AnalyticCompute, TableCompute]


@dataclass(frozen=True)
class CostProfile:
    t_fwd: Compute
    t_bwd: Compute
    p2p_bytes_per_sample: float = 0.0
    base_bw: float = 25e9
    sigma_f: float = 0.0
    sigma_b: float = 0.0
    # bw / max(1, |r_src - r_dst|): fan-in/fan-out contention between unequal DP widths
    width_contention: bool = True
    base_freq_mhz: float = 1400.0

    def __post_init__(self):
        if not (0.0 <= self.sigma_f <= 1.0 and 0.0 <= self.sigma_b <= 1.0):
            raise ValueError("overlap coefficients must lie in [0, 1]")
        if self.base_bw <= 0:
            raise ValueError("base_bw must be positive")

    def link_bw(self, r_src: int, r_dst: int) -> float:
        if not self.width_contention:
            return self.base_bw
        return self.base_bw / max(1, abs(r_src - r_dst))

    def p2p_time(self, mbs: float, r_src: int, r_dst: int) -> float:
        return self.p2p_bytes_per_sample * mbs / self.link_bw(r_src, r_dst)


@dataclass(frozen=True)
class MemModel:
    bytes_param_per_layer: float = 0.0
    bytes_grad_per_layer: float = 0.0
    bytes_optstate_per_layer: float = 0.0
    bytes_act_per_layer_per_sample: float = 0.0
    fixed_overhead: float = 0.0

    def __post_init__(self):
        for f in ("bytes_param_per_layer", "bytes_grad_per_layer", "bytes_optstate_per_layer",
                  "bytes_act_per_layer_per_sample", "fixed_overhead"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")


def stage_phase_times(
    profile: CostProfile,
    layers: float,
    mbs: float,
    r_prev: Optional[int],
    r_cur: int,
    r_next: Optional[int],
    freq_scale: float = 1.0,
    slow_factor: float = 1.0,
) -> Tuple[float, float]:
    """(forward, backward) durations of one micro-batch, P2P residual included.

    ``r_prev``/``r_next`` are ``None`` on the first/last stage, which drops
    the corresponding P2P term.
    """
    if layers < 1 or mbs < 1:
        raise ValueError(f"need layers >= 1 and mbs >= 1, got {layers}, {mbs}")
    if freq_scale <= 0:
        raise ValueError("freq_scale must be positive")
    if slow_factor < 1:
        raise ValueError("slow_factor must be >= 1")
    scale = slow_factor / freq_scale
    cf = profile.t_fwd(layers, mbs) * scale
    cb = profile.t_bwd(layers, mbs) * scale
    fwd, bwd = cf, cb
    if r_next is not None:
        fwd += max(0.0, profile.p2p_time(mbs, r_cur, r_next) - profile.sigma_f * cf)
    if r_prev is not None:
        bwd += max(0.0, profile.p2p_time(mbs, r_prev, r_cur) - profile.sigma_b * cb)
    return fwd, bwd


def mini_step_time(
    profile: CostProfile,
    layers: float,
    mbs: float,
    r_prev: Optional[int],
    r_cur: int,
    r_next: Optional[int],
    freq_scale: float = 1.0,
    slow_factor: float = 1.0,
) -> float:
    f, b = stage_phase_times(profile, layers, mbs, r_prev, r_cur, r_next, freq_scale, slow_factor)
    return f + b


def in_flight(stage: int, num_stages: int) -> int:
    """Activations a 1F1B stage holds at steady state (warm-up depth)."""
    return num_stages - stage + 1


def mem_footprint(mem: MemModel, layers: float, mbs: float, stage: int, num_stages: int,
                  zero_degree: int = 1) -> float:
    if not 1 <= stage <= num_stages:
        raise ValueError(f"stage {stage} outside 1..{num_stages}")
    if zero_degree < 1:
        raise ValueError("zero_degree must be >= 1")
    static = layers * (mem.bytes_param_per_layer + mem.bytes_grad_per_layer
                       + mem.bytes_optstate_per_layer / zero_degree)
    acts = in_flight(stage, num_stages) * layers * mbs * mem.bytes_act_per_layer_per_sample
    return mem.fixed_overhead + static + acts


def _compute_from_json(obj, key: str) -> Compute:
    if "analytic" in obj:
        form = obj["analytic"][key]
        return AnalyticCompute(**form)
    if "table" in obj:
        pts = {}
        for i, row in enumerate(obj["table"]):
            try:
                pts[(int(row["layers"]), int(row["mbs"]))] = float(row[f"{key}_ms"]) / 1e3
            except KeyError as exc:
                raise ConfigError(f"profile table entry {i} missing {exc}") from None
        return TableCompute(pts)
    raise ConfigError("profile needs either an 'analytic' or a 'table' section")


def profile_from_dict(obj) -> Tuple[CostProfile, MemModel]:
    profile = CostProfile(
        t_fwd=_compute_from_json(obj, "t_fwd"),
        t_bwd=_compute_from_json(obj, "t_bwd"),
        p2p_bytes_per_sample=float(obj.get("p2p_bytes_per_sample", 0.0)),
        base_bw=float(obj.get("base_bw", 25e9)),
        sigma_f=float(obj.get("sigma_f", 0.0)),
        sigma_b=float(obj.get("sigma_b", 0.0)),
        width_contention=bool(obj.get("width_contention", True)),
        base_freq_mhz=float(obj.get("base_freq_mhz", 1400.0)),
    )
    mem = MemModel(**obj.get("memory", {}))
    return profile, mem


def load_profile(path: Union[str, Path]) -> Tuple[CostProfile, MemModel]:
    """Read a profile JSON file.

    Layout::

        {"table": [{"layers": 1, "mbs": 1, "t_fwd_ms": 2.0, "t_bwd_ms": 4.0}, ...],
         "sigma_f": 0.3, "sigma_b": 0.3, "base_bw": 2.5e10,
         "p2p_bytes_per_sample": 3.3e7,
         "memory": {"bytes_param_per_layer": ..., ...}}

    ``"analytic": {"t_fwd": {"a": ...}, "t_bwd": {...}}`` may replace ``table``.
    """
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc.msg}", exc.lineno) from None
    return profile_from_dict(obj)
