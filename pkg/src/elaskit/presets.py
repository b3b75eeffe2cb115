"""Llama-2-like workload presets and the shipped cost calibration.

A logical device is one TP group; its memory and link bandwidth are the sums
over the group's NPUs.  Compute is ``k * l * (m + C0)`` seconds per
micro-batch for ``l`` layers and ``m`` samples, a third of it forward.  ``k``
is solved so a fault-free 1F1B step reproduces the measured throughput.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict

from .cost import AnalyticCompute, CostProfile, MemModel

NPU_MEM_BYTES = 32 * 2**30
NPU_LINK_BW = 25e9          # 200 Gbps RoCE per NPU
NPUS_PER_NODE = 8
SEQ_LEN = 4096
FWD_SHARE = 1.0 / 3.0
# per-layer fixed work in sample-equivalents; makes compute sublinear in mbs
C0 = 0.3
ACT_BYTES_PER_TOKEN_HIDDEN = 34   # activations kept per token per hidden unit


@dataclass(frozen=True)
class Preset:
    name: str
    num_layers: int
    hidden: int
    params_billion: float
    tp: int
    pp: int
    dp: int
    mbs: int
    global_batch: int
    measured_samples_per_s: float   # fault-free, no snapshot

    @property
    def num_microbatches(self) -> int:
        return self.global_batch // (self.dp * self.mbs)

    @property
    def devices_per_node(self) -> int:
        return NPUS_PER_NODE // self.tp

    @property
    def params_per_layer(self) -> float:
        return self.params_billion * 1e9 / self.num_layers

    def scaled(self, factor: float) -> "Preset":
        """Fewer micro-batches per step, same topology and micro-batch size."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        m = max(1, round(self.num_microbatches * factor))
        return replace(self, global_batch=m * self.dp * self.mbs)

    def mem_model(self) -> MemModel:
        n = self.params_per_layer
        return MemModel(
            bytes_param_per_layer=2 * n,
            bytes_grad_per_layer=2 * n,
            bytes_optstate_per_layer=12 * n,
            bytes_act_per_layer_per_sample=SEQ_LEN * self.hidden * ACT_BYTES_PER_TOKEN_HIDDEN,
            fixed_overhead=8 * 2**30,
        )

    @property
    def device_mem_bytes(self) -> float:
        return self.tp * NPU_MEM_BYTES

    @property
    def link_bw(self) -> float:
        return self.tp * NPU_LINK_BW

    def compute_k(self) -> float:
        """Seconds per layer per sample-equivalent, from the fault-free step."""
        full = PRESETS[self.name]
        step = full.global_batch / full.measured_samples_per_s
        per_stage_layers = math.ceil(full.num_layers / full.pp)  # bottleneck stage
        slots = full.num_microbatches + full.pp - 1
        p2p = 2 * self.p2p_bytes_per_sample * full.mbs / self.link_bw
        return (step / slots - p2p) / (per_stage_layers * (full.mbs + C0))

    @property
    def p2p_bytes_per_sample(self) -> float:
        return 2.0 * SEQ_LEN * self.hidden

    def profile(self) -> CostProfile:
        k = self.compute_k()
        fwd = AnalyticCompute(a=k * FWD_SHARE, c=k * C0 * FWD_SHARE)
        bwd = AnalyticCompute(a=k * (1 - FWD_SHARE), c=k * C0 * (1 - FWD_SHARE))
        return CostProfile(fwd, bwd, p2p_bytes_per_sample=self.p2p_bytes_per_sample,
                           base_bw=self.link_bw)


PRESETS: Dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("llama2-7b", 32, 4096, 6.74, 4, 3, 8, 4, 8192, 51.941),
        Preset("llama2-13b", 40, 5120, 13.0, 4, 6, 4, 2, 2048, 32.805),
        Preset("llama2-34b", 48, 8192, 33.7, 4, 8, 3, 1, 768, 8.545),
    )
}


def get_preset(name: str, scale_factor: float = 1.0) -> Preset:
    key = name.lower()
    if key not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[key]
    return p if math.isclose(scale_factor, 1.0) else p.scaled(scale_factor)
