"""Roofline latency models for decode-phase MoE and attention layers.

An MoE instance streams the weights of every activated expert replica from
HBM once per layer step, so in the memory-bound regime its latency is linear
in the number of activated replicas and independent of how tokens are spread
over them.  Attention is modelled as flat up to a saturation batch and
linear beyond it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import HardwareSpec, ModelSpec


@dataclass(frozen=True)
class MoeStepLoad:
    activated: int
    routed_tokens: int

    def __post_init__(self):
        if self.activated < 0 or self.routed_tokens < 0:
            raise ValueError("loads must be non-negative")
        if self.activated > 0 and self.routed_tokens < self.activated:
            raise ValueError("each activated replica must receive at least one token")


@dataclass(frozen=True)
class AttnStepLoad:
    batch_size: int
    seq_len: float

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")


def arithmetic_intensity(b: float) -> float:
    """FLOPs per byte of one expert with ``b`` tokens: 2*b*d_h*d_e / (2*d_e*d_h) = b."""
    if b < 0:
        raise ValueError("batch size must be non-negative")
    return b


def min_compute_bound_batch(hw: HardwareSpec, model: ModelSpec) -> int:
    """Smallest layer batch B with B*k/n >= peak_flops/hbm_bandwidth.

    Evaluates the formula as printed.  For the H100 profile with n=256, k=8
    this gives 9448, about half of the 18k quoted alongside it; A100 gives
    4992 (the quoted 5k).
    """
    n, k = model.num_experts, model.top_k
    # exact rational ceil; float division misrounds at integer boundaries
    num = hw.peak_flops * n
    den = hw.hbm_bandwidth * k
    q = num / den
    r = round(q)
    return r if math.isclose(q, r, rel_tol=1e-12) else math.ceil(q)


def moe_memory_time(activated: int, model: ModelSpec, hw: HardwareSpec) -> float:
    return activated * model.expert_weight_bytes / hw.hbm_bandwidth


def moe_compute_time(routed_tokens: int, model: ModelSpec, hw: HardwareSpec) -> float:
    return 2.0 * routed_tokens * model.hidden_dim * model.expert_dim / hw.peak_flops


def moe_instance_latency(load: MoeStepLoad, model: ModelSpec, hw: HardwareSpec) -> float:
    mem = moe_memory_time(load.activated, model, hw)
    comp = moe_compute_time(load.routed_tokens, model, hw)
    return hw.kernel_launch_overhead + max(mem, comp)


def moe_layer_latency(loads: Sequence[MoeStepLoad], model: ModelSpec, hw: HardwareSpec) -> float:
    """Instances run in parallel; the slowest one gates the layer."""
    if not loads:
        return hw.kernel_launch_overhead
    return max(moe_instance_latency(ld, model, hw) for ld in loads)


def moe_crossover_tokens(activated: int, model: ModelSpec, hw: HardwareSpec) -> float:
    """Routed tokens at which compute time equals memory time for ``activated`` replicas."""
    return activated * hw.ridge_point * model.bytes_per_param


def attn_instance_latency(load: AttnStepLoad, model: ModelSpec, hw: HardwareSpec) -> float:
    cal = hw.calibration
    kv = load.batch_size * load.seq_len * model.kv_bytes_per_token / hw.hbm_bandwidth
    over = max(0, load.batch_size - cal.attn_batch_saturation) * cal.attn_compute_slope
    return cal.attn_fixed_latency + cal.attn_weight_bytes / hw.hbm_bandwidth + kv + over


def moe_layer_latency_arrays(activated, routed, model: ModelSpec, hw: HardwareSpec) -> float:
    """Vectorised ``moe_layer_latency`` over per-instance count arrays."""
    a = np.asarray(activated, dtype=np.float64)
    b = np.asarray(routed, dtype=np.float64)
    if not a.size:
        return hw.kernel_launch_overhead
    mem = a * (model.expert_weight_bytes / hw.hbm_bandwidth)
    comp = b * (2.0 * model.hidden_dim * model.expert_dim / hw.peak_flops)
    return hw.kernel_launch_overhead + float(np.maximum(mem, comp).max())
