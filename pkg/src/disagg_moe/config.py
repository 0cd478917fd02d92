"""Shared domain types, the TOML config schema and seeded RNG streams.

Every experiment is driven by one TOML file with the sections ``[model]``,
``[hardware]`` (plus ``[hardware.calibration]``), ``[cluster]``, ``[slo]``,
``[workload]`` and ``[scaling]`` and a single top-level ``seed``.  Keys are
the dataclass field names below; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli
import tomli_w


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    num_experts_per_layer: int
    top_k: int
    hidden_dim: int = 5120
    expert_dim: int = 1024
    bytes_per_param: int = 2
    kv_bytes_per_token: int = 1152

    def __post_init__(self):
        for name in ("num_layers", "num_experts_per_layer", "top_k", "hidden_dim",
                     "expert_dim", "kv_bytes_per_token"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}", "must be >= 1")
        if self.top_k > self.num_experts_per_layer:
            raise ConfigError("model.top_k", "must not exceed num_experts_per_layer")
        if self.bytes_per_param not in (1, 2, 4):
            raise ConfigError("model.bytes_per_param", "must be one of 1, 2, 4")

    @property
    def num_experts(self) -> int:
        return self.num_experts_per_layer

    @property
    def expert_weight_bytes(self) -> int:
        """Bytes streamed from HBM to run one expert (two d_h x d_e GEMMs)."""
        return 2 * self.hidden_dim * self.expert_dim * self.bytes_per_param

    @property
    def token_bytes(self) -> int:
        """Size of one token's activation vector on the wire."""
        return self.hidden_dim * self.bytes_per_param


@dataclass(frozen=True)
class AttnCalibration:
    """Constants of the piecewise attention model and the MoE launch floor.

    On the H100 profile at seq_len 512 the defaults give
    latency(b=128)/latency(b=4) ~= 1.31 and latency(b=512)/latency(b=128)
    ~= 26.7: flat up to the saturation batch, steep past it.  Longer
    contexts let the KV read dominate and flatten the second ratio.
    """

    kernel_launch_overhead: float = 20e-6
    attn_fixed_latency: float = 40e-6
    attn_weight_bytes: float = 100e6
    attn_batch_saturation: int = 128
    attn_compute_slope: float = 6e-6

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0 or (f.name in ("kernel_launch_overhead", "attn_batch_saturation") and v <= 0):
                raise ConfigError(f"hardware.calibration.{f.name}", "must be positive")


@dataclass(frozen=True)
class HardwareSpec:
    peak_flops: float
    hbm_bandwidth: float
    intra_node_bw: float = 900e9
    inter_node_bw: float = 50e9
    msg_fixed_latency: float = 20e-6
    calibration: AttnCalibration = field(default_factory=AttnCalibration)

    def __post_init__(self):
        for name in ("peak_flops", "hbm_bandwidth", "intra_node_bw", "inter_node_bw",
                     "msg_fixed_latency"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"hardware.{name}", "must be strictly positive")
        if self.intra_node_bw < self.inter_node_bw:
            warnings.warn("hardware.intra_node_bw is below inter_node_bw", stacklevel=3)

    @property
    def kernel_launch_overhead(self) -> float:
        return self.calibration.kernel_launch_overhead

    @property
    def ridge_point(self) -> float:
        return self.peak_flops / self.hbm_bandwidth


@dataclass(frozen=True)
class ClusterLayout:
    attn_nodes: int
    attn_instances_per_node: int
    moe_nodes: int
    moe_instances_per_node: int
    slots_per_instance: int
    num_experts: int | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for f in fields(self)[:5]:
            if getattr(self, f.name) < 1:
                raise ConfigError(f"cluster.{f.name}", "must be >= 1")
        if self.num_experts is not None and self.total_slots < self.num_experts:
            raise ConfigError(
                "cluster.slots_per_instance",
                f"N*C = {self.total_slots} slots cannot hold {self.num_experts} experts",
            )

    @property
    def num_attn(self) -> int:
        return self.attn_nodes * self.attn_instances_per_node

    @property
    def num_moe(self) -> int:
        return self.moe_nodes * self.moe_instances_per_node

    @property
    def total_slots(self) -> int:
        return self.num_moe * self.slots_per_instance

    @property
    def num_gpus(self) -> int:
        return self.num_attn + self.num_moe

    @property
    def label(self) -> str:
        return f"{self.num_attn}A{self.num_moe}E"

    def validate_for(self, model: ModelSpec) -> "ClusterLayout":
        return dataclasses.replace(self, num_experts=model.num_experts)

    @classmethod
    def from_counts(cls, num_attn: int, num_moe: int, slots_per_instance: int,
                    gpus_per_node: int = 8, num_experts: int | None = None) -> "ClusterLayout":
        """Pack instance counts onto the fewest nodes of ``gpus_per_node``.

        Counts that cannot be spread evenly over that many nodes raise
        ``ConfigError``; callers enumerating layouts skip those.
        """
        def pack(count, side):
            if count < 1:
                raise ConfigError(f"cluster.{side}", "instance count must be >= 1")
            nodes = math.ceil(count / gpus_per_node)
            if count % nodes:
                raise ConfigError(f"cluster.{side}", f"{count} instances do not divide over {nodes} nodes")
            return nodes, count // nodes

        an, ap = pack(num_attn, "attn_instances_per_node")
        mn, mp = pack(num_moe, "moe_instances_per_node")
        return cls(an, ap, mn, mp, slots_per_instance, num_experts)


@dataclass(frozen=True)
class SloSpec:
    tpot_target: float = 0.2
    attainment_target: float = 0.99

    def __post_init__(self):
        if not self.tpot_target > 0:
            raise ConfigError("slo.tpot_target", "must be > 0")
        if not 0.0 <= self.attainment_target <= 1.0:
            raise ConfigError("slo.attainment_target", "must lie in [0, 1]")


@dataclass(frozen=True)
class WorkloadSpec:
    pattern: str = "gaussian"
    sigma: float = 0.5
    cover_all: bool = False
    mean_input_len: int = 16
    mean_output_len: int = 256
    # diurnal generator
    days: int = 2
    base_rate: float = 1.0
    peak_ratio: float = 4.0
    # simulation fidelity
    layer_samples: int = 4
    latency_cache: bool = False
    # arrivals may wait this long for admission so several decode steps
    # can be simulated as one; 0 admits every step
    max_admission_delay: float = 0.0

    def __post_init__(self):
        if self.pattern not in ("uniform", "gaussian"):
            raise ConfigError("workload.pattern", "must be 'uniform' or 'gaussian'")
        if self.pattern == "gaussian" and not self.sigma > 0:
            raise ConfigError("workload.sigma", "must be > 0 for the gaussian pattern")
        for name in ("mean_input_len", "mean_output_len", "days", "layer_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"workload.{name}", "must be >= 1")
        if not (self.base_rate > 0 and self.peak_ratio >= 1):
            raise ConfigError("workload.base_rate", "rates must be positive and peak_ratio >= 1")
        if self.max_admission_delay < 0:
            raise ConfigError("workload.max_admission_delay", "must be >= 0")


@dataclass(frozen=True)
class ScalingSpec:
    policy: str = "static"
    comm: str = "two-phase"
    sched: str = "aebs"
    place: str = "activation-aware"
    case1_threshold: int = 2
    interval: float = 1800.0
    search_radius: int = 4
    util_threshold: float = 0.5
    headroom: float = 0.9
    gpus_per_node: int = 8
    stats_window: int = 256
    per_layer_maps: bool = False
    monolithic_tiers: tuple = ((8, 8), (16, 16), (32, 32))

    def __post_init__(self):
        choices = {
            "policy": ("static", "autoscale", "monolithic"),
            "comm": ("strawman", "two-phase"),
            "sched": ("random", "aebs"),
            "place": ("roundrobin", "activation-aware"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"scaling.{key}", f"must be one of {allowed}")
        if self.interval <= 0 or self.search_radius < 1 or self.stats_window < 1:
            raise ConfigError("scaling.interval", "interval, search_radius, stats_window must be positive")
        if not 0 < self.headroom <= 1:
            raise ConfigError("scaling.headroom", "must lie in (0, 1]")
        tiers = tuple(tuple(int(x) for x in t) for t in self.monolithic_tiers)
        if not tiers or any(len(t) != 2 or min(t) < 1 for t in tiers):
            raise ConfigError("scaling.monolithic_tiers", "expected a list of [attn, moe] pairs")
        object.__setattr__(self, "monolithic_tiers", tiers)


@dataclass(frozen=True)
class Config:
    model: ModelSpec
    hardware: HardwareSpec
    cluster: ClusterLayout
    slo: SloSpec = SloSpec()
    workload: WorkloadSpec = WorkloadSpec()
    scaling: ScalingSpec = ScalingSpec()
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        object.__setattr__(self, "cluster", self.cluster.validate_for(self.model))

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)

    def with_layout(self, layout: ClusterLayout) -> "Config":
        return dataclasses.replace(self, cluster=layout)


_SECTIONS = {
    "model": ModelSpec,
    "hardware": HardwareSpec,
    "cluster": ClusterLayout,
    "slo": SloSpec,
    "workload": WorkloadSpec,
    "scaling": ScalingSpec,
}


def _build(cls, section: str, raw: Mapping[str, Any]):
    if not isinstance(raw, Mapping):
        raise ConfigError(section, "expected a table")
    known = {f.name: f for f in fields(cls) if f.name != "num_experts"}
    kwargs = {}
    for key, value in raw.items():
        if key == "calibration" and cls is HardwareSpec:
            continue
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
        kwargs[key] = value
    if cls is HardwareSpec and "calibration" in raw:
        kwargs["calibration"] = _build(AttnCalibration, "hardware.calibration", raw["calibration"])
    missing = [name for name, f in known.items()
               if name not in kwargs
               and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{section}.{missing[0]}", "required key missing")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from exc


def config_from_dict(raw: Mapping[str, Any]) -> Config:
    for key in raw:
        if key not in _SECTIONS and key != "seed":
            raise ConfigError(key, "unknown section")
    parts = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            parts[name] = _build(cls, name, raw[name])
        elif name in ("model", "hardware", "cluster"):
            raise ConfigError(name, "required section missing")
    return Config(**parts, seed=int(raw.get("seed", 0)))


def load_config(path: str | Path) -> Config:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"parse error: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: Config) -> dict:
    out: dict[str, Any] = {"seed": cfg.seed}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        section.pop("num_experts", None)
        if name == "scaling":
            section["monolithic_tiers"] = [list(t) for t in section["monolithic_tiers"]]
        out[name] = section
    return out


def dumps_config(cfg: Config) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))


# ---------------------------------------------------------------------------
# seeding

def _label_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``labels`` derived from the global seed.

    The stream depends only on ``(seed, labels)``, never on call order.
    """
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    words += [_label_word(x) for x in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


# ---------------------------------------------------------------------------
# hardware presets

H100 = HardwareSpec(peak_flops=989e12, hbm_bandwidth=3.35e12)
A100 = HardwareSpec(peak_flops=312e12, hbm_bandwidth=2.0e12, intra_node_bw=600e9, inter_node_bw=25e9)

SCALED_DS_1 = ModelSpec(num_layers=60, num_experts_per_layer=160, top_k=8, expert_dim=1024)
SCALED_DS_2 = ModelSpec(num_layers=60, num_experts_per_layer=200, top_k=8, expert_dim=1536)


def default_config(**overrides) -> Config:
    """Scaled-DS-1 on H100 nodes, 8 attention + 8 MoE instances."""
    cfg = Config(
        model=SCALED_DS_1,
        hardware=H100,
        cluster=ClusterLayout(1, 8, 1, 8, 28),
        seed=20251015,
    )
    return cfg.replace(**overrides) if overrides else cfg
