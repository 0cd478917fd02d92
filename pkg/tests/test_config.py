from __future__ import annotations

import dataclasses
from importlib import resources

import numpy as np
import pytest

from disagg_moe.config import (A100, H100, SCALED_DS_1, SCALED_DS_2, AttnCalibration, ClusterLayout,
                               Config, ConfigError, HardwareSpec, ModelSpec, ScalingSpec, SloSpec,
                               WorkloadSpec, config_from_dict, config_to_dict, default_config,
                               dumps_config, load_config, rng_for, save_config)


def test_h100_profile_valid():
    hw = HardwareSpec(peak_flops=989e12, hbm_bandwidth=3.35e12)
    assert hw == H100
    assert hw.ridge_point == pytest.approx(295.2238806)


def test_scaled_ds1_valid():
    m = ModelSpec(num_layers=60, num_experts_per_layer=160, top_k=8, expert_dim=1024)
    assert m == SCALED_DS_1
    assert m.num_experts == 160 and m.top_k == 8


def test_scaled_ds2_shape():
    assert (SCALED_DS_2.num_experts, SCALED_DS_2.top_k, SCALED_DS_2.expert_dim) == (200, 8, 1536)


def test_too_few_slots_rejected():
    with pytest.raises(ConfigError) as exc:
        ClusterLayout(1, 1, 1, 2, 4, num_experts=10)
    assert exc.value.key == "cluster.slots_per_instance"


def test_layout_checked_against_model(cfg):
    with pytest.raises(ConfigError, match="slots"):
        cfg.with_layout(ClusterLayout(1, 1, 1, 1, 28))


@pytest.mark.parametrize("kwargs,key", [
    ({"top_k": 0}, "model.top_k"),
    ({"top_k": 9, "num_experts_per_layer": 8}, "model.top_k"),
    ({"bytes_per_param": 3}, "model.bytes_per_param"),
    ({"hidden_dim": 0}, "model.hidden_dim"),
])
def test_model_invariants(kwargs, key):
    base = dict(num_layers=2, num_experts_per_layer=8, top_k=2)
    with pytest.raises(ConfigError) as exc:
        ModelSpec(**{**base, **kwargs})
    assert exc.value.key == key


def test_hardware_positive():
    with pytest.raises(ConfigError) as exc:
        HardwareSpec(peak_flops=0, hbm_bandwidth=1)
    assert exc.value.key == "hardware.peak_flops"


def test_slow_intra_node_link_warns_only():
    with pytest.warns(UserWarning):
        HardwareSpec(1e12, 1e12, intra_node_bw=1e9, inter_node_bw=2e9)


def test_slo_and_workload_invariants():
    with pytest.raises(ConfigError):
        SloSpec(tpot_target=0)
    with pytest.raises(ConfigError):
        WorkloadSpec(pattern="gaussian", sigma=0)
    with pytest.raises(ConfigError):
        WorkloadSpec(max_admission_delay=-1)
    with pytest.raises(ConfigError):
        ScalingSpec(sched="greedy")


def test_round_trip(tmp_path):
    cfg = default_config(seed=123, slo=SloSpec(0.15, 0.95),
                         workload=WorkloadSpec(pattern="uniform", latency_cache=True),
                         hardware=dataclasses.replace(A100, calibration=AttnCalibration(attn_compute_slope=1e-6)))
    path = tmp_path / "c.toml"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert config_to_dict(back) == config_to_dict(cfg)


def test_packaged_default_matches_code():
    text = resources.files("disagg_moe").joinpath("data/default.toml").read_text()
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#")).strip()
    assert body == dumps_config(default_config()).strip()


def test_unknown_key_names_key():
    raw = config_to_dict(default_config())
    raw["model"]["num_heads"] = 4
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == "model.num_heads"


def test_unknown_section():
    raw = config_to_dict(default_config())
    raw["extra"] = {}
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == "extra"


def test_missing_required_section():
    raw = config_to_dict(default_config())
    del raw["hardware"]
    with pytest.raises(ConfigError, match="hardware"):
        config_from_dict(raw)


def test_optional_keys_defaulted(tmp_path):
    path = tmp_path / "min.toml"
    path.write_text(
        "[model]\nnum_layers = 4\nnum_experts_per_layer = 16\ntop_k = 2\n"
        "[hardware]\npeak_flops = 1e15\nhbm_bandwidth = 3e12\n"
        "[cluster]\nattn_nodes = 1\nattn_instances_per_node = 2\nmoe_nodes = 1\n"
        "moe_instances_per_node = 2\nslots_per_instance = 8\n"
    )
    cfg = load_config(path)
    assert cfg.model.hidden_dim == 5120
    assert cfg.slo == SloSpec()
    assert cfg.seed == 0


def test_parse_error(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[model\n")
    with pytest.raises(ConfigError, match="parse error"):
        load_config(path)


def test_invalid_value_in_file_names_key(tmp_path):
    raw = dumps_config(default_config()).replace("top_k = 8", "top_k = 0")
    path = tmp_path / "c.toml"
    path.write_text(raw)
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.key == "model.top_k"


def test_configs_are_immutable(cfg):
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.model.top_k = 2


def test_from_counts_packing():
    lay = ClusterLayout.from_counts(12, 6, 28)
    assert (lay.attn_nodes, lay.attn_instances_per_node, lay.moe_nodes, lay.moe_instances_per_node) == (2, 6, 1, 6)
    assert lay.label == "12A6E" and lay.num_gpus == 18
    with pytest.raises(ConfigError):
        ClusterLayout.from_counts(9, 8, 28)  # 9 over 2 nodes


def test_rng_streams_depend_only_on_labels():
    a = rng_for(7, "x", 3).random(4)
    rng_for(7, "y").random(100)
    b = rng_for(7, "x", 3).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rng_for(7, "x", 4).random(4))
    assert not np.array_equal(a, rng_for(8, "x", 3).random(4))


def test_seed_range():
    with pytest.raises(ConfigError):
        Config(SCALED_DS_1, H100, ClusterLayout(1, 8, 1, 8, 28), seed=-1)
