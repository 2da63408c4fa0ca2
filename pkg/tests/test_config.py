import json

import pytest
from hypothesis import given, settings, strategies as st

from trainbench.config import PRESETS, ConfigError, build_config, config_hash, dumps, load_config
from trainbench.train import TrainConfig


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_presets_validate_and_roundtrip(preset):
    cfg = build_config(preset=preset)
    again = json.loads(dumps(cfg))
    assert again == cfg
    assert build_config(again, preset) == cfg
    TrainConfig.from_dict(cfg["base_config"])


def test_table1_preset_matches_final_settings():
    base = TrainConfig.from_dict(build_config(preset="table1")["base_config"])
    assert base.learning_rate == 2e-5 and base.batch_size == 16 and base.patience == 100
    assert base.optimizer.kind == "adam" and base.schedule.kind == "constant"
    assert base.head == "softmax_cross_entropy"


@pytest.mark.parametrize("bad", [
    {"colour": "red"},
    {"base_config": {"dropout": 0.5}},
    {"dataset": {"synthetic": {"per_class": 10, "blur": 1}}},
    {"alpha": 1.5},
    {"k": 1},
    {"sample_size": {"n_min": 10, "n_max": 5}},
    {"augmentation": {"cutout": [{"size": 4}]}},
])
def test_unknown_keys_and_bad_values_rejected(bad):
    with pytest.raises(ConfigError):
        build_config(bad)


def test_unknown_preset_and_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown preset"):
        build_config(preset="huge")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_config_hash_ignores_output_and_parallelism():
    a = build_config()
    b = build_config({"output_dir": "/elsewhere", "parallelism": 4})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(build_config({"master_seed": 1}))
    assert len(config_hash(a)) == 16


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.2), st.integers(2, 10), st.sampled_from(sorted(PRESETS)))
def test_roundtrip_property(seed, alpha, k, preset):
    cfg = build_config({"master_seed": seed, "alpha": alpha, "k": k}, preset)
    text = dumps(cfg)
    assert json.loads(text) == cfg
    assert dumps(json.loads(text)) == text
    assert config_hash(json.loads(text)) == config_hash(cfg)
