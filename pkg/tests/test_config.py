"""Run configuration defaults, canonical serialization, and validation."""

from __future__ import annotations

import json

import pytest

from feddcg.config import RunConfig, parse_config, save_config, serialize_config
from feddcg.errors import ConfigError


def test_golden_defaults():
    # pinned training recipe; a drift here is a behavior change, not a tweak
    config = RunConfig()
    assert config.rounds == 250
    assert config.clients_per_domain == 6
    assert config.classes_per_client == 20
    assert config.batch_size == 128
    assert config.base_lr == 1e-3
    assert config.min_lr == 0.0
    assert config.tau == 0.07
    assert config.tau_w == 0.07
    assert config.mix == 0.5
    assert config.participation == 1.0
    assert config.sampling_rate == 1.0
    assert config.beta_a == 2.0 and config.beta_b == 2.0
    assert config.normalized_momentum is False
    assert config.l_p == 4 and config.l_g == 4 and config.l_d == 4
    assert config.d_h == 512
    assert config.heads == 4
    assert config.seed == 0
    assert config.stage_pattern == "AB"
    assert config.local_epochs == 1
    assert config.aggregator == "domain_guided"
    config.validate()


def test_effective_stub_seed_follows_seed():
    assert RunConfig(seed=5).effective_stub_seed == 5
    assert RunConfig(seed=5, stub_seed=9).effective_stub_seed == 9


def test_serialize_parse_round_trip():
    config = RunConfig(rounds=12, seed=3, train_store="s.fdcg", out_dir="run")
    text = serialize_config(config)
    again = parse_config(json.loads(text))
    assert again == config
    # canonical form: serializing the parse reproduces the text exactly
    assert serialize_config(again) == text
    assert text.endswith("\n")
    keys = list(json.loads(text))
    assert keys == sorted(keys)


def test_parse_config_partial_dict_fills_defaults():
    config = parse_config({"rounds": 7, "d_h": 16, "heads": 2})
    assert config.rounds == 7
    assert config.d_h == 16
    assert config.batch_size == RunConfig().batch_size


def test_parse_config_rejects_unknown_keys():
    with pytest.raises(ConfigError) as exc:
        parse_config({"rounds": 5, "learning_rate": 0.1})
    assert "learning_rate" in str(exc.value)


def test_parse_config_from_file(tmp_path):
    path = tmp_path / "config.json"
    save_config(RunConfig(rounds=9, seed=2), path)
    config = parse_config(path)
    assert config.rounds == 9 and config.seed == 2


def test_parse_config_rejects_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        parse_config(path)


@pytest.mark.parametrize(
    "overrides",
    [
        {"rounds": -1},
        {"batch_size": 0},
        {"base_lr": 0.0},
        {"min_lr": 2.0},
        {"tau": 0.0},
        {"tau_w": -0.1},
        {"mix": 1.5},
        {"participation": -0.1},
        {"sampling_rate": 1.5},
        {"beta_a": 0.0},
        {"d_h": 512, "heads": 3, "rounds": 1},
        {"stage_pattern": ""},
        {"stage_pattern": "AC"},
        {"aggregator": "vote"},
        {"fixed_global_weight": 1.5},
        {"checkpoint_every": 0},
    ],
)
def test_validation_rejects(overrides):
    with pytest.raises(ConfigError):
        RunConfig(**overrides).validate()


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        RunConfig(d_h=10, heads=4).validate()
    RunConfig(d_h=12, heads=4).validate()
