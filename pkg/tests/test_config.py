import json

import pytest
from hypothesis import given, settings, strategies as st

from forler.config import (ConfigError, DatasetSpec, ExperimentConfig, FederationOptions, config_from_dict,
                           config_hash, config_to_dict, effective_config_json, load_config, pollution_config)
from forler.envs import ENV_IDS


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert config_from_dict(config_to_dict(cfg)) == cfg
    text = effective_config_json(cfg)
    assert effective_config_json(config_from_dict(json.loads(text))) == text


@settings(max_examples=40, deadline=None)
@given(algorithm=st.sampled_from(["forler", "fed_cql", "centralized_cql"]), env_id=st.sampled_from(ENV_IDS),
       rounds=st.integers(0, 50), steps=st.integers(0, 500), omega_s=st.floats(0, 10),
       hidden=st.lists(st.integers(1, 128), min_size=1, max_size=3),
       sizes=st.lists(st.integers(1, 50_000), min_size=1, max_size=6))
def test_partial_configs_fill_defaults_idempotently(algorithm, env_id, rounds, steps, omega_s, hidden, sizes):
    raw = {"algorithm": algorithm, "env_id": env_id, "rounds": rounds, "local_steps": steps,
           "devices": [{"quality": "medium", "size": n, "seed": i} for i, n in enumerate(sizes)],
           "federation": {"omega_s": omega_s, "hidden": hidden}}
    cfg = config_from_dict(raw)
    again = config_from_dict(json.loads(effective_config_json(cfg)))
    assert again == cfg and config_hash(again) == config_hash(cfg)


@pytest.mark.parametrize("raw, fragment", [
    ({"algoritm": "forler"}, "unknown keys"),
    ({"algorithm": "sac"}, "unknown algorithm"),
    ({"env_id": "hopper"}, "valid ids"),
    ({"federation": {"omega": 1}}, "federation"),
    ({"devices": [{"quality": "great"}]}, "quality"),
    ({"devices": []}, "at least one device"),
    ({"rounds": -1}, ">= 0"),
    ({"algorithm": "fed_td3bc", "env_id": "chain-3"}, "continuous"),
    ({"loss": {"gamma": 1.0}}, "loss"),
])
def test_invalid_configs(raw, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_dict(raw)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    ok = tmp_path / "ok.json"
    ok.write_text(json.dumps({"rounds": 3}))
    assert load_config(ok).rounds == 3


def test_pollution_config_shape():
    cfg = pollution_config()
    assert cfg.n_devices == 6 and all(d.size == 20_000 for d in cfg.devices)
    assert [d.quality for d in cfg.devices].count("random") == 2
    assert pollution_config(rounds=3).rounds == 3


def test_hash_changes_with_any_field():
    a = ExperimentConfig()
    assert config_hash(a) != config_hash(a.replace(federation=FederationOptions(omega_s=1.0)))
    assert config_hash(a) != config_hash(a.replace(devices=(DatasetSpec("medium", 20_000, 9),)))
