import json

import pytest

from arnvs.config import ConfigError, RunConfig, load_config


def test_defaults_build_valid_module_configs():
    cfg = RunConfig()
    d = cfg.denoiser_config()
    assert d.width == d.heads * d.head_dim
    cfg.rollout_config()
    cfg.optimizer_config()


def test_load_json_and_toml(tmp_path):
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"seed": 7, "train": {"steps": 12}}))
    cfg = load_config(j)
    assert cfg.seed == 7 and cfg.train.steps == 12
    assert cfg.train.batch_size == 4  # untouched default

    t = tmp_path / "c.toml"
    t.write_text('seed = 9\n[model]\nwidth = 64\nheads = 2\nhead_dim = 32\n')
    cfg = load_config(t)
    assert cfg.seed == 9 and cfg.model.width == 64


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"sed": 7}))
    with pytest.raises(ConfigError, match="unknown config keys"):
        load_config(p)
    p.write_text(json.dumps({"train": {"stepz": 7}}))
    with pytest.raises(ConfigError, match="stepz"):
        load_config(p)


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"steps": 10}}))
    cfg = load_config(p, {"train.steps": 99, "seed": 3})
    assert cfg.train.steps == 99 and cfg.seed == 3
    with pytest.raises(ConfigError):
        load_config(p, {"train.nope": 1})


def test_config_round_trips_through_file(tmp_path):
    cfg = load_config(None, {"model.width": 64, "model.heads": 2, "model.head_dim": 32})
    out = tmp_path / "echo.json"
    cfg.write(out)
    again = load_config(out)
    assert again == cfg


def test_invalid_model_config_raises_config_error():
    with pytest.raises(ConfigError):
        load_config(None, {"model.width": 100}).denoiser_config()
