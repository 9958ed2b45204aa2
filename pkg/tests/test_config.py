from __future__ import annotations

import sys
from dataclasses import replace

import pytest

from wcslam.config import RunConfig, config_from_dict, dump_defaults, load_config
from wcslam.scenegen import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def test_dumped_defaults_load_back_unchanged(tmp_path):
    text = dump_defaults()
    path = tmp_path / "defaults.toml"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg.to_dict() == RunConfig(seed=0).with_seed(0).to_dict()
    assert dump_defaults() == text


def test_every_section_is_dumped():
    d = tomllib.loads(dump_defaults())
    assert set(d) == {"run", "scene", "noise", "frontend", "backend", "solver"}
    assert d["run"]["window"] == 0
    assert "camera" in d["scene"]


def test_seed_override_propagates():
    cfg = config_from_dict({"run": {"seed": 1}})
    assert cfg.scene.seed == cfg.frontend.seed == 1
    cfg = cfg.with_seed(9)
    assert (cfg.seed, cfg.scene.seed, cfg.frontend.seed) == (9, 9, 9)


def test_huber_zero_disables_kernel():
    cfg = config_from_dict({"run": {"seed": 0}, "backend": {"huber": 0.0}})
    assert cfg.backend.huber is None
    assert cfg.to_dict()["backend"]["huber"] == 0.0


def test_window_zero_means_batch():
    assert config_from_dict({"run": {"seed": 0, "window": 0}}).window is None
    assert config_from_dict({"run": {"seed": 0, "window": 20}}).window == 20


@pytest.mark.parametrize(
    "d",
    [
        {"bogus": {}},
        {"run": {"speed": 1}},
        {"frontend": {"ransac_threshold": 4.0}},
        {"backend": {"solver": {}}},
        {"solver": {"linear_solver": "qr"}},
    ],
)
def test_unknown_or_invalid_keys_rejected(d):
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_validation(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        RunConfig().validate()
    with pytest.raises(ConfigError, match="formulation"):
        replace(RunConfig(seed=0), formulation="pose").validate()
    with pytest.raises(ConfigError, match="window"):
        replace(RunConfig(seed=0), window=5, overlap=5).validate()
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\nseed = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)
