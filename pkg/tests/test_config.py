import pytest

from config import RunConfig, apply_overrides, load_config
from errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.H == 0.75
    assert cfg.times == [1.0]
    assert cfg.grid.n == 768
    assert cfg.sampling.seed == 20240501
    assert cfg.density.derivative_orders == [0, 1, 2]
    assert cfg.partition.times == (0.0, 1.0)


def test_yaml_round_trip():
    cfg = RunConfig.model_validate({"H": 0.6, "times": [0.5, 1.5], "grid": {"lower": -40.0}})
    again = RunConfig.from_yaml(cfg.to_yaml())
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_hash_ignores_machine_fields():
    a = RunConfig(out_dir="/tmp/a", threads=1)
    b = RunConfig(out_dir="/tmp/b", threads=8)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != RunConfig(H=0.6).config_hash()


def test_apply_overrides_nested_and_none():
    data = {"sampling": {"seed": 1, "n_samples": 10}}
    out = apply_overrides(data, {"seed": 5, "hurst": None, "scale": 0.1})
    assert out["sampling"] == {"seed": 5, "n_samples": 10}
    assert out["verify"] == {"scale": 0.1}
    assert "H" not in out
    assert data["sampling"]["seed"] == 1


def test_load_config_precedence(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("H: 0.6\nsampling:\n  seed: 3\n  n_samples: 50\n", encoding="utf-8")
    cfg = load_config(str(path), {"seed": 9})
    assert cfg.H == 0.6
    assert cfg.sampling.seed == 9
    assert cfg.sampling.n_samples == 50
    assert cfg.grid.n == 768


def test_unknown_field_rejected():
    with pytest.raises(ConfigError) as info:
        load_config(None, {"grid.colour": "red"})
    assert any("colour" in issue for issue in info.value.issues)


def test_precondition_failure_rejected():
    with pytest.raises(ConfigError):
        load_config(None, {"hurst": 1.2})
    with pytest.raises(ConfigError):
        load_config(None, {"times": [2.0, 1.0]})


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("H: [0.6\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(bad))
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(listing))
