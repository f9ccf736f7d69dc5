import json
import os

import pytest

import cli
import manifest


@pytest.fixture
def config_file(small_config, tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(small_config.to_yaml(), encoding="utf-8")
    return str(path)


def _load(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def test_simulate_zero_samples(config_file, tmp_path):
    out = str(tmp_path / "sim")
    code = cli.main(["simulate", "--config", config_file, "--out", out, "--n-samples", "0"])
    assert code == cli.EXIT_OK
    assert open(os.path.join(out, "samples.csv"), encoding="utf-8").read() == "dz_1,z_1\n"
    assert manifest.get_entry(out, "status") == "ok"
    assert manifest.get_entry(out, "config")["sampling"]["n_samples"] == 0


def test_flags_override_file(config_file, tmp_path):
    out = str(tmp_path / "sim")
    code = cli.main(["simulate", "--config", config_file, "--out", out, "--n-samples", "10",
                     "--seed", "3", "--times", "0.5,1"])
    assert code == cli.EXIT_OK
    meta = _load(os.path.join(out, "samples.meta.json"))
    assert meta["seed"] == 3
    assert meta["partition"] == [0.0, 0.5, 1.0]
    assert meta["n_samples"] == 10


def test_bad_hurst_is_usage_error(tmp_path, capsys):
    out = str(tmp_path / "bad")
    code = cli.main(["spectrum", "--hurst", "1.2", "--out", out])
    assert code == cli.EXIT_USAGE
    err = _load(os.path.join(out, "error.json"))
    assert err["error"] == "ConfigError"
    assert any("hurst" in issue for issue in err["issues"])
    assert '"ConfigError"' in capsys.readouterr().err


def test_unsorted_times_is_usage_error(tmp_path):
    assert cli.main(["simulate", "--times", "2,1", "--out", str(tmp_path / "bad")]) == cli.EXIT_USAGE


def test_unparsable_times_exits(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["simulate", "--times", "a,b", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_verify_single_criterion(tmp_path):
    out = str(tmp_path / "verify")
    code = cli.main(["verify", "--only", "4", "--out", out])
    assert code == cli.EXIT_OK
    summary = _load(os.path.join(out, "verify.json"))
    assert summary["n_criteria"] == 1
    assert summary["criteria"][0]["id"] == "nystrom_brownian"
    assert summary["passed"]
    table = open(os.path.join(out, "verify.txt"), encoding="utf-8").read()
    assert "nystrom_brownian" in table and "total wall-clock" in table
    assert manifest.get_entry(out, "n_failed") == 0


def test_verify_selection_by_id_and_number():
    from verify import selected_criteria

    picked = [cid for cid, _ in selected_criteria(["1", "determinism"])]
    assert picked == ["normalization", "determinism"]
    assert len(selected_criteria(None)) == 14
    assert selected_criteria(["nope"]) == []


def test_verify_with_nothing_selected_fails(tmp_path):
    out = str(tmp_path / "verify")
    assert cli.main(["verify", "--only", "nope", "--out", out]) == cli.EXIT_FAILED
    assert _load(os.path.join(out, "verify.json"))["n_criteria"] == 0


def test_unexpected_exception_writes_error_json(config_file, tmp_path, monkeypatch):
    def broken(cfg, store):
        raise ValueError("singular matrix in a third-party call")

    monkeypatch.setitem(cli.COMMANDS, "simulate", broken)
    out = str(tmp_path / "crash")
    code = cli.main(["simulate", "--config", config_file, "--out", out])
    assert code == cli.EXIT_FAILED
    err = _load(os.path.join(out, "error.json"))
    assert err == {"error": "ValueError", "message": "singular matrix in a third-party call"}
    assert manifest.get_entry(out, "status") == "error"


def test_error_payload_keeps_toolkit_details():
    from errors import NumericalError

    payload = cli.error_payload(NumericalError("bad values", [(0.1, 0.5)]))
    assert payload["error"] == "NumericalError"
    assert payload["points"] == [[0.1, 0.5]]
    assert cli.error_payload(KeyError("x"))["error"] == "KeyError"
