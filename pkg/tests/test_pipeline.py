import json

import numpy as np
import pandas as pd
import pytest

import pipeline
from storage import RunStorage


@pytest.fixture
def store(small_config):
    return RunStorage(small_config.out_dir)


def _json(store, name):
    with open(store.path(name), encoding="utf-8") as f:
        return json.load(f)


def test_run_spectrum_writes_full_spectra(small_config, store):
    summary = pipeline.run_spectrum(small_config, store)
    frame = pd.read_csv(store.path("spectrum_M_t1.csv"))
    assert len(frame) == small_config.grid.n
    assert list(frame.columns) == ["index", "eigenvalue", "coverage", "retained"]
    T = _json(store, "spectrum_T.json")
    assert set(T["rank_profile"]) == {"16", "32"}
    assert T["rank_profile"]["32"] >= T["rank_profile"]["16"] > 0
    assert T["trace_integral"] > 0
    assert abs(T["min_over_max"]) < 1
    assert summary["M"]["t1"]["t"] == 1.0


def test_retained_count_caps_at_j_max(small_config, ctx75, matrix_1):
    from spectral import series_coefficients

    spec = series_coefficients(matrix_1, j_max=None, coverage_target=1.0)
    assert pipeline.retained_count(spec, 5, 0.999) == 5
    assert pipeline.retained_count(spec, 10_000, 1.0) <= spec.n_modes


def test_run_simulate_and_rerun_identical(small_config, tmp_path):
    a = RunStorage(str(tmp_path / "a"))
    b = RunStorage(str(tmp_path / "b"))
    pipeline.run_simulate(small_config, a)
    pipeline.run_simulate(small_config, b)
    for name in ("samples.csv", "samples.meta.json"):
        assert open(a.path(name), "rb").read() == open(b.path(name), "rb").read()
    frame = pd.read_csv(a.path("samples.csv"))
    assert frame.shape == (1500, 2)
    assert _json(a, "samples.meta.json")["seed"] == 11


def test_run_simulate_empty(small_config, store):
    cfg = small_config.model_copy(update={"sampling": small_config.sampling.model_copy(update={"n_samples": 0})})
    summary = pipeline.run_simulate(cfg, store)
    assert summary["n_samples"] == 0
    assert open(store.path("samples.csv"), encoding="utf-8").read() == "dz_1,z_1\n"


def test_simulate_partition_levels(small_config):
    cfg = small_config.model_copy(update={"times": [0.5, 1.0]})
    batch = pipeline.simulate(cfg, n_samples=200)
    assert batch.values.shape == (200, 2)
    np.testing.assert_allclose(batch.levels[:, 1], batch.values.sum(axis=1))


def test_run_malliavin(small_config, store):
    cfg = small_config.model_copy(update={"times": [1.0, 2.0]})
    summary = pipeline.run_malliavin(cfg, store)
    assert summary["violations"] == 0
    report = _json(store, "malliavin_report.json")
    assert report["n_samples"] == 300
    assert len(report["moment_reports"]) == 4
    assert len(report["ks_reports"]) == 3 * len(cfg.malliavin.scale_factors)
    assert "quantile_domination" in report
    assert "moment_scaling" in report
    assert report["sobolev_scaling"]["spacings"] == [0.5, 1.0, 2.0]
    frame = pd.read_csv(store.path("malliavin.csv"))
    assert len(frame) == 300


def test_run_density(small_config, store):
    summary = pipeline.run_density(small_config, store)
    for n in small_config.density.derivative_orders:
        curve = pd.read_csv(store.path(f"density_cf_n{n}.csv"))
        assert len(curve) == small_config.density.grid_len
    kde_frame = pd.read_csv(store.path("density_kde.csv"))
    assert len(kde_frame) == small_config.density.grid_len
    assert summary["remainder_variance"] > 0
    assert summary["sup_difference"] < 0.1
    assert len(summary["bound_fits"]) == 3
    assert "tail_fit_cf" in summary
    assert _json(store, "density_report.json")["t"] == 1.0


def test_commands_table():
    assert set(pipeline.COMMANDS) == {"spectrum", "simulate", "malliavin", "density"}
