import numpy as np
import pytest

from malliavin import malliavin_batch
from storage import RunStorage
from verify import VerifyContext, check_covariance, check_normalization


def _context(cfg, scale=0.02):
    cfg = cfg.model_copy(update={"verify": cfg.verify.model_copy(update={"scale": scale, "hurst_values": [0.75]})})
    return VerifyContext(cfg, RunStorage(cfg.out_dir))


def test_uncompensated_levels_are_the_bare_quadratic_forms(small_config):
    vc = _context(small_config)
    levels, discrete = vc.uncompensated(0.75, [1.0, 2.0], 1000)
    rep = malliavin_batch(vc.matrices(0.75, [1.0, 2.0]), 1000, vc.seed, block_size=small_config.sampling.block_size)
    np.testing.assert_allclose(levels, np.cumsum(rep.values, axis=1), atol=1e-9)
    assert discrete.shape == (2, 2)
    assert discrete[0, 0] <= 1.0 + 1e-9
    assert discrete[0, 0] == pytest.approx(2.0 * rep.frobenius2[0], rel=1e-8)


def test_covariance_criterion_gates_on_uncompensated_samples(small_config):
    res = check_covariance(_context(small_config))
    assert res.detail["compensated"] is False
    assert len(res.detail["rows"]) == 10
    assert res.value["max_sampler_z"] < 5.0
    for row in (r for r in res.detail["rows"] if r["s"] == r["t"]):
        # the grid only loses variance
        assert row["grid"] <= row["target"] * (1.0 + 1e-9)


def test_normalization_criterion_rows(small_config):
    cfg = small_config.model_copy(update={"verify": small_config.verify.model_copy(update={"fine_n": 64})})
    res = check_normalization(_context(cfg))
    row = res.detail["rows"][0]
    assert res.detail["compensated"] is False
    assert row["no_excess_mass"]
    assert abs(row["variance"] - row["grid_variance"]) <= 5.0 * row["se"]
    assert row["deficit_corrected"] == row["variance"] / row["grid_variance"]
