import math

import numpy as np
import pytest
from scipy import stats

from chaos_kernel import TimePartition
from errors import DomainError, GridMismatchError
from malliavin import (
    MomentReport,
    chi2_negative_moment,
    chi2_surrogate_check,
    det_via_projections,
    gram_matrix,
    malliavin_batch,
    malliavin_derivatives,
    moment_scaling,
    negative_moment,
    positivity_census,
    quantile_domination,
    scaling_check,
    sobolev_norm,
    sobolev_scaling,
)
from spectral import covariance_operator_matrix


@pytest.fixture(scope="module")
def report_12(matrices_12):
    return malliavin_batch(matrices_12, 600, seed=5, block_size=256)


def test_derivative_shapes(matrices_12):
    n = matrices_12[0].grid.n
    xi = np.random.default_rng(0).standard_normal((4, n))
    D = malliavin_derivatives(matrices_12, xi)
    assert D.shape == (4, 2, n)
    np.testing.assert_allclose(D[:, 0, :], 2.0 * xi @ matrices_12[0].M)
    np.testing.assert_allclose(D.sum(axis=1), 2.0 * xi @ matrices_12[1].M, atol=1e-12)
    with pytest.raises(GridMismatchError):
        malliavin_derivatives(matrices_12, xi[:, :-1])


def test_projection_determinant_matches_direct():
    D = np.random.default_rng(1).standard_normal((10, 3, 20))
    det, residuals = det_via_projections(D)
    G = gram_matrix(D)
    np.testing.assert_allclose(det, np.linalg.det(G), rtol=1e-10)
    assert residuals.shape == (10, 3)
    np.testing.assert_allclose(residuals[:, 0], np.einsum("rn,rn->r", D[:, 0], D[:, 0]))


def test_projection_determinant_nearly_dependent():
    rng = np.random.default_rng(2)
    v = rng.standard_normal(30)
    e = rng.standard_normal(30)
    w = v + 1e-7 * e
    e_perp = e - (e @ v) / (v @ v) * v
    exact = (v @ v) * 1e-14 * (e_perp @ e_perp)
    det, _ = det_via_projections(np.stack([v, w])[None])
    assert det[0] > 0
    assert det[0] == pytest.approx(exact, rel=1e-6)


def test_batch_quantities(report_12, matrices_12):
    assert report_12.n_samples == 600
    assert report_12.gram.shape == (600, 2, 2)
    assert np.max(report_12.factorization_error()) < 1e-8
    assert np.all(report_12.dz1_restricted <= report_12.dz1_full + 1e-12)
    assert report_12.restricted_to == (0.0, 1.0)
    frame = report_12.frame()
    assert {"det", "residual_1", "residual_2", "dz1_norm2"} <= set(frame.columns)


def test_positivity(report_12):
    census = positivity_census(report_12.det_proj, report_12.gram)
    assert census["violations"] == 0
    assert census["rule"] == "relative_hadamard"
    forced = positivity_census(np.array([1.0, -1.0, 0.0]), epsilon=0.0)
    assert forced["violations"] == 2
    assert forced["fraction"] == pytest.approx(2 / 3)


def test_energy_identity_on_grid(matrix_1):
    rep = malliavin_batch([matrix_1], 4000, seed=9)
    x = rep.dz1_full
    target = 4.0 * matrix_1.frobenius2
    assert abs(x.mean() - target) <= 4.0 * x.std(ddof=1) / math.sqrt(x.size)


def test_batch_is_schedule_independent(matrices_12):
    a = malliavin_batch(matrices_12, 300, seed=4, block_size=64)
    b = malliavin_batch(matrices_12, 300, seed=4, block_size=64, chunks=3, threads=2)
    np.testing.assert_array_equal(a.det_proj, b.det_proj)
    np.testing.assert_array_equal(a.values, b.values)


def test_negative_moment(report_12):
    rep = negative_moment(report_12.dz1_full, 1.0, "dz1_norm", n_boot=50, seed=1)
    assert isinstance(rep, MomentReport)
    assert rep.estimate == pytest.approx(np.mean(1.0 / report_12.dz1_full))
    assert rep.half_width > 0
    assert 0 < rep.max_share < 1
    with pytest.raises(DomainError):
        negative_moment(np.array([1.0, 0.0, 2.0]), 1.0)
    with pytest.raises(DomainError):
        negative_moment(np.array([1.0]), 1.0)


def test_negative_moment_heavy_tail_guard():
    values = np.concatenate([np.ones(99), [1e-6]])
    rep = negative_moment(values, 1.0, n_boot=20)
    assert not rep.stable
    assert rep.warnings


def test_chi2_closed_forms():
    assert chi2_negative_moment(3, 1.5) == math.inf
    # E[1/X] = 1/(N-2) for X ~ chi2(N)
    assert chi2_negative_moment(6, 1.0) == pytest.approx(0.25)
    for p in (1, 2):
        check = chi2_surrogate_check(p)
        assert check["N"] == 2 * p + 1
        assert check["rel_error"] < 1e-6


def test_scaling_check_identity(report_12):
    reports = scaling_check(report_12, report_12, 1.0)
    assert len(reports) == 3
    assert all(r.statistic == 0.0 for r in reports)
    assert all(r.pvalue == pytest.approx(1.0) for r in reports)


def test_quantile_domination_rows(report_12):
    ref = report_12.dz1_restricted
    out = quantile_domination(report_12.residual_norms, [1.0, 1.0], 0.75, ref)
    assert len(out["rows"]) == 6
    assert isinstance(out["all_dominate"], bool)


def test_sobolev_norm_orders():
    values = np.array([1.0, -1.0, 2.0])
    d2 = np.array([4.0, 4.0, 4.0])
    assert sobolev_norm(values, d2, 9.0, k=0, p=2.0) == pytest.approx(math.sqrt(2.0))
    assert sobolev_norm(values, d2, 9.0, k=1, p=2.0) == pytest.approx(math.sqrt(6.0))
    assert sobolev_norm(values, d2, 9.0, k=2, p=2.0) == pytest.approx(math.sqrt(15.0))
    with pytest.raises(DomainError):
        sobolev_norm(values, d2, 9.0, k=-1)


def test_moment_scaling_ratio():
    parts = [TimePartition.from_positive([1.0, 2.0]), TimePartition.from_positive([2.0, 4.0])]
    H = 0.75
    reports = [
        MomentReport(1.0, "det", 1.0, 0.1, 1.0, 0.01, 100, True),
        MomentReport(1.0, "det", 2.0 ** (-4 * H), 0.1, 1.0, 0.01, 100, True),
    ]
    out = moment_scaling(reports, parts, H)
    assert out["max_ratio"] == pytest.approx(1.0)
    assert out["within_factor_2"]


def test_sobolev_scaling_slope(ctx75):
    from spectral import build_line_grid, chaos_matrix

    mats = {h: chaos_matrix(ctx75, h, build_line_grid(ctx75, [h], n=64)) for h in (0.5, 1.0, 2.0)}
    out = sobolev_scaling(mats, 500, seed=3)
    assert out["spacings"] == [0.5, 1.0, 2.0]
    assert out["slope"] == pytest.approx(0.75, abs=1e-3)
    assert sobolev_scaling({1.0: mats[1.0]}, 50, seed=3)["slope"] is None


def test_positivity_census_flags_repeated_time(matrix_1):
    xi = np.random.default_rng(12).standard_normal((50, matrix_1.grid.n))
    D = malliavin_derivatives([matrix_1, matrix_1], xi)
    assert np.all(D[:, 1, :] == 0.0)
    det, _ = det_via_projections(D)
    assert np.all(det == 0.0)
    census = positivity_census(det, gram_matrix(D))
    assert census["violations"] == 50
    assert census["min_det"] == 0.0


def test_restricted_norm_matches_operator_spectrum(matrix_1):
    n = 4000
    rep = malliavin_batch([matrix_1], n, seed=13)
    T, _ = covariance_operator_matrix(matrix_1, (0.0, 1.0))
    mu = np.clip(np.linalg.eigvalsh(T), 0.0, None)
    zeta = np.random.default_rng(14).standard_normal((n, mu.size))
    spectral_side = 4.0 * (zeta ** 2) @ mu
    x = rep.dz1_restricted
    assert abs(x.mean() - 4.0 * np.trace(T)) <= 4.0 * x.std(ddof=1) / math.sqrt(n)
    assert stats.ks_2samp(x, spectral_side).pvalue > 1e-3
