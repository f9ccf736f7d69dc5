import numpy as np
import pytest
from scipy import stats

from density import (
    DensityCurve,
    bw_scott,
    bw_silverman,
    central_region,
    cf_inversion,
    characteristic_function,
    joint_tail_check,
    kde,
    scaling_identity_error,
    sup_difference,
    tail_fit,
    density_bound_check,
)
from errors import DomainError, InsufficientModesError, TailFitError
from sampler import SamplingPlan, run_batch
from spectral import series_coefficients
from chaos_kernel import TimePartition


def hypoexponential_density(x, lam_pairs):
    """Density of sum_i lam_i (chi2_2 - 2): a sum of exponentials with rates 1 / (2 lam_i)."""
    r = 1.0 / (2.0 * np.asarray(lam_pairs))
    s = np.asarray(x) + 2.0 * np.sum(lam_pairs)
    out = np.zeros_like(s)
    pos = s > 0
    for i, ri in enumerate(r):
        coef = np.prod([rj / (rj - ri) for j, rj in enumerate(r) if j != i])
        out[pos] += coef * ri * np.exp(-ri * s[pos])
    return out


@pytest.fixture(scope="module")
def spectrum_1(matrix_1):
    return series_coefficients(matrix_1, j_max=None, coverage_target=1.0)


def test_characteristic_function_basics():
    lam = np.array([0.3, -0.2, 0.1])
    assert characteristic_function(0.0, lam)[0] == pytest.approx(1.0)
    theta = np.array([0.5, 3.0, 40.0])
    closed = np.prod((1 - 2j * theta[:, None] * lam) ** -0.5 * np.exp(-1j * theta[:, None] * lam), axis=1)
    np.testing.assert_allclose(characteristic_function(theta, lam), closed, rtol=1e-12)
    np.testing.assert_allclose(
        np.abs(characteristic_function(theta, lam, remainder_variance=0.5)),
        np.abs(closed) * np.exp(-0.25 * theta ** 2),
        rtol=1e-12,
    )


def test_cf_inversion_hypoexponential_oracle():
    pairs = [0.3, 0.2, 0.1]
    lam = np.repeat(pairs, 2)
    x = np.linspace(-1.0, 4.0, 201)
    curve = cf_inversion(lam, 0, x)
    np.testing.assert_allclose(curve.values, hypoexponential_density(x, pairs), atol=1e-6)
    assert not curve.warnings


def test_cf_inversion_needs_enough_modes():
    with pytest.raises(InsufficientModesError):
        cf_inversion([0.3, 0.2], 0, np.linspace(-1, 1, 11))
    curve = cf_inversion([0.3, 0.2], 0, np.linspace(-1, 1, 11), remainder_variance=0.1)
    assert np.all(np.isfinite(curve.values))
    with pytest.raises(DomainError):
        cf_inversion([], 0, np.linspace(-1, 1, 11))
    with pytest.raises(DomainError):
        cf_inversion([0.3] * 8, -1, np.linspace(-1, 1, 11))


def test_cf_density_moments(spectrum_1):
    x = np.linspace(-6.0, 20.0, 2601)
    curve = cf_inversion(spectrum_1, 0, x)
    assert curve.integral() == pytest.approx(1.0, abs=1e-6)
    assert curve.moment(1) == pytest.approx(0.0, abs=1e-6)
    assert curve.moment(2) == pytest.approx(2.0 * spectrum_1.total_square, rel=1e-3)
    assert curve.coverage == pytest.approx(1.0)
    assert curve.frame().shape == (2601, 2)
    assert curve.header()["method"] == "cf_inversion"


@pytest.mark.parametrize("n", [0, 1, 2])
def test_self_similarity_reduction(spectrum_1, n):
    z = np.linspace(-2.0, 6.0, 81)
    for t in (0.5, 2.0):
        assert scaling_identity_error(spectrum_1, n, 0.75, t, z) < 1e-8


def test_kde_normal():
    samples = np.random.default_rng(3).standard_normal(20000)
    x = np.linspace(-4, 4, 161)
    est = kde(samples, x_grid=x)
    assert est.bandwidth == pytest.approx(bw_silverman(samples))
    assert est.coverage > 0.999
    assert est.integral() == pytest.approx(est.coverage, rel=1e-12)
    assert not est.warnings
    assert np.max(np.abs(est.values - stats.norm.pdf(x))) < 0.04
    lo, hi = central_region(est, 0.95)
    assert lo == pytest.approx(-1.96, abs=0.15)
    assert hi == pytest.approx(1.96, abs=0.15)
    assert sup_difference(est, est) == 0.0


def test_kde_partial_grid_keeps_pointwise_values():
    samples = np.random.default_rng(8).standard_normal(20000)
    x = np.linspace(0.0, 4.0, 81)
    est = kde(samples, x_grid=x)
    assert est.coverage == pytest.approx(0.5, abs=0.02)
    assert est.integral() == pytest.approx(est.coverage, rel=1e-9)
    assert np.max(np.abs(est.values - stats.norm.pdf(x))) < 0.04
    assert est.warnings and "kernel mass" in est.warnings[0]


def test_kde_shift_equivariant():
    samples = np.random.default_rng(9).standard_normal(5000)
    x = np.linspace(-3.0, 3.0, 121)
    base = kde(samples, x_grid=x)
    shifted = kde(samples + 2.5, x_grid=x + 2.5)
    assert shifted.bandwidth == pytest.approx(base.bandwidth, rel=1e-12)
    np.testing.assert_allclose(shifted.values, base.values, atol=1e-10)


def test_kde_options_and_errors():
    samples = np.random.default_rng(4).standard_normal(2000)
    scott = kde(samples, bandwidth="scott")
    assert scott.bandwidth == pytest.approx(bw_scott(samples))
    assert scott.x_grid.size == 512
    assert kde(samples, bandwidth=0.2).bandwidth == 0.2
    with pytest.raises(DomainError):
        kde(samples[:500])
    with pytest.raises(DomainError):
        kde(np.ones(2000))
    with pytest.raises(DomainError):
        kde(samples, bandwidth="isj")
    with pytest.raises(DomainError):
        kde(samples, bandwidth=-1.0)


def test_tail_fit_exponential_tail():
    samples = np.random.default_rng(5).laplace(size=200_000)
    fit = tail_fit(samples, sigma=1.0, t_max=6.0)
    assert fit.fitted_c == pytest.approx(1.0, abs=0.1)
    assert fit.r_squared > 0.99
    assert fit.thresholds[0] == 2.0 and fit.thresholds[-1] == 6.0


def test_tail_fit_flags_gaussian_tail():
    samples = np.random.default_rng(6).standard_normal(200_000)
    fit = tail_fit(samples, sigma=1.0, t_max=3.5)
    assert fit.superlinear
    assert fit.curvature < 0


def test_tail_fit_errors():
    samples = np.random.default_rng(7).standard_normal(100)
    with pytest.raises(TailFitError) as info:
        tail_fit(samples, sigma=1.0, t_max=10.0)
    assert info.value.to_dict()["usable_t_max"] < 10.0
    with pytest.raises(DomainError):
        tail_fit(samples, t_min=1.0)


def test_tail_fit_on_curve(spectrum_1):
    curve = cf_inversion(spectrum_1, 0, np.linspace(-6.0, 16.0, 2201))
    fit = tail_fit(curve, sigma=1.0, t_max=5.0)
    assert fit.fitted_c > 0
    assert fit.n_samples is None


def test_cf_inversion_first_derivative_matches_differences(spectrum_1):
    x = np.linspace(-2.0, 6.0, 801)
    p0 = cf_inversion(spectrum_1, 0, x)
    p1 = cf_inversion(spectrum_1, 1, x)
    fd = np.gradient(p0.values, x)
    assert np.max(np.abs(fd[1:-1] - p1.values[1:-1])) < 1e-3


def test_cf_inversion_is_real(spectrum_1):
    x = np.linspace(-2.0, 6.0, 161)
    for n in (0, 1, 2):
        curve = cf_inversion(spectrum_1, n, x)
        assert curve.imag_residue < 1e-10
        assert curve.header()["imag_residue"] == curve.imag_residue


def test_tail_fit_survival_non_increasing(spectrum_1):
    samples = np.random.default_rng(10).laplace(size=50_000)
    curve = cf_inversion(spectrum_1, 0, np.linspace(-6.0, 16.0, 2201))
    for fit in (tail_fit(samples, sigma=1.0, t_max=5.0), tail_fit(curve, sigma=1.0, t_max=5.0)):
        assert np.all(np.diff(fit.log_survival) <= 0.0)


def test_bound_check(spectrum_1):
    for n in (0, 1):
        report = density_bound_check(spectrum_1, n, 0.75, times=(0.5, 2.0), n_points=61)
        assert report.fitted_c > 0
        assert report.fitted_C > 0
        assert report.scaling_error < 1e-8
        assert report.z_mid == pytest.approx(5.0)
    with pytest.raises(DomainError):
        density_bound_check(spectrum_1, 0, 0.75, z_max=8.0, z_mid=9.0)


def test_joint_tail_check(ctx75, matrices_12):
    plan = SamplingPlan(ctx=ctx75, partition=TimePartition.from_positive([1.0, 2.0]), grid=matrices_12[0].grid,
                        n_samples=20000, seed=2)
    values = run_batch(plan, matrices_12).values
    out = joint_tail_check(values, plan.partition, 0.75)
    assert len(out["rows"]) == 3
    assert len(out["marginal_c"]) == 2
    assert all(r["empirical"] >= 0 for r in out["rows"])


def test_density_curve_is_plain_data():
    curve = DensityCurve(np.array([0.0, 1.0]), np.array([1.0, 1.0]), 0, "test")
    assert curve.integral() == pytest.approx(1.0)
    assert curve.moment(1) == pytest.approx(0.5)
