import numpy as np
import pytest
from scipy import stats

from chaos_kernel import TimePartition
from errors import DomainError, GridMismatchError
from malliavin import malliavin_batch
from sampler import (
    GaussianState,
    SamplingPlan,
    block_key,
    discrete_covariance,
    group_blocks,
    increments_from_levels,
    iter_blocks,
    level_from_increments,
    level_map_matrix,
    modal_factors,
    remainder_covariance,
    run_batch,
    sample_increment_vector,
    sample_series,
)
from spectral import series_coefficients


def _plan(ctx, matrices, **kw):
    partition = TimePartition.from_positive([m.t for m in matrices])
    params = dict(n_samples=3000, seed=7, block_size=512)
    params.update(kw)
    return SamplingPlan(ctx=ctx, partition=partition, grid=matrices[0].grid, **params)


def test_block_key_depends_on_every_part():
    k = block_key(1, "xi", 0)
    assert k == block_key(1, "xi", 0)
    assert len({k, block_key(2, "xi", 0), block_key(1, "remainder", 0), block_key(1, "xi", 1)}) == 4
    assert 0 <= k < 2 ** 128


def test_iter_and_group_blocks():
    blocks = list(iter_blocks(5000, 2048))
    assert blocks == [(0, 2048), (1, 2048), (2, 904)]
    groups = group_blocks(blocks, 2)
    assert [b for g in groups for b in g] == blocks
    assert group_blocks(blocks, 10) == [[b] for b in blocks]
    assert list(iter_blocks(0, 16)) == []
    with pytest.raises(DomainError):
        list(iter_blocks(10, 0))


def test_level_maps_invert():
    inc = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    levels = level_from_increments(inc)
    np.testing.assert_allclose(levels, [[1.0, -1.0, -0.5], [0.0, 3.0, 4.0]])
    np.testing.assert_allclose(increments_from_levels(levels), inc)
    S = level_map_matrix(3)
    np.testing.assert_allclose(inc @ S.T, levels)
    assert np.linalg.det(S) == pytest.approx(1.0)


def test_quadratic_form_single_state(matrix_1):
    state = GaussianState.draw(matrix_1.grid.n, seed=3)
    inc = sample_increment_vector([matrix_1], state)
    xi = state.xi
    assert inc.shape == (1,)
    assert inc[0] == pytest.approx(xi @ matrix_1.M @ xi - np.trace(matrix_1.M), rel=1e-12)


def test_state_dimension_checked(matrix_1):
    with pytest.raises(GridMismatchError):
        sample_increment_vector([matrix_1], GaussianState.draw(5, seed=1))


def test_series_sampler_uses_leading_coordinates(matrix_1):
    spec = series_coefficients(matrix_1, j_max=10, coverage_target=1.0)
    state = GaussianState.draw(12, seed=5, size=4)
    out = sample_series(spec, state)
    expected = (state.xi[:, :10] ** 2 - 1.0) @ spec.eigenvalues
    np.testing.assert_allclose(out, expected)
    with pytest.raises(GridMismatchError):
        sample_series(spec, GaussianState.draw(3, seed=5))


def test_remainder_covariance_is_psd(ctx75, matrices_12):
    factors = modal_factors(matrices_12)
    R = remainder_covariance(ctx75, factors)
    np.testing.assert_allclose(R, R.T)
    assert np.linalg.eigvalsh(R).min() >= -1e-12
    # whole-kernel deficit at t = 1 is what the remainder carries
    assert R[0, 0] == pytest.approx(1.0 - matrices_12[0].variance, abs=1e-8)


def test_run_batch_shapes_and_sidecar(ctx75, matrices_12):
    batch = run_batch(_plan(ctx75, matrices_12), matrices_12)
    assert batch.values.shape == (3000, 2)
    frame = batch.frame()
    assert list(frame.columns) == ["dz_1", "dz_2", "z_1", "z_2"]
    np.testing.assert_allclose(frame["z_2"], frame["dz_1"] + frame["dz_2"])
    side = batch.sidecar()
    assert side["seed"] == 7
    assert side["partition"] == [0.0, 1.0, 2.0]
    assert side["stream_layout"]["streams"] == ["xi", "remainder"]
    assert len(side["frobenius_deficit"]) == 2


def test_run_batch_independent_of_schedule(ctx75, matrices_12):
    serial = run_batch(_plan(ctx75, matrices_12), matrices_12)
    parallel = run_batch(_plan(ctx75, matrices_12, chunks=3, threads=3), matrices_12)
    np.testing.assert_array_equal(serial.values, parallel.values)
    assert serial.sidecar() == parallel.sidecar()


def test_run_batch_seed_changes_output(ctx75, matrices_12):
    a = run_batch(_plan(ctx75, matrices_12, n_samples=100), matrices_12)
    b = run_batch(_plan(ctx75, matrices_12, n_samples=100, seed=8), matrices_12)
    assert not np.array_equal(a.values, b.values)


def test_run_batch_empty(ctx75, matrices_12):
    batch = run_batch(_plan(ctx75, matrices_12, n_samples=0), matrices_12)
    assert batch.values.shape == (0, 2)
    assert list(batch.frame().columns) == ["dz_1", "dz_2", "z_1", "z_2"]


def test_run_batch_rejects_wrong_matrix_count(ctx75, matrices_12):
    with pytest.raises(GridMismatchError):
        run_batch(_plan(ctx75, matrices_12), matrices_12[:1])


def test_compensated_moments(ctx75, matrices_12):
    levels = run_batch(_plan(ctx75, matrices_12, n_samples=20000), matrices_12).levels
    assert abs(levels[:, 0].mean()) < 0.05
    assert levels[:, 0].var() == pytest.approx(1.0, abs=0.08)
    assert levels[:, 1].var() == pytest.approx(2.0 ** 1.5, rel=0.08)


def test_uncompensated_matches_malliavin_values(ctx75, matrices_12):
    batch = run_batch(_plan(ctx75, matrices_12, n_samples=700, compensate=False), matrices_12)
    rep = malliavin_batch(matrices_12, 700, seed=7, block_size=512)
    np.testing.assert_allclose(batch.values, rep.values, atol=1e-9)


def test_series_and_quadratic_form_agree_in_law(matrix_1):
    n = 4000
    spec = series_coefficients(matrix_1, j_max=None, coverage_target=1.0)
    series = sample_series(spec, GaussianState.draw(spec.n_modes, seed=21, stream="series", size=n))
    direct = sample_increment_vector([matrix_1], GaussianState.draw(matrix_1.grid.n, seed=21, stream="quadratic", size=n))[:, 0]
    assert stats.ks_2samp(series, direct).pvalue > 1e-3
    assert series.var() == pytest.approx(matrix_1.variance, rel=0.2)


def test_discrete_covariance_matches_matrix_traces(matrices_12):
    factors = modal_factors(matrices_12)
    C = discrete_covariance(factors)
    M1, M2 = matrices_12[0].M, matrices_12[1].M
    assert C[0, 0] == pytest.approx(matrices_12[0].variance, rel=1e-8)
    assert C[0, 1] == pytest.approx(2.0 * np.sum(M1 * M2), rel=1e-8)
