"""Quadrature grids, Nystrom eigensolvers and the discrete second-chaos matrices.

Features:
- composite Gauss-Legendre grids on bounded intervals (operators on [0, 1])
- cell grids on the truncated line [lower, t_max]: uniform cells on every
  partition interval, geometric cells on the negative half-line, and a
  certified bound on the truncated kernel mass
- Nystrom eigen-decomposition of symmetric kernels on a grid
- SecondChaosMatrix M_t (cell-averaged L_t, weights folded in) and its signed
  spectrum, i.e. the coefficients of the chi-square series
- the discrete covariance operator T restricted to an interval, rank profiles,
  empirical eigenvalue decay and CSV / JSON renderings of spectra

Usage:
    from chaos_kernel import normalization_constant
    from spectral import build_line_grid, chaos_matrix, series_coefficients

    ctx = normalization_constant(0.75)
    grid = build_line_grid(ctx, [1.0], n=256)
    spec = series_coefficients(chaos_matrix(ctx, 1.0, grid), j_max=200)
"""
from __future__ import annotations

import functools
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize

from chaos_kernel import (
    HurstContext,
    TimePartition,
    auto_lower_limit,
    cell_profiles,
    derivative_covariance,
    tail_mass_bound,
    time_quadrature,
)
from errors import DomainError, EigensolverError, GridMismatchError

logger = logging.getLogger("spectral")

DEFAULT_LINE_NODES = 768
DEFAULT_INNER_FRACTION = 0.6
DEFAULT_TAIL_TOLERANCE = 2e-3
DEFAULT_COVERAGE_TARGET = 0.999
DEFAULT_MATRIX_TOLERANCE = 0.03
RANK_THRESHOLD = 1e-8

KernelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Nodes and positive weights on `domain`.

    `edges` are the cell boundaries for rule "midpoint" (nodes are cell
    midpoints, weights cell widths) and the panel boundaries for "gauss".
    """

    nodes: np.ndarray
    weights: np.ndarray
    edges: np.ndarray
    domain: Tuple[float, float]
    rule: str = "gauss"
    tail_mass_bound: float = 0.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape:
            raise DomainError("grid nodes and weights must be 1-D arrays of equal length")
        if np.any(weights <= 0):
            raise DomainError("grid weights must be positive")
        if nodes.size > 1 and np.any(np.diff(nodes) <= 0):
            raise DomainError("grid nodes must be strictly increasing")
        lo, hi = self.domain
        if nodes.size and (nodes[0] < lo or nodes[-1] > hi):
            raise DomainError(f"grid nodes leave the domain [{lo}, {hi}]")
        if self.tail_mass_bound < 0:
            raise DomainError("tail_mass_bound must be nonnegative")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=float))

    @property
    def n(self) -> int:
        return int(self.nodes.size)

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(self.weights * f(self.nodes)))

    def mask(self, lo: float, hi: float) -> np.ndarray:
        """Nodes inside [lo, hi]."""
        return (self.nodes >= lo) & (self.nodes <= hi)

    @functools.cached_property
    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=12)
        h.update(self.nodes.tobytes())
        h.update(self.weights.tobytes())
        return h.hexdigest()

    def descriptor(self) -> Dict[str, Any]:
        return {
            "rule": self.rule,
            "n": self.n,
            "domain": [float(self.domain[0]), float(self.domain[1])],
            "min_width": float(self.weights.min()) if self.n else None,
            "max_width": float(self.weights.max()) if self.n else None,
            "tail_mass_bound": float(self.tail_mass_bound),
            "fingerprint": self.fingerprint,
        }


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Retained eigenpairs of a discretized symmetric operator.

    `eigenvectors` hold eigenfunction samples at the grid nodes (columns);
    they are orthonormal for the inner product sum_k w_k f_k g_k.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    weights: np.ndarray
    coverage: float
    total_square: float
    n_total: int
    order: str = "value"
    warnings: Tuple[str, ...] = ()

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def trace(self) -> float:
        return float(np.sum(self.eigenvalues))

    def orthonormality_error(self) -> float:
        if self.n_modes == 0:
            return 0.0
        V = self.eigenvectors * np.sqrt(self.weights)[:, None]
        return float(np.max(np.abs(V.T @ V - np.eye(self.n_modes))))

    def scaled(self, factor: float) -> "Spectrum":
        """Spectrum of factor * operator (eigenvectors unchanged)."""
        return Spectrum(
            eigenvalues=factor * self.eigenvalues,
            eigenvectors=self.eigenvectors,
            weights=self.weights,
            coverage=self.coverage,
            total_square=factor ** 2 * self.total_square,
            n_total=self.n_total,
            order=self.order,
            warnings=self.warnings,
        )


@dataclass(frozen=True, eq=False)
class SecondChaosMatrix:
    """M[k, l] = (cell average of L_t over cells k, l) * sqrt(w_k w_l)."""

    t: float
    M: np.ndarray
    grid: QuadratureGrid
    H: float
    warnings: Tuple[str, ...] = field(default=())

    @property
    def frobenius2(self) -> float:
        return float(np.sum(self.M * self.M))

    @property
    def variance(self) -> float:
        """Variance 2 ||M||_F^2 of the discrete proxy xi^T M xi - tr M."""
        return 2.0 * self.frobenius2

    @property
    def deficit(self) -> float:
        """1 - 2 ||M||_F^2 / t^{2H}."""
        return 1.0 - self.variance / self.t ** (2.0 * self.H)


def _split_count(total: int, parts: int) -> List[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def build_grid(
    domain: Tuple[float, float],
    n: int,
    rule: str = "gauss",
    order: int = 8,
    grading: float = 1.0,
    tail_mass: float = 0.0,
) -> QuadratureGrid:
    """Composite quadrature with exactly n nodes on a bounded interval.

    rule "gauss": ceil(n / order) panels, Gauss-Legendre on each, panel
    boundaries a + (b - a) (k / P)^grading (grading > 1 refines toward a).
    rule "midpoint": n cells with the same boundary law.
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise DomainError(f"degenerate grid domain [{lo}, {hi}]")
    if n < 2:
        raise DomainError(f"a grid needs at least 2 nodes, got {n}")
    if grading < 1.0:
        raise DomainError(f"grading exponent must be >= 1, got {grading}")

    if rule == "midpoint":
        edges = lo + (hi - lo) * np.linspace(0.0, 1.0, n + 1) ** grading
        return QuadratureGrid(0.5 * (edges[:-1] + edges[1:]), np.diff(edges), edges, (lo, hi), "midpoint", tail_mass)
    if rule != "gauss":
        raise DomainError(f"unknown quadrature rule {rule!r}")

    panels = max(1, math.ceil(n / order))
    edges = lo + (hi - lo) * np.linspace(0.0, 1.0, panels + 1) ** grading
    nodes, weights = [], []
    for (p0, p1), q in zip(zip(edges[:-1], edges[1:]), _split_count(n, panels)):
        x, w = np.polynomial.legendre.leggauss(q)
        nodes.append(p0 + 0.5 * (p1 - p0) * (x + 1.0))
        weights.append(0.5 * (p1 - p0) * w)
    return QuadratureGrid(np.concatenate(nodes), np.concatenate(weights), edges, (lo, hi), "gauss", tail_mass)


def _geometric_ratio(first: float, count: int, length: float) -> float:
    """Ratio r with first * (r^count - 1) / (r - 1) = length."""
    if count == 1 or count * first >= length:
        return 1.0

    def gap(r: float) -> float:
        log_sum = math.log(first) + math.log(math.expm1(count * math.log(r))) - math.log(r - 1.0)
        return log_sum - math.log(length)

    upper = 1.0 + (length / first) ** (1.0 / max(count - 1, 1))
    return optimize.brentq(gap, 1.0 + 1e-12, upper, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def build_line_grid(
    ctx: HurstContext,
    times: Union[TimePartition, Sequence[float]],
    n: int = DEFAULT_LINE_NODES,
    inner_fraction: float = DEFAULT_INNER_FRACTION,
    lower: Union[str, float] = "auto",
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> QuadratureGrid:
    """Cell grid on [lower, t_max] for the kernels L_{t_j}.

    Every partition time is a cell edge. The negative half-line gets
    geometric cells that start at the finest inner width.
    """
    partition = times if isinstance(times, TimePartition) else TimePartition.from_positive(times)
    spacings = partition.spacings
    t_max = partition.times[-1]
    m = partition.m
    if not (0.0 < inner_fraction < 1.0):
        raise DomainError(f"inner_fraction must lie in (0, 1), got {inner_fraction}")
    if lower == "auto":
        lower_value = auto_lower_limit(ctx, t_max, tail_tolerance)
    else:
        lower_value = float(lower)
    if lower_value >= 0:
        raise DomainError(f"line grid needs a negative lower limit, got {lower_value}")

    n_inner = max(m, int(round(inner_fraction * n)))
    n_outer = n - n_inner
    if n_outer < 1:
        raise DomainError(f"grid of {n} cells leaves no room for the negative half-line at m = {m}")
    counts = np.maximum(1, np.round(n_inner * spacings / t_max).astype(int))
    while counts.sum() != n_inner:
        j = int(np.argmax(spacings / counts)) if counts.sum() < n_inner else int(np.argmax(counts))
        counts[j] += 1 if counts.sum() < n_inner else -1

    inner = [np.array([0.0])]
    for (t0, t1), c in zip(zip(partition.times[:-1], partition.times[1:]), counts):
        inner.append(np.linspace(t0, t1, int(c) + 1)[1:])
    inner_edges = np.concatenate(inner)
    first = float(np.min(spacings / counts))

    ratio = _geometric_ratio(first, n_outer, -lower_value)
    if ratio == 1.0:
        widths = np.full(n_outer, -lower_value / n_outer)
    else:
        widths = first * ratio ** np.arange(n_outer)
    outer_edges = -np.cumsum(widths)[::-1]
    outer_edges[0] = lower_value
    edges = np.concatenate((outer_edges, inner_edges))

    bound = tail_mass_bound(ctx, t_max, lower_value)
    logger.info(
        "line grid: %d cells (%d on [0, %.4g], %d on [%.4g, 0), ratio %.6f), tail bound %.3e",
        n, n_inner, t_max, n_outer, lower_value, ratio, bound,
    )
    return QuadratureGrid(
        nodes=0.5 * (edges[:-1] + edges[1:]),
        weights=np.diff(edges),
        edges=edges,
        domain=(lower_value, t_max),
        rule="midpoint",
        tail_mass_bound=bound,
    )


def _symmetric_eigh(A: np.ndarray, label: str) -> Tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(A)):
        raise EigensolverError(f"{label}: matrix has non-finite entries", {"n": int(A.shape[0])})
    try:
        return np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(
            f"{label}: symmetric eigensolver did not converge",
            {"n": int(A.shape[0]), "frobenius": float(np.linalg.norm(A)), "reason": str(exc)},
        ) from exc


def _retain(values: np.ndarray, j_max: Optional[int], coverage_target: float) -> Tuple[int, float, float]:
    squares = values ** 2
    total = float(np.sum(squares))
    if total == 0.0:
        return 0, 1.0, 0.0
    cumulative = np.cumsum(squares) / total
    if coverage_target >= 1.0:
        keep = values.size
    else:
        keep = int(np.searchsorted(cumulative, coverage_target, side="left")) + 1
    if j_max is not None:
        keep = min(keep, int(j_max))
    keep = min(keep, values.size)
    coverage = float(cumulative[keep - 1]) if keep else 0.0
    return keep, coverage, total


def spectrum_from_matrix(
    A: np.ndarray,
    weights: np.ndarray,
    j_max: Optional[int] = None,
    coverage_target: float = 1.0,
    order: str = "value",
    label: str = "operator",
) -> Spectrum:
    """Eigen-decompose the weight-folded symmetric matrix A."""
    A = 0.5 * (A + A.T)
    values, vectors = _symmetric_eigh(A, label)
    idx = np.argsort(-np.abs(values) if order == "abs" else -values, kind="stable")
    values, vectors = values[idx], vectors[:, idx]
    keep, coverage, total = _retain(values, j_max, coverage_target)
    warnings: List[str] = []
    if coverage < coverage_target and coverage_target < 1.0:
        msg = f"{label}: coverage {coverage:.6f} below target {coverage_target} after {keep} modes"
        logger.warning(msg)
        warnings.append(msg)
    weights = np.asarray(weights, dtype=float)
    return Spectrum(
        eigenvalues=values[:keep].copy(),
        eigenvectors=vectors[:, :keep] / np.sqrt(weights)[:, None],
        weights=weights,
        coverage=coverage,
        total_square=total,
        n_total=int(values.size),
        order=order,
        warnings=tuple(warnings),
    )


def kernel_matrix(kernel: KernelFn, grid: QuadratureGrid) -> np.ndarray:
    x = grid.nodes
    return np.asarray(kernel(x[:, None], x[None, :]), dtype=float)


def nystrom_eig(
    kernel: Union[KernelFn, np.ndarray],
    grid: QuadratureGrid,
    j_max: Optional[int] = None,
    coverage_target: float = 1.0,
    order: str = "value",
) -> Spectrum:
    """Nystrom eigenpairs of a symmetric kernel on the grid.

    `kernel` is either a vectorized callable k(s, t) or its matrix at the grid
    nodes. The decomposed matrix is sqrt(w_k) k(x_k, x_l) sqrt(w_l).
    """
    K = kernel if isinstance(kernel, np.ndarray) else kernel_matrix(kernel, grid)
    if K.shape != (grid.n, grid.n):
        raise GridMismatchError(f"kernel matrix shape {K.shape} does not match grid size {grid.n}")
    s = np.sqrt(grid.weights)
    logger.debug("nystrom: n=%d j_max=%s", grid.n, j_max)
    return spectrum_from_matrix(s[:, None] * K * s[None, :], grid.weights, j_max, coverage_target, order, "nystrom")


def derivative_covariance_matrix(ctx: HurstContext, grid: QuadratureGrid, tol: float = 1e-9) -> np.ndarray:
    """K(x_k, x_l) on a grid inside [0, 1], evaluated on the upper triangle only."""
    if grid.domain[0] < 0 or grid.domain[1] > 1:
        raise DomainError("derivative covariance lives on [0, 1]")
    iu, ju = np.triu_indices(grid.n)
    values = derivative_covariance(ctx, grid.nodes[iu], grid.nodes[ju], tol=tol)
    K = np.zeros((grid.n, grid.n))
    K[iu, ju] = values
    K[ju, iu] = values
    return K


def chaos_matrix(
    ctx: HurstContext,
    t: float,
    grid: QuadratureGrid,
    order: int = 8,
    tolerance: float = DEFAULT_MATRIX_TOLERANCE,
    row_block: int = 4096,
) -> SecondChaosMatrix:
    """Discrete proxy of L_t on a cell grid.

    The profile matrix is accumulated in row blocks of the time quadrature,
    so M = d(H) F^T F is positive semidefinite and exactly symmetric.
    """
    if grid.rule != "midpoint":
        raise DomainError("chaos_matrix needs a cell grid (rule 'midpoint')")
    if not t > 0:
        raise DomainError(f"chaos_matrix needs t > 0, got {t}")
    if grid.domain[1] < t:
        raise DomainError(f"grid ends at {grid.domain[1]} before t = {t}")

    edges = grid.edges
    active = int(np.searchsorted(edges, t, side="left"))
    u, w_u = time_quadrature(ctx, t, edges, order=order)
    scale = np.sqrt(grid.weights[:active])
    A = np.zeros((active, active))
    for start in range(0, u.size, row_block):
        stop = start + row_block
        F = cell_profiles(ctx, u[start:stop], edges[: active + 1])
        F *= np.sqrt(w_u[start:stop])[:, None] * scale[None, :]
        A += F.T @ F
    M = np.zeros((grid.n, grid.n))
    M[:active, :active] = ctx.dH * A
    M = 0.5 * (M + M.T)

    deficit = 1.0 - 2.0 * float(np.sum(M * M)) / t ** (2.0 * ctx.H)
    warnings: List[str] = []
    if abs(deficit) > tolerance:
        msg = f"grid too coarse at t={t:g}: 2||M||_F^2 / t^2H = {1.0 - deficit:.5f}"
        logger.warning(msg)
        warnings.append(msg)
    if grid.tail_mass_bound > tolerance * t ** (2.0 * ctx.H):
        warnings.append(f"tail mass bound {grid.tail_mass_bound:.3e} exceeds tolerance")
    logger.debug("chaos matrix t=%g: %d active cells, %d time nodes, deficit %.4e", t, active, u.size, deficit)
    return SecondChaosMatrix(t=float(t), M=M, grid=grid, H=ctx.H, warnings=tuple(warnings))


def chaos_matrices(ctx: HurstContext, partition: TimePartition, grid: QuadratureGrid, **kwargs) -> List[SecondChaosMatrix]:
    return [chaos_matrix(ctx, t, grid, **kwargs) for t in partition.positive_times]


def check_same_grid(matrices: Iterable[SecondChaosMatrix]) -> QuadratureGrid:
    matrices = list(matrices)
    if not matrices:
        raise GridMismatchError("no matrices given")
    grid = matrices[0].grid
    for mat in matrices[1:]:
        if mat.grid.fingerprint != grid.fingerprint:
            raise GridMismatchError(f"matrix for t={mat.t} was built on a different grid")
    return grid


def series_coefficients(
    M: SecondChaosMatrix,
    j_max: Optional[int] = None,
    coverage_target: float = DEFAULT_COVERAGE_TARGET,
) -> Spectrum:
    """Signed eigenvalues of M sorted by |lambda|; eigenvectors stay in node coordinates."""
    return spectrum_from_matrix(M.M, np.ones(M.grid.n), j_max, coverage_target, "abs", f"M_{M.t:g}")


def covariance_operator_matrix(M: SecondChaosMatrix, interval: Tuple[float, float] = (0.0, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """Discrete T on the cells inside `interval`, from T = B B* with B the operator of M.

    Returns the weight-folded matrix (the block of M^2) and the cell widths.
    """
    grid = M.grid
    lo, hi = interval
    idx = np.flatnonzero((grid.edges[:-1] >= lo) & (grid.edges[1:] <= hi))
    if idx.size == 0:
        raise DomainError(f"no grid cells inside {interval}")
    rows = M.M[idx, :]
    return rows @ rows.T, grid.weights[idx]


def rank_profile(
    kernel: KernelFn,
    sizes: Sequence[int],
    domain: Tuple[float, float] = (0.0, 1.0),
    threshold: float = RANK_THRESHOLD,
) -> Dict[int, int]:
    """Number of eigenvalues above threshold * lambda_max per grid size."""
    out: Dict[int, int] = {}
    for n in sizes:
        spec = nystrom_eig(kernel, build_grid(domain, int(n)))
        lam_max = float(np.max(np.abs(spec.eigenvalues))) if spec.n_modes else 0.0
        out[int(n)] = int(np.sum(spec.eigenvalues > threshold * lam_max)) if lam_max > 0 else 0
        logger.info("rank profile n=%d: %d eigenvalues above %.1e lambda_max", n, out[int(n)], threshold)
    return out


def empirical_decay(spectrum: Spectrum, start: int = 2, floor: float = 1e-12) -> Optional[float]:
    """Least-squares slope of log |lambda_j| against log j (reported only)."""
    lam = np.abs(spectrum.eigenvalues)
    if lam.size == 0:
        return None
    j = np.arange(1, lam.size + 1)
    keep = (j >= start) & (lam > floor * lam[0])
    if np.count_nonzero(keep) < 3:
        return None
    slope, _ = np.polyfit(np.log(j[keep]), np.log(lam[keep]), 1)
    return float(slope)


def spectrum_frame(spectrum: Spectrum) -> pd.DataFrame:
    lam = spectrum.eigenvalues
    total = spectrum.total_square
    cumulative = np.cumsum(lam ** 2) / total if total > 0 else np.zeros_like(lam)
    return pd.DataFrame({"index": np.arange(1, lam.size + 1), "eigenvalue": lam, "coverage": cumulative})


def spectrum_payload(spectrum: Spectrum, **extra: Any) -> Dict[str, Any]:
    payload = {
        "n_modes": spectrum.n_modes,
        "n_total": spectrum.n_total,
        "order": spectrum.order,
        "coverage": spectrum.coverage,
        "sum_squares": spectrum.total_square,
        "trace": spectrum.trace,
        "min_eigenvalue": float(spectrum.eigenvalues.min()) if spectrum.n_modes else None,
        "max_eigenvalue": float(spectrum.eigenvalues.max()) if spectrum.n_modes else None,
        "decay_slope": empirical_decay(spectrum),
        "warnings": list(spectrum.warnings),
    }
    payload.update(extra)
    return payload


__all__ = [
    "QuadratureGrid",
    "Spectrum",
    "SecondChaosMatrix",
    "build_grid",
    "build_line_grid",
    "spectrum_from_matrix",
    "kernel_matrix",
    "nystrom_eig",
    "derivative_covariance_matrix",
    "chaos_matrix",
    "chaos_matrices",
    "check_same_grid",
    "series_coefficients",
    "covariance_operator_matrix",
    "rank_profile",
    "empirical_decay",
    "spectrum_frame",
    "spectrum_payload",
]
