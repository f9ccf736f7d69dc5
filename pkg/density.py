"""Densities of second-chaos variables and tail diagnostics.

Features:
- characteristic function of sum_j lambda_j (N_j^2 - 1) (plus an optional
  independent Gaussian remainder) through summed principal half-logs
- density and density derivatives by trapezoidal Fourier inversion
- Gaussian KDE with Silverman / Scott bandwidths
- tail fits of log P(|X| / sigma >= t) on t >= 2, joint tail checks for
  increment vectors, and the fitted bound |p^(n)(z)| <= C exp(-c z) with
  out-of-window validation plus the self-similarity reduction of densities

Usage:
    curve = cf_inversion(spectrum, 0, np.linspace(-3, 8, 1001))
    est = kde(batch.values[:, 0], x_grid=curve.x_grid)
    sup_difference(curve, est, central_region(curve))
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import special

from chaos_kernel import TimePartition
from errors import DomainError, InsufficientModesError, TailFitError
from spectral import Spectrum

logger = logging.getLogger("density")

CF_TAIL_TOL = 1e-10
MODE_FLOOR = 1e-13
MAX_THETA_POINTS = 1 << 20
TAIL_LOG_SPAN = math.log(1e12)
MIN_KDE_SAMPLES = 1000
DEFAULT_GRID_LEN = 512


@dataclass(frozen=True, eq=False)
class DensityCurve:
    x_grid: np.ndarray
    values: np.ndarray
    derivative_order: int
    method: str
    coverage: Optional[float] = None
    bandwidth: Optional[float] = None
    warnings: Tuple[str, ...] = ()
    imag_residue: Optional[float] = None

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.x_grid))

    def moment(self, k: int) -> float:
        return float(np.trapezoid(self.x_grid ** k * self.values, self.x_grid))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.x_grid, "value": self.values})

    def header(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "derivative_order": self.derivative_order,
            "n_points": int(self.x_grid.size),
            "x_range": [float(self.x_grid[0]), float(self.x_grid[-1])],
            "integral": self.integral(),
            "coverage": self.coverage,
            "bandwidth": self.bandwidth,
            "warnings": list(self.warnings),
            "imag_residue": self.imag_residue,
        }


def _modes(spectrum: Union[Spectrum, Sequence[float], np.ndarray]) -> Tuple[np.ndarray, Optional[float]]:
    if isinstance(spectrum, Spectrum):
        lam, coverage = spectrum.eigenvalues, spectrum.coverage
    else:
        lam, coverage = np.asarray(spectrum, dtype=float), None
    if lam.size == 0 or not np.any(lam):
        return np.zeros(0), coverage
    keep = np.abs(lam) > MODE_FLOOR * np.abs(lam).max()
    return lam[keep], coverage


def log_characteristic_function(theta, eigenvalues, remainder_variance: float = 0.0, block: int = 4096) -> np.ndarray:
    """log E exp(i theta X) for X = sum_j lambda_j (N_j^2 - 1) + sigma_r G.

    Each factor 1 - 2 i theta lambda_j has real part 1, so summing principal
    logarithms never crosses the branch cut.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lam = np.asarray(eigenvalues, dtype=float)
    out = np.empty(theta.shape, dtype=complex)
    for start in range(0, theta.size, block):
        th = theta[start:start + block, None]
        z = 2j * th * lam[None, :]
        out[start:start + block] = np.sum(-0.5 * np.log1p(-z) - 0.5 * z, axis=1)
    return out - 0.5 * remainder_variance * theta ** 2


def characteristic_function(theta, eigenvalues, remainder_variance: float = 0.0) -> np.ndarray:
    return np.exp(log_characteristic_function(theta, eigenvalues, remainder_variance))


def effective_support(eigenvalues, remainder_variance: float = 0.0) -> Tuple[float, float]:
    """Interval outside which the density is below ~1e-12 of its scale."""
    lam = np.asarray(eigenvalues, dtype=float)
    sd = math.sqrt(2.0 * float(np.sum(lam ** 2)) + remainder_variance)
    pos, neg = lam[lam > 0], lam[lam < 0]
    g = 10.0 * math.sqrt(remainder_variance)
    hi = 10.0 * sd + (2.0 * pos.max() * TAIL_LOG_SPAN if pos.size else 0.0) + g
    if neg.size:
        lo = -(10.0 * sd + 2.0 * abs(neg.min()) * TAIL_LOG_SPAN) - g
    else:
        lo = -float(np.sum(pos)) - g
    return lo, hi


def cf_inversion(
    spectrum: Union[Spectrum, Sequence[float], np.ndarray],
    n: int,
    x_grid,
    remainder_variance: float = 0.0,
    tail_tol: float = CF_TAIL_TOL,
) -> DensityCurve:
    """n-th derivative of the density by inverting the characteristic function.

    p^(n)(x) = (1/pi) Re int_0^inf (-i theta)^n exp(-i theta x) phi(theta) dtheta,
    trapezoid on theta = k * dtheta. dtheta = pi / W for W the effective support
    width, so the implied periodization has period 2W; theta_max doubles until
    (theta sd)^n |phi(theta)| < tail_tol, a criterion that commutes with
    rescaling the spectrum.
    """
    if n < 0:
        raise DomainError(f"derivative order must be nonnegative, got {n}")
    lam, coverage = _modes(spectrum)
    if lam.size == 0 and remainder_variance <= 0:
        raise DomainError("cf_inversion needs a spectrum with nonzero sum of squares")
    if remainder_variance <= 0 and lam.size <= 2 * (n + 1):
        raise InsufficientModesError(lam.size, n)

    x = np.asarray(x_grid, dtype=float)
    sd = math.sqrt(2.0 * float(np.sum(lam ** 2)) + remainder_variance)
    lo, hi = effective_support(lam, remainder_variance)
    width = max(hi - lo, float(np.ptp(x)) if x.size else 0.0, abs(hi), abs(lo))
    dtheta = math.pi / width

    warnings: List[str] = []
    theta_max = 1.0 / sd
    while True:
        envelope = (theta_max * sd) ** n * abs(characteristic_function(theta_max, lam, remainder_variance)[0])
        if envelope < tail_tol:
            break
        if theta_max / dtheta > MAX_THETA_POINTS:
            msg = f"cf tail {envelope:.2e} above {tail_tol:.0e} at the theta budget; accuracy insufficient for n={n}"
            logger.warning(msg)
            warnings.append(msg)
            break
        theta_max *= 2.0

    k = int(math.ceil(theta_max / dtheta))
    theta = dtheta * np.arange(k + 1)
    weights = np.full(k + 1, dtheta)
    weights[0] *= 0.5
    phi = characteristic_function(theta, lam, remainder_variance)
    kernel = weights * (-1j * theta) ** n * phi
    # the theta < 0 half, evaluated on its own; the two halves are complex conjugates
    mirror = weights * (1j * theta) ** n * characteristic_function(-theta, lam, remainder_variance)
    values = np.empty(x.shape)
    residue = 0.0
    for start in range(0, x.size, 256):
        xs = x[start:start + 256]
        both = (np.exp(-1j * np.outer(xs, theta)) @ kernel + np.exp(1j * np.outer(xs, theta)) @ mirror) / (2.0 * math.pi)
        values[start:start + 256] = both.real
        residue = max(residue, float(np.max(np.abs(both.imag))) if xs.size else 0.0)
    logger.debug("cf inversion: J=%d n=%d theta_max=%.4g points=%d imag residue %.2e", lam.size, n, theta_max, k + 1, residue)
    return DensityCurve(x, values, n, "cf_inversion", coverage=coverage, warnings=tuple(warnings), imag_residue=residue)


def bw_silverman(x: np.ndarray) -> float:
    x_std = float(np.std(x))
    q75, q25 = np.percentile(x, [75, 25])
    a = min(x_std, (q75 - q25) / 1.34) if q75 > q25 else x_std
    return 0.9 * a * len(x) ** (-0.2)


def bw_scott(x: np.ndarray) -> float:
    return 1.06 * float(np.std(x)) * len(x) ** (-0.2)


BANDWIDTH_RULES = {"silverman": bw_silverman, "scott": bw_scott}


KDE_COVERAGE_WARN = 0.999


def kde(
    samples,
    x_grid=None,
    bandwidth: Union[str, float] = "silverman",
    grid_len: int = DEFAULT_GRID_LEN,
    block: int = 8192,
) -> DensityCurve:
    """Gaussian kernel density estimate on a grid.

    The trapezoid mass is matched to the kernel mass that falls inside the
    grid, so a grid narrower than the data keeps its pointwise values and
    reports the missing mass in `coverage` and `warnings`.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < MIN_KDE_SAMPLES:
        raise DomainError(f"kde needs at least {MIN_KDE_SAMPLES} samples, got {x.size}")
    if not np.ptp(x) > 0:
        raise DomainError("kde input has zero variance")
    if isinstance(bandwidth, str):
        if bandwidth not in BANDWIDTH_RULES:
            raise DomainError(f"unknown bandwidth rule {bandwidth!r}; use one of {sorted(BANDWIDTH_RULES)}")
        bw = BANDWIDTH_RULES[bandwidth](x)
    else:
        bw = float(bandwidth)
    if not bw > 0:
        raise DomainError(f"bandwidth must be positive, got {bw}")

    grid = np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, grid_len) if x_grid is None else np.asarray(x_grid, dtype=float)
    dens = np.zeros(grid.shape)
    inside = 0.0
    for start in range(0, x.size, block):
        chunk = x[start:start + block]
        z = (grid[:, None] - chunk[None, :]) / bw
        dens += np.exp(-0.5 * z * z).sum(axis=1)
        inside += float(np.sum(special.ndtr((grid[-1] - chunk) / bw) - special.ndtr((grid[0] - chunk) / bw)))
    dens /= x.size * bw * math.sqrt(2.0 * math.pi)
    coverage = inside / x.size
    mass = float(np.trapezoid(dens, grid))
    if mass > 0:
        dens *= coverage / mass
    warnings: Tuple[str, ...] = ()
    if coverage < KDE_COVERAGE_WARN:
        warnings = (f"grid [{grid[0]:.4g}, {grid[-1]:.4g}] holds only {coverage:.4f} of the kernel mass",)
        logger.warning("kde: %s", warnings[0])
    return DensityCurve(grid, dens, 0, "kde", coverage=coverage, bandwidth=bw, warnings=warnings)


def central_region(curve: DensityCurve, mass: float = 0.99) -> Tuple[float, float]:
    """Equal-tailed interval holding `mass` of a density curve."""
    x, p = curve.x_grid, np.clip(curve.values, 0.0, None)
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))))
    cdf /= cdf[-1]
    tail = 0.5 * (1.0 - mass)
    return float(np.interp(tail, cdf, x)), float(np.interp(1.0 - tail, cdf, x))


def sup_difference(curve_a: DensityCurve, curve_b: DensityCurve, region: Optional[Tuple[float, float]] = None) -> float:
    """max |a - b| over region, with b interpolated onto a's grid."""
    x = curve_a.x_grid
    mask = np.ones(x.shape, dtype=bool) if region is None else (x >= region[0]) & (x <= region[1])
    b = np.interp(x[mask], curve_b.x_grid, curve_b.values)
    return float(np.max(np.abs(curve_a.values[mask] - b)))


@dataclass
class TailFitReport:
    sigma: float
    thresholds: List[float]
    log_survival: List[float]
    fitted_c: float
    intercept: float
    r_squared: float
    curvature: float
    superlinear: bool
    usable_t_max: float
    n_samples: Optional[int] = None


def _survival_from_samples(z: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    s = np.sort(z)
    return (s.size - np.searchsorted(s, thresholds, side="left")) / s.size


def _survival_from_curve(curve: DensityCurve, sigma: float, thresholds: np.ndarray) -> np.ndarray:
    x, p = curve.x_grid, np.clip(curve.values, 0.0, None)
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))))
    total = cdf[-1]
    inside = np.interp(thresholds * sigma, x, cdf) - np.interp(-thresholds * sigma, x, cdf)
    return np.clip(1.0 - inside / total, 0.0, None)


def tail_fit(
    data: Union[np.ndarray, DensityCurve],
    sigma: Optional[float] = None,
    t_max: Optional[float] = None,
    t_min: float = 2.0,
    n_points: int = 21,
    min_exceedances: int = 10,
) -> TailFitReport:
    """Least-squares fit log P(|X| / sigma >= t) = b - c t on [t_min, t_max].

    sigma defaults to the L2 norm (E X^2)^{1/2} of the data. The quadratic
    coefficient of a second fit flags tails steeper than exponential.
    """
    if t_min < 2.0:
        raise DomainError(f"tail thresholds start at t >= 2, got {t_min}")
    if isinstance(data, DensityCurve):
        if sigma is None:
            sigma = math.sqrt(data.moment(2) / data.integral())
        scan = np.linspace(t_min, max(t_min + 1.0, float(np.max(np.abs(data.x_grid))) / sigma), 400)
        surv_scan = _survival_from_curve(data, sigma, scan)
        floor, n_samples = 1e-12, None
    else:
        x = np.asarray(data, dtype=float).ravel()
        if sigma is None:
            sigma = math.sqrt(float(np.mean(x ** 2)))
        z = np.abs(x) / sigma
        scan = np.linspace(t_min, max(t_min + 1.0, float(z.max())), 400)
        surv_scan = _survival_from_samples(z, scan)
        floor, n_samples = min_exceedances / x.size, int(x.size)

    usable = scan[surv_scan >= floor]
    usable_t_max = float(usable.max()) if usable.size else t_min
    if usable_t_max <= t_min:
        raise TailFitError(f"fewer than the required exceedances beyond t = {t_min}", usable_t_max)
    if t_max is None:
        t_max = usable_t_max
    elif t_max > usable_t_max + 1e-12:
        raise TailFitError(f"t_max = {t_max} beyond the observable range", usable_t_max)

    thresholds = np.linspace(t_min, t_max, n_points)
    if isinstance(data, DensityCurve):
        surv = _survival_from_curve(data, sigma, thresholds)
    else:
        surv = _survival_from_samples(z, thresholds)
    log_s = np.log(surv)
    slope, intercept = np.polyfit(thresholds, log_s, 1)
    fitted = slope * thresholds + intercept
    ss_res = float(np.sum((log_s - fitted) ** 2))
    ss_tot = float(np.sum((log_s - log_s.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    curvature = float(np.polyfit(thresholds, log_s, 2)[0])
    # bend of more than a quarter nat across the window
    superlinear = curvature < 0 and abs(curvature) * (t_max - t_min) ** 2 > 0.25
    if superlinear:
        logger.info("tail fit: log-survival bends downward (quadratic coefficient %.3g)", curvature)
    return TailFitReport(
        sigma=float(sigma),
        thresholds=thresholds.tolist(),
        log_survival=log_s.tolist(),
        fitted_c=float(-slope),
        intercept=float(intercept),
        r_squared=float(r2),
        curvature=curvature,
        superlinear=bool(superlinear),
        usable_t_max=usable_t_max,
        n_samples=n_samples,
    )


def joint_tail_check(
    values: np.ndarray,
    partition: TimePartition,
    H: float,
    multipliers: Sequence[float] = (2.0, 2.5, 3.0),
) -> Dict[str, Any]:
    """Empirical P(|dZ_j| >= k spacing_j^H for all j) against the product of marginal fits."""
    values = np.asarray(values, dtype=float)
    scales = partition.spacings ** H
    fits = [tail_fit(values[:, j], sigma=float(scales[j])) for j in range(partition.m)]
    c = min(f.fitted_c for f in fits)
    prefactor = float(np.exp(sum(f.intercept for f in fits)))
    rows = []
    for k in multipliers:
        hit = np.all(np.abs(values) >= k * scales[None, :], axis=1)
        empirical = float(np.mean(hit))
        bound = prefactor * math.exp(-c * k * partition.m)
        rows.append({"multiplier": k, "empirical": empirical, "product_bound": bound,
                     "within_bound": empirical <= bound, "exceedances": int(hit.sum())})
    return {"fitted_c": c, "prefactor": prefactor, "marginal_c": [f.fitted_c for f in fits], "rows": rows}


@dataclass
class BoundFitReport:
    n: int
    z_range: Tuple[float, float]
    z_mid: float
    fitted_C: float
    fitted_c: float
    c_least_squares: float
    max_violation: float
    scaling_error: float
    scaling_times: List[float] = field(default_factory=list)
    passed: bool = False
    warnings: List[str] = field(default_factory=list)


def scaling_identity_error(
    spectrum: Spectrum,
    n: int,
    H: float,
    t: float,
    z: np.ndarray,
    remainder_variance: float = 0.0,
) -> float:
    """max |p_t^(n)(t^H z) - t^{-H(1+n)} p_1^(n)(z)| / max |p_1^(n)|.

    The time-t spectrum is t^H times the time-one spectrum.
    """
    scale = t ** H
    base = cf_inversion(spectrum, n, z, remainder_variance)
    at_t = cf_inversion(spectrum.scaled(scale), n, scale * z, remainder_variance * scale ** 2)
    ref = scale ** (-(1.0 + n)) * base.values
    return float(np.max(np.abs(at_t.values - ref)) / max(np.max(np.abs(ref)), 1e-300))


def density_bound_check(
    spectrum: Spectrum,
    n: int,
    H: float,
    times: Sequence[float] = (0.5, 1.0, 2.0),
    z_max: float = 8.0,
    z_mid: Optional[float] = None,
    shrink: float = 0.8,
    n_points: int = 121,
    remainder_variance: float = 0.0,
    resolution: float = 100 * CF_TAIL_TOL,
) -> BoundFitReport:
    """Check |p^(n)(z)| <= C exp(-c z) on [2, z_max] for Z_1, and the t-scaling.

    c is the least-squares decay rate on [2, z_mid] times `shrink`, C the
    smallest prefactor covering the fit window; the bound is then tested on
    (z_mid, z_max] where values below `resolution` are treated as zero.
    """
    z_mid = 0.5 * (2.0 + z_max) if z_mid is None else z_mid
    if not (2.0 < z_mid < z_max):
        raise DomainError(f"need 2 < z_mid < z_max, got z_mid={z_mid}, z_max={z_max}")
    z = np.linspace(2.0, z_max, n_points)
    curve = cf_inversion(spectrum, n, z, remainder_variance)
    if curve.warnings:
        raise DomainError(f"cf accuracy insufficient for derivative order {n}: {curve.warnings[0]}")
    mag = np.abs(curve.values)

    fit = z <= z_mid
    usable = fit & (mag > resolution)
    if np.count_nonzero(usable) < 3:
        raise DomainError("too few resolvable density values in the fit window")
    slope, _ = np.polyfit(z[usable], np.log(mag[usable]), 1)
    c_ls = float(-slope)
    c = shrink * c_ls
    C = float(np.max(mag[fit] * np.exp(c * z[fit])))
    check = (~fit) & (mag > resolution)
    excess = mag[check] - C * np.exp(-c * z[check])
    max_violation = float(excess.max()) if excess.size else 0.0

    scaling = [scaling_identity_error(spectrum, n, H, t, z, remainder_variance) for t in times]
    warnings: List[str] = []
    if c <= 0:
        warnings.append(f"fitted decay rate {c:.4g} is not positive")
    passed = c > 0 and C > 0 and max_violation <= 0.0
    logger.info("bound fit n=%d: c=%.4g C=%.4g max_violation=%.3e scaling=%.2e", n, c, C, max_violation, max(scaling))
    return BoundFitReport(
        n=n,
        z_range=(2.0, float(z_max)),
        z_mid=float(z_mid),
        fitted_C=C,
        fitted_c=float(c),
        c_least_squares=c_ls,
        max_violation=max_violation,
        scaling_error=float(max(scaling)),
        scaling_times=[float(t) for t in times],
        passed=bool(passed),
        warnings=warnings,
    )


__all__ = [
    "DensityCurve",
    "log_characteristic_function",
    "characteristic_function",
    "effective_support",
    "cf_inversion",
    "bw_silverman",
    "bw_scott",
    "kde",
    "central_region",
    "sup_difference",
    "TailFitReport",
    "tail_fit",
    "joint_tail_check",
    "BoundFitReport",
    "scaling_identity_error",
    "density_bound_check",
]
