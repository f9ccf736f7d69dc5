"""Rosenblatt kernel, normalization constant and covariances.

Features:
- normalization constant d(H) through the log-Beta function
- pointwise kernel L_t(y1, y2) by a power-graded substitution that removes the
  endpoint singularity at u = max(y1, y2)
- cell averages of L_t, exact in the spatial variables and by graded Gauss
  quadrature in the time variable (the kernel is square-integrable but
  infinite on the diagonal 0 <= y1 = y2 < t)
- the process covariance and the covariance K(s, t) of the Gaussian field
  Y_s = I_1(L_1(s, .)) that drives the Malliavin derivative of Z_1
- a certified bound on the kernel mass lost by truncating the real line

Usage:
    from chaos_kernel import normalization_constant, kernel_value

    ctx = normalization_constant(0.75)
    kernel_value(ctx, 1.0, -0.5, 0.25).value

All functions are pure; nothing here holds mutable state.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import integrate, special

from errors import DomainError, NumericalError

logger = logging.getLogger("chaos_kernel")

DEFAULT_KERNEL_RTOL = 1e-10
DEFAULT_COVARIANCE_TOL = 1e-9


@dataclass(frozen=True)
class HurstContext:
    """Self-similarity index H with d(H) and B(H/2, 1-H)."""

    H: float
    dH: float
    betaH: float

    @property
    def a(self) -> float:
        # exponent H/2 of the fractional kernel (u - y)_+^{a-1}
        return self.H / 2.0

    def identity_residual(self) -> float:
        """Relative error of 2 d(H)^2 B^2 / (H(2H-1)) = 1."""
        H = self.H
        return abs(2.0 * self.dH ** 2 * self.betaH ** 2 / (H * (2.0 * H - 1.0)) - 1.0)


@dataclass(frozen=True)
class TimePartition:
    """0 = t_0 < t_1 < ... < t_m."""

    times: Tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) < 2:
            raise DomainError("a partition needs t_0 = 0 and at least one positive time")
        if times[0] != 0.0:
            raise DomainError(f"partition must start at t_0 = 0, got {times[0]}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DomainError(f"partition times must be strictly increasing: {times}")
        object.__setattr__(self, "times", times)

    @classmethod
    def from_positive(cls, times) -> "TimePartition":
        """Build from t_1 < ... < t_m (t_0 = 0 prepended)."""
        return cls((0.0,) + tuple(float(t) for t in times))

    @property
    def m(self) -> int:
        return len(self.times) - 1

    @property
    def positive_times(self) -> Tuple[float, ...]:
        return self.times[1:]

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(np.asarray(self.times))

    def scaled(self, factor: float) -> "TimePartition":
        if factor <= 0:
            raise DomainError(f"scale factor must be positive, got {factor}")
        return TimePartition(tuple(factor * t for t in self.times))


@dataclass(frozen=True)
class KernelEval:
    t: float
    y1: float
    y2: float
    value: float

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.value)


def normalization_constant(H: float) -> HurstContext:
    """Return the context for index H with d(H) = sqrt(H(2H-1)/2) / B(H/2, 1-H).

    The Beta value goes through log-Gamma so that H close to 1 (where 1-H is
    small and B is large) does not overflow.
    """
    H = float(H)
    if not math.isfinite(H) or not (0.5 < H < 1.0):
        raise DomainError(f"Hurst index must lie in the open interval (1/2, 1), got {H}")
    log_beta = float(special.betaln(H / 2.0, 1.0 - H))
    log_d = 0.5 * math.log(H * (2.0 * H - 1.0) / 2.0) - log_beta
    ctx = HurstContext(H=H, dH=math.exp(log_d), betaH=math.exp(log_beta))
    logger.debug("H=%.6g d(H)=%.12g B=%.12g", H, ctx.dH, ctx.betaH)
    return ctx


def beta_reduction(a: float, u: float, v: float) -> float:
    """Closed form of int (u-y)_+^{a-1} (v-y)_+^{a-1} dy = B(a, 1-2a) |u-v|^{2a-1}."""
    if not (0.0 < a < 0.5):
        raise DomainError(f"reduction needs 0 < a < 1/2, got {a}")
    if u == v:
        return math.inf
    return math.exp(float(special.betaln(a, 1.0 - 2.0 * a))) * abs(u - v) ** (2.0 * a - 1.0)


def kernel_value(ctx: HurstContext, t: float, y1: float, y2: float, rtol: float = DEFAULT_KERNEL_RTOL) -> KernelEval:
    """Evaluate L_t(y1, y2) = d(H) int_0^t (u-y1)_+^{H/2-1} (u-y2)_+^{H/2-1} du.

    With w = (u - max(y1, y2))^{H/2} the singular factor and the Jacobian
    cancel, leaving the bounded integrand (u - min(y1, y2))^{H/2-1} / (H/2).
    """
    if not t > 0:
        raise DomainError(f"kernel_value needs t > 0, got {t}")
    hi, lo = max(y1, y2), min(y1, y2)
    if hi >= t:
        return KernelEval(t, y1, y2, 0.0)
    if y1 == y2 and y1 >= 0.0:
        return KernelEval(t, y1, y2, math.inf)

    a = ctx.a
    start = max(hi, 0.0)
    w0 = (start - hi) ** a
    w1 = (t - hi) ** a

    def integrand(w: float) -> float:
        u = hi + w ** (1.0 / a)
        return (u - lo) ** (a - 1.0) / a

    points = None
    gap = hi - lo
    if gap > 0.0:
        knee = gap ** a
        if w0 < knee < w1:
            points = [knee]
    value, _ = integrate.quad(integrand, w0, w1, epsabs=0.0, epsrel=rtol, limit=200, points=points)
    return KernelEval(t, y1, y2, ctx.dH * value)


def _cell_profile(a: float, u, c0: float, c1: float):
    """Average of (u - y)_+^{a-1} over y in [c0, c1], exact."""
    u = np.asarray(u, dtype=float)
    return (np.maximum(u - c0, 0.0) ** a - np.maximum(u - c1, 0.0) ** a) / (a * (c1 - c0))


def cell_averaged_kernel(
    ctx: HurstContext,
    t: float,
    cell1: Tuple[float, float],
    cell2: Tuple[float, float],
    rtol: float = 1e-10,
) -> float:
    """Average of L_t over cell1 x cell2.

    The y-averages are exact, so only a one-dimensional u-integral of two
    bounded profiles remains; it is finite even when the cells coincide.
    """
    if not t > 0:
        raise DomainError(f"cell_averaged_kernel needs t > 0, got {t}")
    (a0, a1), (b0, b1) = cell1, cell2
    if not (a1 > a0 and b1 > b0):
        raise DomainError(f"cells must be finite nondegenerate intervals: {cell1}, {cell2}")
    a = ctx.a
    start = max(0.0, a0, b0)
    if start >= t:
        return 0.0
    kinks = sorted({e for e in (a0, a1, b0, b1) if start < e < t})

    def integrand(u: float) -> float:
        return float(_cell_profile(a, u, a0, a1) * _cell_profile(a, u, b0, b1))

    value, _ = integrate.quad(integrand, start, t, epsabs=0.0, epsrel=rtol, limit=400, points=kinks or None)
    return ctx.dH * value


@functools.lru_cache(maxsize=32)
def _graded_reference(order: int, exponent: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rule on [0, 1] pulled back through s -> s^exponent.

    The Jacobian exponent s^{exponent-1} goes into a Gauss-Jacobi weight, so the
    weights integrate constants exactly.
    """
    x, w = special.roots_jacobi(order, 0.0, exponent - 1.0)
    s = 0.5 * (x + 1.0)
    return s ** exponent, exponent * w / 2.0 ** exponent


def time_quadrature(ctx: HurstContext, t: float, breakpoints, order: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, t] with panels split at the given breakpoints.

    Every panel is graded toward its left end with exponent 2/H, which turns
    the (u - e)^{H/2} behaviour of the cell profiles into a linear one.
    """
    edges = np.unique(np.concatenate(([0.0, t], [b for b in breakpoints if 0.0 < b < t])))
    ref_x, ref_w = _graded_reference(order, 1.0 / ctx.a)
    left, width = edges[:-1], np.diff(edges)
    nodes = (left[:, None] + width[:, None] * ref_x[None, :]).ravel()
    weights = (width[:, None] * ref_w[None, :]).ravel()
    return nodes, weights


def cell_profiles(ctx: HurstContext, u, edges) -> np.ndarray:
    """Cell averages of (u - y)_+^{H/2-1}; rows follow u, columns the cells.

    With F = sqrt(w_u) * profiles on a time quadrature of [0, t], the matrix of
    cell averages of L_t is d(H) F^T F.
    """
    u = np.asarray(u, dtype=float)
    edges = np.asarray(edges, dtype=float)
    a = ctx.a
    powered = np.maximum(u[:, None] - edges[None, :], 0.0) ** a
    return (powered[:, :-1] - powered[:, 1:]) / (a * np.diff(edges)[None, :])


def process_covariance(ctx: HurstContext, s, t):
    """E[Z_s Z_t] = (|t|^{2H} + |s|^{2H} - |t-s|^{2H}) / 2."""
    H2 = 2.0 * ctx.H
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    out = 0.5 * (np.abs(t) ** H2 + np.abs(s) ** H2 - np.abs(t - s) ** H2)
    return float(out) if out.ndim == 0 else out


@functools.lru_cache(maxsize=16)
def _two_sided_graded_rule(order: int, left_levels: int, right_levels: int, ratio: float) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss rule on [0, 1], geometrically graded toward both ends."""
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    panels = []
    # toward 0 on [0, 1/2]
    edges = [0.5 * ratio ** k for k in range(left_levels + 1)] + [0.0]
    panels += list(zip(edges[1:], edges[:-1]))
    # toward 1 on [1/2, 1]
    edges = [1.0 - 0.5 * ratio ** k for k in range(right_levels + 1)] + [1.0]
    panels += list(zip(edges[:-1], edges[1:]))
    nodes = np.concatenate([lo + (hi - lo) * x for lo, hi in panels])
    weights = np.concatenate([(hi - lo) * w for lo, hi in panels])
    order_idx = np.argsort(nodes)
    return nodes[order_idx], weights[order_idx]


def _grading_levels(exponent: float, tol: float, ratio: float, cap: int = 80) -> int:
    # innermost panel of width ~ ratio^L carries mass ~ ratio^{L (exponent + 1)}
    levels = math.ceil(math.log(tol) / ((exponent + 1.0) * math.log(ratio)))
    return int(min(max(levels, 4), cap))


def derivative_covariance(ctx: HurstContext, s, t, tol: float = DEFAULT_COVARIANCE_TOL, order: int = 8, ratio: float = 0.15):
    """K(s, t) = <L_1(s, .), L_1(t, .)> for s, t in [0, 1].

    After the inner y-integral is reduced with the Beta identity,
    K = d^2 B(H/2, 1-H) int int (u-s)_+^{H/2-1} (v-t)_+^{H/2-1} |u-v|^{H-1} du dv.
    With s <= t the u-integral is done in closed form (a Beta value on [s, v]
    and an incomplete Beta, through 2F1, on [v, 1]); the remaining v-integral
    runs over a composite Gauss rule graded toward v = t, where the
    singularities u = s, v = t and u = v accumulate, and toward v = 1.
    Raises NumericalError, listing the (min, max) pairs, if any value is not finite.
    """
    s_arr, t_arr = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    if np.any((s_arr < 0) | (s_arr > 1) | (t_arr < 0) | (t_arr > 1)):
        raise DomainError("derivative_covariance is defined for s, t in [0, 1]")
    H, a = ctx.H, ctx.a
    lo = np.minimum(s_arr, t_arr).ravel()
    hi = np.maximum(s_arr, t_arr).ravel()
    out = np.zeros(lo.shape)
    live = hi < 1.0
    if not np.any(live):
        return out.reshape(s_arr.shape) if s_arr.ndim else 0.0

    left_levels = _grading_levels(2.0 * H - 2.0, tol, ratio)
    right_levels = _grading_levels(H, tol, ratio, cap=30)
    x, w = _two_sided_graded_rule(order, left_levels, right_levels, ratio)

    lo_l, hi_l = lo[live][:, None], hi[live][:, None]
    span = 1.0 - hi_l
    # offsets from hi and from 1 taken directly from the reference nodes, never as v - hi
    vx = span * x[None, :]
    one_minus_v = span * (1.0 - x[None, :])
    dv = span * w[None, :]
    delta = (hi_l - lo_l) + vx
    R = np.minimum(one_minus_v / (1.0 - lo_l), np.nextafter(1.0, 0.0))
    # Euler transform of the incomplete Beta: the (1 - R)^{1-a-H} factor cancels delta^{a+H-1}
    phi = (math.exp(float(special.betaln(a, H))) * delta ** (a + H - 1.0)
           + R ** H / H * (1.0 - lo_l) ** (a + H - 1.0) * special.hyp2f1(1.0 - a, 1.0, 1.0 + H, R))
    integrand = vx ** (a - 1.0) * phi
    out[live] = ctx.dH ** 2 * ctx.betaH * np.sum(integrand * dv, axis=1)
    bad = ~np.isfinite(out)
    if np.any(bad):
        points = list(zip(lo[bad].tolist(), hi[bad].tolist()))
        logger.error("non-finite derivative covariance at %d of %d points (H=%.4g)", len(points), out.size, H)
        raise NumericalError(f"derivative covariance is not finite at {len(points)} point(s) for H={H:.6g}", points)
    if s_arr.ndim == 0:
        return float(out[0])
    return out.reshape(s_arr.shape)


@functools.lru_cache(maxsize=64)
def _profile_energy_left(H: float) -> float:
    """int_{-inf}^0 G_1(z)^2 dz with G_1(z) = ((1-z)^{H/2} - (-z)^{H/2}) / (H/2)."""
    a = H / 2.0

    def g2(z: float) -> float:
        return ((1.0 - z) ** a - (-z) ** a) ** 2 / a ** 2

    near, _ = integrate.quad(g2, -1.0, 0.0, limit=200)
    far, _ = integrate.quad(g2, -np.inf, -1.0, limit=200)
    return near + far


def tail_mass_bound(ctx: HurstContext, t: float, lower: float) -> float:
    """Upper bound on the integral of L_t^2 over {y1 < lower} u {y2 < lower}.

    Uses L_t(y1, y2) <= d(H) |y1|^{H/2-1} G_t(y2) for y1 < 0, hence the
    one-sided far field decays like |lower|^{H-1}.
    """
    if not t > 0:
        raise DomainError(f"tail_mass_bound needs t > 0, got {t}")
    if lower >= 0:
        return 0.0
    H = ctx.H
    a = ctx.a
    g_energy = t ** (H + 1.0) * (1.0 / (a ** 2 * (H + 1.0)) + _profile_energy_left(H))
    one_sided = ctx.dH ** 2 * abs(lower) ** (H - 1.0) / (1.0 - H) * g_energy
    return 2.0 * one_sided


def auto_lower_limit(ctx: HurstContext, t: float, tolerance: float, cap: float = 1e290) -> float:
    """Truncation point whose tail bound, in E[Z_t^2] units, equals tolerance * t^{2H}."""
    if not (tolerance > 0):
        raise DomainError(f"tail tolerance must be positive, got {tolerance}")
    H = ctx.H
    # 2 * tail_mass_bound(ctx, 1, -l) = coef * l^{H-1}
    coef = 2.0 * tail_mass_bound(ctx, 1.0, -1.0)
    log_ell = math.log(coef / tolerance) / (1.0 - H)
    if log_ell > math.log(cap):
        logger.warning("tail tolerance %.3g unreachable for H=%.4g; truncating at -%.3g t", tolerance, H, cap)
        return -cap * t
    return -max(math.exp(log_ell), 1.0) * t


__all__ = [
    "HurstContext",
    "TimePartition",
    "KernelEval",
    "normalization_constant",
    "beta_reduction",
    "kernel_value",
    "cell_averaged_kernel",
    "time_quadrature",
    "cell_profiles",
    "process_covariance",
    "derivative_covariance",
    "tail_mass_bound",
    "auto_lower_limit",
]
