"""Malliavin derivatives, Gram matrices and determinant diagnostics.

Features:
- derivative vectors D(Z_{t_j} - Z_{t_{j-1}}) = 2 (M_{t_j} - M_{t_{j-1}}) xi
  in node coordinates (the H inner product is the plain dot product because
  the cell weights are folded into M)
- Gram matrix, direct determinant and the projection factorization
  det = ||D_1||^2 prod_j ||D_j - proj(D_j)||^2 by modified Gram-Schmidt
- positivity census, negative moments with bootstrap intervals, stability
  ratio and heavy-tail guard, chi-square closed forms
- scaling diagnostics (KS tests on log det and on residual norms), quantile
  domination of normalized residuals, Sobolev-type norms and their scaling

Usage:
    report = malliavin_batch(matrices, n_samples=10_000, seed=1)
    census = positivity_census(report.det_proj, report.gram)
    negative_moment(report.dz1_full, p=1, target="dz1_norm")
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, special, stats

from chaos_kernel import TimePartition
from errors import DomainError, GridMismatchError, PartialBatchError
from sampler import DEFAULT_BLOCK_SIZE, block_generator, group_blocks, increments_from_levels, iter_blocks
from spectral import SecondChaosMatrix, check_same_grid

logger = logging.getLogger("malliavin")

REORTHOGONALIZE_BELOW = 1e-6
HEAVY_TAIL_SHARE = 0.10
DEFAULT_BOOTSTRAP = 200
DEFAULT_QUANTILES = (0.01, 0.05, 0.1)


def malliavin_derivatives(matrices: Sequence[SecondChaosMatrix], xi: np.ndarray) -> np.ndarray:
    """Increment derivatives, shape (..., m, n) for xi of shape (..., n)."""
    grid = check_same_grid(matrices)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != grid.n:
        raise GridMismatchError(f"noise dimension {xi.shape[-1]} does not match grid size {grid.n}")
    level_derivs = np.stack([2.0 * (xi @ mat.M) for mat in matrices], axis=-2)
    return np.diff(level_derivs, axis=-2, prepend=np.zeros(level_derivs.shape[:-2] + (1, grid.n)))


def gram_matrix(derivatives: np.ndarray) -> np.ndarray:
    D = np.asarray(derivatives, dtype=float)
    G = np.einsum("...in,...jn->...ij", D, D)
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def det_via_projections(derivatives: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Determinant of the Gram matrix as a product of squared Gram-Schmidt residuals.

    Vectorized over leading axes. A residual that shrinks below 1e-6 of the
    vector's own norm is orthogonalized a second time.
    """
    D = np.asarray(derivatives, dtype=float)
    m = D.shape[-2]
    basis: List[np.ndarray] = []
    residuals = np.zeros(D.shape[:-1])
    for j in range(m):
        v = D[..., j, :].copy()
        original = np.einsum("...n,...n->...", v, v)
        for q in basis:
            v -= np.einsum("...n,...n->...", q, v)[..., None] * q
        r = np.einsum("...n,...n->...", v, v)
        weak = r < (REORTHOGONALIZE_BELOW ** 2) * original
        if basis and np.any(weak):
            w = v.copy()
            for q in basis:
                w -= np.einsum("...n,...n->...", q, w)[..., None] * q
            v = np.where(weak[..., None], w, v)
            r = np.einsum("...n,...n->...", v, v)
        residuals[..., j] = r
        norm = np.sqrt(r)
        with np.errstate(divide="ignore", invalid="ignore"):
            basis.append(np.where(norm[..., None] > 0, v / norm[..., None], 0.0))
    return np.prod(residuals, axis=-1), residuals


@dataclass(frozen=True, eq=False)
class MalliavinReport:
    """Per-sample Malliavin quantities of one batch."""

    partition: TimePartition
    H: float
    seed: int
    values: np.ndarray
    gram: np.ndarray
    det_direct: np.ndarray
    det_proj: np.ndarray
    residual_norms: np.ndarray
    dz1_full: np.ndarray
    dz1_restricted: np.ndarray
    restricted_to: Tuple[float, float]
    frobenius2: Tuple[float, ...] = ()

    @property
    def n_samples(self) -> int:
        return int(self.det_proj.shape[0])

    def factorization_error(self) -> np.ndarray:
        """Per-sample |det_proj - det_direct| / |det_direct|."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.abs(self.det_proj - self.det_direct) / np.abs(self.det_direct)

    def det_quantiles(self, qs: Sequence[float] = (0.001, 0.01, 0.1, 0.5, 0.9)) -> Dict[str, float]:
        if self.n_samples == 0:
            return {}
        return {f"q{q:g}": float(np.quantile(self.det_proj, q)) for q in qs}

    def frame(self) -> pd.DataFrame:
        m = self.partition.m
        data: Dict[str, Any] = {"det": self.det_proj, "det_direct": self.det_direct}
        for j in range(m):
            data[f"residual_{j + 1}"] = self.residual_norms[:, j]
        data["dz1_norm2"] = self.dz1_full
        data["dz1_norm2_restricted"] = self.dz1_restricted
        return pd.DataFrame(data)

    def payload(self, moment_reports=(), census=None, ks_reports=(), **extra) -> Dict[str, Any]:
        out = {
            "partition": list(self.partition.times),
            "H": self.H,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "det_quantiles": self.det_quantiles(),
            "factorization_max_rel_error": float(np.max(self.factorization_error())) if self.n_samples else None,
            "restricted_to": list(self.restricted_to),
            "moment_reports": [asdict(r) for r in moment_reports],
            "positivity_census": census,
            "ks_reports": [asdict(r) for r in ks_reports],
        }
        out.update(extra)
        return out


def _block_quantities(matrices, seed, block, rows, dimension, restrict_mask):
    xi = block_generator(seed, "xi", block).standard_normal((rows, dimension))
    D = malliavin_derivatives(matrices, xi)
    # xi^T M_j xi - tr M_j, with M_j xi = (level derivative) / 2
    traces = np.array([np.trace(mat.M) for mat in matrices])
    levels = 0.5 * np.einsum("rn,rjn->rj", xi, np.cumsum(D, axis=1)) - traces
    G = gram_matrix(D)
    det_direct = np.linalg.det(G)
    det_proj, residuals = det_via_projections(D)
    d1 = D[:, 0, :]
    full = np.einsum("rn,rn->r", d1, d1)
    restricted = np.einsum("rn,rn->r", d1[:, restrict_mask], d1[:, restrict_mask])
    return increments_from_levels(levels), G, det_direct, det_proj, residuals, full, restricted


def malliavin_batch(
    matrices: Sequence[SecondChaosMatrix],
    n_samples: int,
    seed: int,
    block_size: int = DEFAULT_BLOCK_SIZE,
    chunks: int = 1,
    threads: int = 1,
    restrict_to: Optional[Tuple[float, float]] = None,
) -> MalliavinReport:
    """Per-sample derivatives, Gram matrices and determinants.

    Noise comes from the same "xi" stream as the sampler, so `values` agree
    with the uncompensated sampler output (same seed and block size) up to
    rounding.
    The restricted norm keeps cells inside [0, t_1] unless told otherwise.
    """
    matrices = list(matrices)
    grid = check_same_grid(matrices)
    partition = TimePartition.from_positive([mat.t for mat in matrices])
    m = partition.m
    lo, hi = restrict_to if restrict_to is not None else (0.0, partition.times[1])
    restrict_mask = (grid.edges[:-1] >= lo) & (grid.edges[1:] <= hi)

    blocks = list(iter_blocks(n_samples, block_size))
    groups = group_blocks(blocks, chunks)
    logger.info("malliavin batch: %d samples, m=%d, n=%d, %d blocks", n_samples, m, grid.n, len(blocks))

    def run_group(group):
        return [_block_quantities(matrices, seed, b, rows, grid.n, restrict_mask) for b, rows in group]

    parts: List[Tuple[np.ndarray, ...]] = []
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        futures = [pool.submit(run_group, g) for g in groups]
        for fut in futures:
            try:
                parts.extend(fut.result())
            except MemoryError as exc:
                completed = int(sum(p[0].shape[0] for p in parts))
                for pending in futures:
                    pending.cancel()
                raise PartialBatchError(f"out of memory after {completed} samples", completed) from exc

    if parts:
        cols = [np.concatenate([p[k] for p in parts], axis=0) for k in range(7)]
    else:
        cols = [np.zeros((0, m)), np.zeros((0, m, m)), np.zeros(0), np.zeros(0), np.zeros((0, m)), np.zeros(0), np.zeros(0)]
    values, G, det_direct, det_proj, residuals, full, restricted = cols
    return MalliavinReport(
        partition=partition,
        H=matrices[0].H,
        seed=seed,
        values=values,
        gram=G,
        det_direct=det_direct,
        det_proj=det_proj,
        residual_norms=residuals,
        dz1_full=full,
        dz1_restricted=restricted,
        restricted_to=(float(lo), float(hi)),
        frobenius2=tuple(mat.frobenius2 for mat in matrices),
    )


def positivity_census(
    dets: np.ndarray,
    gram: Optional[np.ndarray] = None,
    eps_rel: float = 1e-14,
    epsilon: Optional[float] = None,
) -> Dict[str, Any]:
    """Count determinants at or below the positivity threshold.

    The threshold is `epsilon` when given, otherwise eps_rel times the
    Hadamard bound prod_j Gamma_jj of each sample (eps_rel alone without Gram).
    """
    dets = np.asarray(dets, dtype=float)
    if epsilon is not None:
        threshold = np.full(dets.shape, float(epsilon))
        rule = "absolute"
    elif gram is not None:
        threshold = eps_rel * np.prod(np.diagonal(gram, axis1=-2, axis2=-1), axis=-1)
        rule = "relative_hadamard"
    else:
        threshold = np.full(dets.shape, eps_rel)
        rule = "absolute"
    violations = int(np.count_nonzero(dets <= threshold))
    if violations:
        logger.warning("positivity census: %d of %d determinants at or below threshold", violations, dets.size)
    return {
        "n": int(dets.size),
        "violations": violations,
        "fraction": violations / dets.size if dets.size else 0.0,
        "rule": rule,
        "eps": float(epsilon) if epsilon is not None else eps_rel,
        "min_det": float(dets.min()) if dets.size else None,
    }


@dataclass
class MomentReport:
    p: float
    target: str
    estimate: float
    half_width: float
    stability_ratio: float
    max_share: float
    n_samples: int
    stable: bool
    warnings: List[str] = field(default_factory=list)


def negative_moment(
    values: np.ndarray,
    p: float,
    target: str = "det",
    n_boot: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
    confidence: float = 0.95,
) -> MomentReport:
    """Empirical E[target^{-p}] with a percentile bootstrap interval.

    `values` are determinants or squared derivative norms. The stability
    ratio compares the estimate on all samples with the one on the first half.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise DomainError("negative_moment needs at least two samples")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise DomainError(f"negative moment of {target}: {int(np.count_nonzero(v <= 0))} nonpositive values")
    terms = v ** (-float(p))
    estimate = float(terms.mean())
    half = float(terms[: v.size // 2].mean())
    share = float(terms.max() / terms.sum())

    rng = block_generator(seed, "bootstrap", 0)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        boots[b] = terms[rng.integers(0, terms.size, terms.size)].mean()
    alpha = 0.5 * (1.0 - confidence)
    lo, hi = np.quantile(boots, [alpha, 1.0 - alpha])

    warnings: List[str] = []
    stable = share <= HEAVY_TAIL_SHARE
    if not stable:
        msg = f"E[{target}^-{p:g}]: one sample carries {share:.1%} of the sum"
        logger.warning(msg)
        warnings.append(msg)
    return MomentReport(
        p=float(p),
        target=target,
        estimate=estimate,
        half_width=float(0.5 * (hi - lo)),
        stability_ratio=estimate / half,
        max_share=share,
        n_samples=int(v.size),
        stable=stable,
        warnings=warnings,
    )


def chi2_negative_moment(N: int, p: float, scale: float = 1.0) -> float:
    """E[(scale * X)^{-p}] for X ~ chi-square(N); infinite unless N > 2p."""
    if N <= 2 * p:
        return math.inf
    log_value = special.gammaln(N / 2.0 - p) - special.gammaln(N / 2.0) - p * math.log(2.0) - p * math.log(scale)
    return float(math.exp(log_value))


def chi2_surrogate_check(p: int, lam: float = 1.0) -> Dict[str, float]:
    """Closed form for 4 lam chi2(2p+1) against direct quadrature of its law."""
    N = 2 * p + 1
    scale = 4.0 * lam
    closed = chi2_negative_moment(N, p, scale)
    numeric, _ = integrate.quad(lambda x: (scale * x) ** (-p) * stats.chi2.pdf(x, N), 0.0, np.inf, limit=200)
    return {"N": N, "p": p, "scale": scale, "closed_form": closed, "quadrature": numeric,
            "rel_error": abs(closed - numeric) / closed}


@dataclass
class KSReport:
    label: str
    statistic: float
    pvalue: float
    n_a: int
    n_b: int


def ks_report(label: str, a: np.ndarray, b: np.ndarray) -> KSReport:
    res = stats.ks_2samp(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return KSReport(label, float(res.statistic), float(res.pvalue), int(np.size(a)), int(np.size(b)))


def scaling_check(
    reference: MalliavinReport,
    scaled: MalliavinReport,
    scale: float,
) -> List[KSReport]:
    """KS comparison of the batch at a * partition against the batch at partition.

    Under self-similarity det Gamma scales by a^{2Hm} and each squared
    residual by a^{2H}.
    """
    if reference.n_samples != scaled.n_samples:
        raise DomainError("scaling_check needs equal sample counts")
    H, m = reference.H, reference.partition.m
    shift = math.log(scale)
    out = [ks_report(
        f"log_det a={scale:g}",
        np.log(scaled.det_proj) - 2.0 * H * m * shift,
        np.log(reference.det_proj),
    )]
    for j in range(m):
        out.append(ks_report(
            f"log_residual_{j + 1} a={scale:g}",
            np.log(scaled.residual_norms[:, j]) - 2.0 * H * shift,
            np.log(reference.residual_norms[:, j]),
        ))
    for r in out:
        logger.info("scaling KS %s: D=%.4f p=%.4f", r.label, r.statistic, r.pvalue)
    return out


def quantile_domination(
    residual_norms: np.ndarray,
    spacings: Sequence[float],
    H: float,
    reference: np.ndarray,
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
) -> Dict[str, Any]:
    """Lower quantiles of residual_j / spacing_j^{2H} against a reference batch.

    The reference quantile is taken at level q - 2 SE(q) with
    SE(q) = sqrt(q (1 - q) / n), a distribution-free two-standard-error margin.
    """
    residual_norms = np.asarray(residual_norms, dtype=float)
    reference = np.asarray(reference, dtype=float)
    n_ref = reference.size
    rows = []
    for j, h in enumerate(spacings):
        normalized = residual_norms[:, j] / h ** (2.0 * H)
        for q in quantiles:
            lhs = float(np.quantile(normalized, q))
            q_low = max(q - 2.0 * math.sqrt(q * (1.0 - q) / n_ref), 0.0)
            rhs = float(np.quantile(reference, q_low))
            rows.append({"j": j + 1, "q": q, "residual_quantile": lhs, "reference_quantile": rhs, "dominates": lhs >= rhs})
    return {"rows": rows, "all_dominate": all(r["dominates"] for r in rows)}


def sobolev_norm(values: np.ndarray, derivative_norms2: np.ndarray, hs_norm2: float, k: int = 1, p: float = 2.0) -> float:
    """(E|F|^p + E||DF||^p + ||D^2 F||^p)^{1/p} truncated at order k.

    For a second-chaos F = I_2(f) the second derivative 2f is deterministic
    with ||D^2 F||^2 = 4 ||f||^2 (hs_norm2), and higher derivatives vanish.
    """
    if k < 0:
        raise DomainError(f"Sobolev order must be nonnegative, got {k}")
    total = float(np.mean(np.abs(values) ** p))
    if k >= 1:
        total += float(np.mean(np.asarray(derivative_norms2, dtype=float) ** (p / 2.0)))
    if k >= 2:
        total += float(hs_norm2) ** (p / 2.0)
    return total ** (1.0 / p)


def sobolev_scaling(
    spacing_matrices: Dict[float, SecondChaosMatrix],
    n_samples: int,
    seed: int,
    k: int = 1,
    p: float = 2.0,
) -> Dict[str, Any]:
    """Sobolev-type norm of Z_h for several spacings h and its log-log slope.

    Stationary increments make Z_h a stand-in for Z_{s+h} - Z_s; each matrix
    should come from a grid built for its own spacing.
    """
    spacings = sorted(spacing_matrices)
    norms = []
    for h in spacings:
        mat = spacing_matrices[h]
        rep = malliavin_batch([mat], n_samples, seed)
        norms.append(sobolev_norm(rep.values[:, 0], rep.dz1_full, 4.0 * mat.frobenius2, k=k, p=p))
    slope = float(np.polyfit(np.log(spacings), np.log(norms), 1)[0]) if len(spacings) > 1 else None
    return {"spacings": spacings, "norms": norms, "slope": slope, "k": k, "p": p}


def moment_scaling(reports: Sequence[MomentReport], partitions: Sequence[TimePartition], H: float) -> Dict[str, Any]:
    """E[(det Gamma)^{-1}] * prod_j spacing_j^{2H} across partitions."""
    rescaled = [
        r.estimate * float(np.prod(part.spacings ** (2.0 * H)))
        for r, part in zip(reports, partitions)
    ]
    ratio = max(rescaled) / min(rescaled) if rescaled and min(rescaled) > 0 else math.inf
    return {
        "partitions": [list(part.times) for part in partitions],
        "rescaled": rescaled,
        "max_ratio": ratio,
        "within_factor_2": ratio <= 2.0,
    }


__all__ = [
    "malliavin_derivatives",
    "gram_matrix",
    "det_via_projections",
    "MalliavinReport",
    "malliavin_batch",
    "positivity_census",
    "MomentReport",
    "negative_moment",
    "chi2_negative_moment",
    "chi2_surrogate_check",
    "KSReport",
    "ks_report",
    "scaling_check",
    "quantile_domination",
    "sobolev_norm",
    "sobolev_scaling",
    "moment_scaling",
]
