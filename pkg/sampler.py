"""Monte Carlo sampling of Rosenblatt increment vectors.

Features:
- joint increments (Z_{t_1} - Z_{t_0}, ..., Z_{t_m} - Z_{t_{m-1}}) from one
  shared Gaussian vector xi through the centered quadratic forms
  xi^T M_{t_j} xi - tr M_{t_j}
- single-time values through the chi-square series sum_j lambda_j (eta_j^2 - 1)
- the level map S (cumulative sums) and its inverse
- reproducible batches: fixed-size blocks, each with its own Philox
  generator keyed by BLAKE2b(seed, stream, block); chunks group blocks and run
  on a thread pool, so results do not depend on chunking or thread count
- optional Gaussian compensation of the kernel mass lost by discretization,
  which makes first and second moments of the level vector exact

Usage:
    plan = SamplingPlan(ctx, partition, grid, n_samples=10_000, seed=7)
    batch = run_batch(plan)
    batch.frame().head()
"""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from chaos_kernel import HurstContext, TimePartition, process_covariance
from errors import DomainError, GridMismatchError, PartialBatchError
from spectral import QuadratureGrid, SecondChaosMatrix, Spectrum, chaos_matrices, check_same_grid, series_coefficients

logger = logging.getLogger("sampler")

DEFAULT_BLOCK_SIZE = 2048
MODE_FLOOR = 1e-13


@dataclass(frozen=True, eq=False)
class GaussianState:
    """Standard normal draws, one per grid node (rows are samples when 2-D)."""

    xi: np.ndarray
    lineage: str = ""

    @property
    def dimension(self) -> int:
        return int(np.shape(self.xi)[-1])

    @classmethod
    def draw(cls, dimension: int, seed: int, stream: str = "xi", block: int = 0, size: Optional[int] = None) -> "GaussianState":
        rng = block_generator(seed, stream, block)
        shape = (dimension,) if size is None else (size, dimension)
        return cls(rng.standard_normal(shape), lineage=f"{seed}/{stream}/{block}")


def block_key(seed: int, stream: str, block: int) -> int:
    """128-bit Philox key derived from (seed, stream, block)."""
    h = hashlib.blake2b(f"{int(seed)}:{stream}:{int(block)}".encode("utf-8"), digest_size=16)
    return int.from_bytes(h.digest(), "little")


def block_generator(seed: int, stream: str, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=block_key(seed, stream, block)))


def iter_blocks(n_samples: int, block_size: int) -> Iterator[Tuple[int, int]]:
    """(block_index, rows) for consecutive blocks covering n_samples rows."""
    if block_size < 1:
        raise DomainError(f"block_size must be positive, got {block_size}")
    full, rest = divmod(int(n_samples), int(block_size))
    for b in range(full):
        yield b, block_size
    if rest:
        yield full, rest


def group_blocks(blocks: Sequence[Tuple[int, int]], chunks: int) -> List[List[Tuple[int, int]]]:
    """Split consecutive blocks into at most `chunks` contiguous groups."""
    chunks = max(1, min(int(chunks), len(blocks) or 1))
    bounds = np.linspace(0, len(blocks), chunks + 1).round().astype(int)
    return [list(blocks[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def level_from_increments(increments) -> np.ndarray:
    """S(y_1, ..., y_m) = (y_1, y_1 + y_2, ..., y_1 + ... + y_m)."""
    return np.cumsum(np.asarray(increments, dtype=float), axis=-1)


def increments_from_levels(levels) -> np.ndarray:
    levels = np.asarray(levels, dtype=float)
    return np.diff(levels, axis=-1, prepend=np.zeros(levels.shape[:-1] + (1,)))


def level_map_matrix(m: int) -> np.ndarray:
    """Matrix of S; unit lower-triangular, so its determinant is one."""
    return np.tril(np.ones((m, m)))


def _check_state(grid: QuadratureGrid, state: GaussianState) -> None:
    if state.dimension != grid.n:
        raise GridMismatchError(f"noise dimension {state.dimension} does not match grid size {grid.n}")


def sample_increment_vector(matrices: Sequence[SecondChaosMatrix], state: GaussianState) -> np.ndarray:
    """Increments of the discrete proxies xi^T M_j xi - tr M_j for a shared xi."""
    grid = check_same_grid(matrices)
    _check_state(grid, state)
    xi = np.asarray(state.xi, dtype=float)
    levels = []
    for mat in matrices:
        quad = np.einsum("...k,kl,...l->...", xi, mat.M, xi)
        levels.append(quad - np.trace(mat.M))
    return increments_from_levels(np.stack(levels, axis=-1))


def sample_series(spectrum: Spectrum, state: GaussianState):
    """sum_j lambda_j (eta_j^2 - 1) with eta the leading coordinates of the state."""
    J = spectrum.n_modes
    if J == 0:
        return 0.0 if np.ndim(state.xi) == 1 else np.zeros(np.shape(state.xi)[0])
    if state.dimension < J:
        raise GridMismatchError(f"state of dimension {state.dimension} cannot drive {J} modes")
    eta = np.asarray(state.xi, dtype=float)[..., :J]
    out = (eta ** 2 - 1.0) @ spectrum.eigenvalues
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class ModalFactor:
    """Retained modes of one M_t: M ~ V diag(lam) V^T."""

    t: float
    eigenvalues: np.ndarray
    vectors: np.ndarray
    coverage: float

    def levels(self, xi: np.ndarray) -> np.ndarray:
        return ((xi @ self.vectors) ** 2 - 1.0) @ self.eigenvalues


def modal_factors(
    matrices: Sequence[SecondChaosMatrix],
    coverage_target: float = 1.0,
    j_max: Optional[int] = None,
) -> List[ModalFactor]:
    factors = []
    for mat in matrices:
        spec = series_coefficients(mat, j_max=j_max, coverage_target=coverage_target)
        lam = spec.eigenvalues
        keep = np.abs(lam) > MODE_FLOOR * (np.abs(lam).max() if lam.size else 0.0)
        factors.append(ModalFactor(mat.t, lam[keep], spec.eigenvectors[:, keep], spec.coverage))
        logger.debug("t=%g: %d modes retained, coverage %.6f", mat.t, int(keep.sum()), spec.coverage)
    return factors


def discrete_covariance(factors: Sequence[ModalFactor]) -> np.ndarray:
    """2 tr(M_i M_j) restricted to the retained modes of each level."""
    m = len(factors)
    discrete = np.zeros((m, m))
    for i in range(m):
        for j in range(i, m):
            overlap = factors[i].vectors.T @ factors[j].vectors
            value = 2.0 * float(factors[i].eigenvalues @ (overlap ** 2) @ factors[j].eigenvalues)
            discrete[i, j] = discrete[j, i] = value
    return discrete


def remainder_covariance(ctx: HurstContext, factors: Sequence[ModalFactor]) -> np.ndarray:
    """PSD part of Cov(Z_{t_i}, Z_{t_j}) - 2 tr(M_i M_j) over retained modes."""
    discrete = discrete_covariance(factors)
    times = np.array([f.t for f in factors])
    target = process_covariance(ctx, times[:, None], times[None, :])
    diff = np.atleast_2d(target) - discrete
    vals, vecs = np.linalg.eigh(0.5 * (diff + diff.T))
    clipped = np.clip(vals, 0.0, None)
    if np.any(vals < -1e-12 * max(1.0, float(np.max(np.abs(target))))):
        logger.warning("discrete covariance exceeds the target; negative remainder eigenvalues clipped: %s", vals[vals < 0])
    return (vecs * clipped) @ vecs.T


@dataclass(frozen=True, eq=False)
class SamplingPlan:
    ctx: HurstContext
    partition: TimePartition
    grid: QuadratureGrid
    n_samples: int
    seed: int
    block_size: int = DEFAULT_BLOCK_SIZE
    chunks: int = 1
    threads: int = 1
    coverage_target: float = 1.0
    j_max: Optional[int] = None
    compensate: bool = True
    matrix_order: int = 8

    def matrices(self) -> List[SecondChaosMatrix]:
        return chaos_matrices(self.ctx, self.partition, self.grid, order=self.matrix_order)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    values: np.ndarray
    partition: TimePartition
    seed: int
    stream_layout: Dict[str, Any]
    H: float
    coverage: Tuple[float, ...] = ()
    deficits: Tuple[float, ...] = ()
    remainder_covariance: Optional[np.ndarray] = None
    grid_descriptor: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])

    @property
    def m(self) -> int:
        return self.partition.m

    @property
    def levels(self) -> np.ndarray:
        return level_from_increments(self.values)

    def frame(self, with_levels: bool = True) -> pd.DataFrame:
        data = {f"dz_{j + 1}": self.values[:, j] for j in range(self.m)}
        if with_levels:
            levels = self.levels
            data.update({f"z_{j + 1}": levels[:, j] for j in range(self.m)})
        return pd.DataFrame(data)

    def sidecar(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "H": self.H,
            "partition": list(self.partition.times),
            "n_samples": self.n_samples,
            "grid": self.grid_descriptor,
            "coverage": list(self.coverage),
            "frobenius_deficit": list(self.deficits),
            "remainder_covariance": None if self.remainder_covariance is None else self.remainder_covariance.tolist(),
            "stream_layout": self.stream_layout,
        }


def _sample_block(
    seed: int,
    block: int,
    rows: int,
    factors: Sequence[ModalFactor],
    remainder_factor: Optional[np.ndarray],
    dimension: int,
) -> np.ndarray:
    xi = block_generator(seed, "xi", block).standard_normal((rows, dimension))
    levels = np.stack([f.levels(xi) for f in factors], axis=1)
    if remainder_factor is not None:
        zeta = block_generator(seed, "remainder", block).standard_normal((rows, len(factors)))
        levels = levels + zeta @ remainder_factor.T
    return increments_from_levels(levels)


def run_batch(plan: SamplingPlan, matrices: Optional[Sequence[SecondChaosMatrix]] = None) -> SampleBatch:
    """Draw plan.n_samples increment vectors.

    Output depends on (seed, block_size) and the matrices only; chunks and
    threads change the schedule, never the numbers.
    """
    if plan.n_samples < 0:
        raise DomainError(f"n_samples must be nonnegative, got {plan.n_samples}")
    matrices = list(matrices) if matrices is not None else plan.matrices()
    grid = check_same_grid(matrices)
    if len(matrices) != plan.partition.m:
        raise GridMismatchError(f"{len(matrices)} matrices for a partition with m = {plan.partition.m}")

    factors = modal_factors(matrices, plan.coverage_target, plan.j_max)
    remainder = remainder_covariance(plan.ctx, factors) if plan.compensate else None
    remainder_factor = None
    if remainder is not None:
        vals, vecs = np.linalg.eigh(remainder)
        remainder_factor = vecs * np.sqrt(np.clip(vals, 0.0, None))

    blocks = list(iter_blocks(plan.n_samples, plan.block_size))
    groups = group_blocks(blocks, plan.chunks)
    layout = {
        "generator": "Philox",
        "key": "blake2b-128(seed:stream:block)",
        "streams": ["xi"] + (["remainder"] if plan.compensate else []),
        "block_size": plan.block_size,
        "n_blocks": len(blocks),
    }
    logger.info(
        "sampling %d vectors (m=%d, n=%d) in %d blocks / %d chunks on %d threads",
        plan.n_samples, plan.partition.m, grid.n, len(blocks), len(groups), plan.threads,
    )

    def run_group(group: List[Tuple[int, int]]) -> np.ndarray:
        parts = [_sample_block(plan.seed, b, rows, factors, remainder_factor, grid.n) for b, rows in group]
        return np.concatenate(parts, axis=0)

    results: List[np.ndarray] = []
    with ThreadPoolExecutor(max_workers=max(1, int(plan.threads))) as pool:
        futures = [pool.submit(run_group, g) for g in groups]
        for fut in futures:
            try:
                results.append(fut.result())
            except MemoryError as exc:
                completed = int(sum(r.shape[0] for r in results))
                for pending in futures:
                    pending.cancel()
                raise PartialBatchError(f"out of memory after {completed} samples", completed) from exc

    values = np.concatenate(results, axis=0) if results else np.zeros((0, plan.partition.m))
    return SampleBatch(
        values=values,
        partition=plan.partition,
        seed=plan.seed,
        stream_layout=layout,
        H=plan.ctx.H,
        coverage=tuple(f.coverage for f in factors),
        deficits=tuple(m.deficit for m in matrices),
        remainder_covariance=remainder,
        grid_descriptor=grid.descriptor(),
    )


__all__ = [
    "GaussianState",
    "block_key",
    "block_generator",
    "iter_blocks",
    "group_blocks",
    "level_from_increments",
    "increments_from_levels",
    "level_map_matrix",
    "sample_increment_vector",
    "sample_series",
    "ModalFactor",
    "modal_factors",
    "discrete_covariance",
    "remainder_covariance",
    "SamplingPlan",
    "SampleBatch",
    "run_batch",
]
