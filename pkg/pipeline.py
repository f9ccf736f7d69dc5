"""Per-command pipelines: spectrum, simulate, malliavin, density.

Each `run_*` function takes a validated RunConfig and a RunStorage, writes
its artifacts and returns a small summary dict. The CLI wires them to
subcommands; tests call them directly.
"""
from __future__ import annotations

import logging
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from chaos_kernel import HurstContext, TimePartition, derivative_covariance, normalization_constant
from config import RunConfig
from density import (
    central_region,
    cf_inversion,
    kde,
    sup_difference,
    tail_fit,
    density_bound_check,
    joint_tail_check,
)
from errors import TailFitError, ToolkitError
from malliavin import (
    malliavin_batch,
    moment_scaling,
    negative_moment,
    positivity_census,
    quantile_domination,
    scaling_check,
    sobolev_scaling,
)
from sampler import SampleBatch, SamplingPlan, run_batch
from spectral import (
    QuadratureGrid,
    SecondChaosMatrix,
    Spectrum,
    build_grid,
    build_line_grid,
    chaos_matrices,
    chaos_matrix,
    covariance_operator_matrix,
    derivative_covariance_matrix,
    nystrom_eig,
    rank_profile,
    series_coefficients,
    spectrum_frame,
    spectrum_payload,
)
from storage import RunStorage

logger = logging.getLogger("pipeline")


def line_grid(ctx: HurstContext, cfg: RunConfig, partition: TimePartition, n: Optional[int] = None, inner_fraction: Optional[float] = None) -> QuadratureGrid:
    g = cfg.grid
    return build_line_grid(
        ctx,
        partition,
        n=n or g.n,
        inner_fraction=inner_fraction or g.inner_fraction,
        lower=g.lower,
        tail_tolerance=g.tail_tolerance,
    )


def matrices_for(ctx: HurstContext, cfg: RunConfig, partition: TimePartition, **grid_kwargs) -> List[SecondChaosMatrix]:
    grid = line_grid(ctx, cfg, partition, **grid_kwargs)
    return chaos_matrices(ctx, partition, grid, order=cfg.grid.matrix_order, tolerance=cfg.grid.matrix_tolerance)


def operator_spectrum(ctx: HurstContext, cfg: RunConfig, n: Optional[int] = None) -> Tuple[Spectrum, QuadratureGrid]:
    """Nystrom spectrum of the derivative covariance operator T on [0, 1]."""
    grid = build_grid((0.0, 1.0), n or cfg.grid.operator_n)
    K = derivative_covariance_matrix(ctx, grid, tol=cfg.grid.covariance_tol)
    return nystrom_eig(K, grid, coverage_target=1.0, order="value"), grid


def retained_count(spectrum: Spectrum, j_max: int, coverage_target: float) -> int:
    frame = spectrum_frame(spectrum)
    reached = np.flatnonzero(frame["coverage"].to_numpy() >= coverage_target)
    keep = int(reached[0]) + 1 if reached.size else spectrum.n_modes
    return min(keep, j_max)


def _spectrum_outputs(store: RunStorage, name: str, spectrum: Spectrum, cfg: RunConfig, **extra) -> Dict[str, Any]:
    keep = retained_count(spectrum, cfg.spectrum.j_max, cfg.spectrum.coverage_target)
    frame = spectrum_frame(spectrum)
    frame["retained"] = frame["index"] <= keep
    retained_coverage = float(frame["coverage"].iloc[keep - 1]) if keep else 0.0
    warnings = list(spectrum.warnings)
    if retained_coverage < cfg.spectrum.coverage_target:
        warnings.append(f"coverage {retained_coverage:.6f} below target {cfg.spectrum.coverage_target} at j_max={cfg.spectrum.j_max}")
        logger.warning("%s: %s", name, warnings[-1])
    payload = spectrum_payload(spectrum, retained=keep, retained_coverage=retained_coverage, **extra)
    payload["warnings"] = warnings
    store.save_csv(frame, name)
    store.save_json(payload, name)
    return payload


def run_spectrum(cfg: RunConfig, store: RunStorage) -> Dict[str, Any]:
    ctx = normalization_constant(cfg.H)
    partition = cfg.partition
    matrices = matrices_for(ctx, cfg, partition)
    summary: Dict[str, Any] = {"M": {}}
    for j, mat in enumerate(matrices, start=1):
        spec = series_coefficients(mat, j_max=None, coverage_target=1.0)
        summary["M"][f"t{j}"] = _spectrum_outputs(
            store, f"spectrum_M_t{j}", spec, cfg,
            t=mat.t, H=cfg.H, frobenius_deficit=mat.deficit, grid=mat.grid.descriptor(),
            matrix_warnings=list(mat.warnings),
        )

    T, op_grid = operator_spectrum(ctx, cfg)
    diag = derivative_covariance(ctx, op_grid.nodes, op_grid.nodes, tol=cfg.grid.covariance_tol)
    trace_integral = float(np.sum(op_grid.weights * diag))
    # independent route: T = B B^* from the [0, 1] cells of M_1
    M1 = chaos_matrix(ctx, 1.0, line_grid(ctx, cfg, TimePartition.from_positive([1.0])), order=cfg.grid.matrix_order)
    T_block, _ = covariance_operator_matrix(M1, (0.0, 1.0))
    summary["T"] = _spectrum_outputs(
        store, "spectrum_T", T, cfg,
        H=cfg.H, grid=op_grid.descriptor(),
        trace_integral=trace_integral, trace_from_M1=float(np.trace(T_block)),
        min_over_max=float(T.eigenvalues.min() / T.eigenvalues.max()) if T.n_modes else None,
        rank_profile=rank_profile(
            lambda s, t: derivative_covariance(ctx, s, t, tol=cfg.grid.covariance_tol),
            cfg.spectrum.rank_sizes,
        ) if cfg.spectrum.rank_sizes else {},
    )
    return summary


def sampling_plan(ctx: HurstContext, cfg: RunConfig, partition: TimePartition, grid: QuadratureGrid, n_samples: Optional[int] = None, seed: Optional[int] = None) -> SamplingPlan:
    s = cfg.sampling
    return SamplingPlan(
        ctx=ctx,
        partition=partition,
        grid=grid,
        n_samples=s.n_samples if n_samples is None else n_samples,
        seed=s.seed if seed is None else seed,
        block_size=s.block_size,
        chunks=s.chunks,
        threads=cfg.threads,
        coverage_target=s.coverage_target,
        j_max=s.j_max,
        compensate=s.compensate,
        matrix_order=cfg.grid.matrix_order,
    )


def simulate(cfg: RunConfig, n_samples: Optional[int] = None, seed: Optional[int] = None, partition: Optional[TimePartition] = None) -> SampleBatch:
    ctx = normalization_constant(cfg.H)
    partition = partition or cfg.partition
    matrices = matrices_for(ctx, cfg, partition)
    plan = sampling_plan(ctx, cfg, partition, matrices[0].grid, n_samples, seed)
    return run_batch(plan, matrices)


def run_simulate(cfg: RunConfig, store: RunStorage) -> Dict[str, Any]:
    batch = simulate(cfg)
    sidecar = batch.sidecar()
    store.save_csv(batch.frame(), "samples", header=sidecar)
    return {"n_samples": batch.n_samples, "m": batch.m, "coverage": list(batch.coverage)}


def run_malliavin(cfg: RunConfig, store: RunStorage) -> Dict[str, Any]:
    ctx = normalization_constant(cfg.H)
    mc = cfg.malliavin
    partition = cfg.partition
    seed = cfg.sampling.seed
    common = dict(block_size=cfg.sampling.block_size, chunks=cfg.sampling.chunks, threads=cfg.threads)

    rep = malliavin_batch(matrices_for(ctx, cfg, partition), mc.n_samples, seed, **common)
    census = positivity_census(rep.det_proj, rep.gram, eps_rel=mc.eps_rel)
    moments = []
    if rep.n_samples >= 2:
        for p in mc.moment_orders:
            for target, values in (("det", rep.det_proj), ("dz1_norm", rep.dz1_full)):
                try:
                    moments.append(negative_moment(values, p, target, n_boot=mc.n_boot, seed=seed))
                except ToolkitError:
                    logger.exception("negative moment %s p=%g failed", target, p)

    ks_reports = []
    scaled_moments = []
    scale_factors = mc.scale_factors if rep.n_samples >= 2 else []
    for k, a in enumerate(scale_factors, start=1):
        scaled_partition = partition.scaled(a)
        scaled = malliavin_batch(matrices_for(ctx, cfg, scaled_partition), mc.n_samples, seed + k, **common)
        ks_reports.extend(scaling_check(rep, scaled, a))
        scaled_moments.append((negative_moment(scaled.det_proj, 1.0, "det", n_boot=mc.n_boot, seed=seed), scaled_partition))

    extra: Dict[str, Any] = {"frobenius2": list(rep.frobenius2)}
    if rep.n_samples >= 2:
        reference = rep.dz1_restricted / partition.times[1] ** (2.0 * cfg.H)
        extra["quantile_domination"] = quantile_domination(rep.residual_norms, partition.spacings, cfg.H, reference)
        h0 = float(partition.spacings[0])
        spacings = sorted({h0} | {h0 * a for a in mc.scale_factors})
        extra["sobolev_scaling"] = sobolev_scaling(
            {h: matrices_for(ctx, cfg, TimePartition.from_positive([h]))[0] for h in spacings},
            mc.n_samples, seed,
        )
        det_moment = [r for r in moments if r.target == "det" and r.p == 1.0]
        if det_moment and scaled_moments:
            extra["moment_scaling"] = moment_scaling(
                det_moment[:1] + [r for r, _ in scaled_moments],
                [partition] + [part for _, part in scaled_moments],
                cfg.H,
            )
    payload = rep.payload(moments, census, ks_reports, **extra)
    store.save_csv(rep.frame(), "malliavin")
    store.save_json(payload, "malliavin_report")
    return {"violations": census["violations"], "n_samples": rep.n_samples}


def density_inputs(cfg: RunConfig) -> Tuple[HurstContext, SecondChaosMatrix, Spectrum, float]:
    """Spectrum of M_{t_1} and the Gaussian remainder variance carried with it."""
    ctx = normalization_constant(cfg.H)
    partition = TimePartition.from_positive(cfg.times[:1])
    mat = matrices_for(ctx, cfg, partition)[0]
    spec = series_coefficients(mat, j_max=None, coverage_target=1.0)
    remainder = max(mat.t ** (2.0 * cfg.H) - mat.variance, 0.0) if cfg.sampling.compensate else 0.0
    return ctx, mat, spec, remainder


def run_density(cfg: RunConfig, store: RunStorage) -> Dict[str, Any]:
    dc = cfg.density
    ctx, mat, spec, remainder = density_inputs(cfg)
    t1 = mat.t
    scale = t1 ** cfg.H
    x = np.linspace(dc.x_min * scale, dc.x_max * scale, dc.grid_len)
    summary: Dict[str, Any] = {"t": t1, "remainder_variance": remainder}

    curves = {}
    if dc.method in ("cf", "both"):
        for n in dc.derivative_orders:
            curve = cf_inversion(spec, n, x, remainder_variance=remainder)
            curves[n] = curve
            store.save_csv(curve.frame(), f"density_cf_n{n}", header=curve.header())
    if dc.method in ("kde", "both"):
        batch = simulate(cfg, partition=TimePartition.from_positive([t1]))
        est = kde(batch.values[:, 0], x_grid=x, bandwidth=dc.bandwidth)
        store.save_csv(est.frame(), "density_kde", header=est.header())
        if 0 in curves:
            region = central_region(curves[0], dc.central_mass)
            summary["sup_difference"] = sup_difference(curves[0], est, region)
            summary["central_region"] = list(region)
        try:
            summary["tail_fit_samples"] = asdict(tail_fit(batch.values[:, 0], sigma=scale))
        except TailFitError as exc:
            logger.warning("sample tail fit skipped: %s", exc)
            summary["tail_fit_samples"] = exc.to_dict()
        if cfg.partition.m > 1:
            joint = simulate(cfg)
            summary["joint_tail"] = joint_tail_check(joint.values, cfg.partition, cfg.H)

    if 0 in curves:
        try:
            summary["tail_fit_cf"] = asdict(tail_fit(curves[0], sigma=scale))
        except TailFitError as exc:
            logger.warning("density tail fit skipped: %s", exc)
            summary["tail_fit_cf"] = exc.to_dict()
    unit = spec.scaled(scale ** -1.0)
    bounds = []
    for n in dc.derivative_orders:
        bounds.append(asdict(density_bound_check(unit, n, cfg.H, z_max=dc.z_max, shrink=dc.shrink,
                                             remainder_variance=remainder / scale ** 2)))
    summary["bound_fits"] = bounds
    store.save_json(summary, "density_report")
    return summary


COMMANDS = {
    "spectrum": run_spectrum,
    "simulate": run_simulate,
    "malliavin": run_malliavin,
    "density": run_density,
}

__all__ = [
    "line_grid",
    "matrices_for",
    "operator_spectrum",
    "retained_count",
    "run_spectrum",
    "sampling_plan",
    "simulate",
    "run_simulate",
    "run_malliavin",
    "density_inputs",
    "run_density",
    "COMMANDS",
]
