"""Precondition checks for run configurations.

Each validator returns a list of (identifier, issues) tuples; an empty issue
list means the item passed. `raise_if_issues` turns the failures into one
ConfigError carrying every issue, so a bad config is rejected before any
work starts. A small CLI checks a config file without running anything.
"""
from __future__ import annotations

import math
from typing import Any, List, Sequence, Tuple

from errors import ConfigError

Issues = List[Tuple[str, List[str]]]


def validate_hurst(H: Any) -> Issues:
    issues: List[str] = []
    try:
        val = float(H)
        if not math.isfinite(val) or not (0.5 < val < 1.0):
            issues.append("hurst_outside_open_interval_(0.5,1)")
    except (TypeError, ValueError):
        issues.append("invalid_hurst")
    return [("H", issues)]


def validate_partition(times: Sequence[Any]) -> Issues:
    """Positive times t_1 < ... < t_m (t_0 = 0 is implicit)."""
    issues: List[str] = []
    if not times:
        issues.append("empty_partition")
        return [("times", issues)]
    try:
        vals = [float(t) for t in times]
    except (TypeError, ValueError):
        return [("times", ["invalid_time"])]
    if any(not math.isfinite(t) for t in vals):
        issues.append("non_finite_time")
    if vals[0] <= 0:
        issues.append("first_time_not_positive")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        issues.append("times_not_strictly_increasing")
    return [("times", issues)]


def validate_grid_config(grid: Any, m: int) -> Issues:
    issues: List[str] = []
    n_inner = max(m, int(round(grid.inner_fraction * grid.n)))
    if grid.n - n_inner < 1:
        issues.append("no_cells_left_for_negative_half_line")
    if n_inner < 2 * m:
        issues.append("fewer_than_two_cells_per_partition_interval")
    if grid.lower != "auto" and float(grid.lower) >= 0:
        issues.append("lower_limit_not_negative")
    if grid.n > 4096:
        issues.append("grid_too_large_for_dense_eigensolver")
    return [("grid", issues)]


def validate_run_config(cfg: Any) -> Issues:
    results: Issues = []
    results += validate_hurst(cfg.H)
    results += validate_partition(cfg.times)
    results += validate_grid_config(cfg.grid, len(cfg.times))

    sampling: List[str] = []
    if cfg.sampling.chunks > max(1, cfg.sampling.n_samples):
        sampling.append("more_chunks_than_samples")
    results.append(("sampling", sampling))

    density: List[str] = []
    if cfg.density.x_max <= cfg.density.x_min:
        density.append("empty_density_grid")
    if any(n < 0 for n in cfg.density.derivative_orders):
        density.append("negative_derivative_order")
    results.append(("density", density))

    malliavin: List[str] = []
    if any(p <= 0 for p in cfg.malliavin.moment_orders):
        malliavin.append("moment_order_not_positive")
    if any(a <= 0 for a in cfg.malliavin.scale_factors):
        malliavin.append("scale_factor_not_positive")
    results.append(("malliavin", malliavin))

    verify: List[str] = []
    for H in cfg.verify.hurst_values:
        if validate_hurst(H)[0][1]:
            verify.append(f"verify_hurst_{H}_outside_(0.5,1)")
    results.append(("verify", verify))
    return results


def raise_if_issues(issues: Issues, name: str = "items") -> None:
    bad = [i for i in issues if i[1]]
    if bad:
        lines = [f"{ident}: {', '.join(iss)}" for ident, iss in bad]
        raise ConfigError(f"Validation failed for {name}:\n" + "\n".join(lines), lines)


def cli_check_config(path: str) -> None:
    from config import load_config

    load_config(path)


if __name__ == "__main__":
    import argparse

    p = argparse.ArgumentParser()
    p.add_argument("config")
    args = p.parse_args()
    cli_check_config(args.config)
    print("ok")
