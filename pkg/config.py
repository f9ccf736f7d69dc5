"""Run configuration for the toolkit.

One YAML file (PyYAML) describes a run; command-line flags override it and
model defaults fill the rest (precedence: flag > file > default). Models are
pydantic v2 so that every field is typed and the whole config dumps back to
YAML unchanged.

Environment defaults:
  - ROSENBLATT_OUT_DIR (default ./runs)
  - ROSENBLATT_THREADS (default 1)

Usage:
    cfg = load_config("run.yaml", {"seed": 3, "hurst": 0.6})
    cfg.config_hash()
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from chaos_kernel import TimePartition
from errors import ConfigError
import validate

logger = logging.getLogger("config")

OUT_DIR = os.environ.get("ROSENBLATT_OUT_DIR", "./runs")
THREADS = int(os.environ.get("ROSENBLATT_THREADS", "1"))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Section):
    n: int = Field(768, ge=2)
    inner_fraction: float = Field(0.6, gt=0.0, lt=1.0)
    lower: Union[Literal["auto"], float] = "auto"
    tail_tolerance: float = Field(2e-3, gt=0.0)
    matrix_order: int = Field(8, ge=2)
    matrix_tolerance: float = Field(0.03, gt=0.0)
    operator_n: int = Field(96, ge=2)
    covariance_tol: float = Field(1e-9, gt=0.0)


class SamplingConfig(_Section):
    n_samples: int = Field(10_000, ge=0)
    seed: int = 20240501
    block_size: int = Field(2048, ge=1)
    chunks: int = Field(1, ge=1)
    compensate: bool = True
    coverage_target: float = Field(1.0, gt=0.0, le=1.0)
    j_max: Optional[int] = Field(None, ge=1)


class SpectrumConfig(_Section):
    j_max: int = Field(200, ge=1)
    coverage_target: float = Field(0.999, gt=0.0, le=1.0)
    rank_sizes: List[int] = Field(default_factory=lambda: [32, 64, 96])


class DensityConfig(_Section):
    method: Literal["cf", "kde", "both"] = "both"
    derivative_orders: List[int] = Field(default_factory=lambda: [0, 1, 2])
    x_min: float = -3.0
    x_max: float = 10.0
    grid_len: int = Field(1001, ge=16)
    bandwidth: Union[Literal["silverman", "scott"], float] = "silverman"
    z_max: float = Field(8.0, gt=2.0)
    shrink: float = Field(0.8, gt=0.0, le=1.0)
    central_mass: float = Field(0.99, gt=0.0, lt=1.0)


class MalliavinConfig(_Section):
    n_samples: int = Field(10_000, ge=0)
    moment_orders: List[float] = Field(default_factory=lambda: [1.0, 2.0])
    eps_rel: float = Field(1e-14, ge=0.0)
    n_boot: int = Field(200, ge=10)
    scale_factors: List[float] = Field(default_factory=lambda: [0.5, 2.0])


class VerifyConfig(_Section):
    scale: float = Field(1.0, gt=0.0)
    only: Optional[List[str]] = None
    fine_n: int = Field(2048, ge=16)
    fine_inner_fraction: float = Field(0.75, gt=0.0, lt=1.0)
    hurst_values: List[float] = Field(default_factory=lambda: [0.6, 0.75, 0.9])


class RunConfig(_Section):
    H: float = 0.75
    times: List[float] = Field(default_factory=lambda: [1.0])
    grid: GridConfig = Field(default_factory=GridConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    spectrum: SpectrumConfig = Field(default_factory=SpectrumConfig)
    density: DensityConfig = Field(default_factory=DensityConfig)
    malliavin: MalliavinConfig = Field(default_factory=MalliavinConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    out_dir: str = Field(default_factory=lambda: OUT_DIR)
    threads: int = Field(default_factory=lambda: THREADS, ge=1)

    @property
    def partition(self) -> TimePartition:
        return TimePartition.from_positive(self.times)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping at top level")
        return _build(data)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump without machine-dependent fields."""
        data = self.model_dump(mode="json", exclude={"out_dir", "threads"})
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _build(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        issues = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()]
        raise ConfigError("invalid configuration", issues) from exc


# flag name -> dotted config path
OVERRIDE_PATHS = {
    "hurst": "H",
    "times": "times",
    "seed": "sampling.seed",
    "threads": "threads",
    "out": "out_dir",
    "n_samples": "sampling.n_samples",
    "scale": "verify.scale",
    "only": "verify.only",
}


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Return a copy of the raw config mapping with non-None overrides set."""
    out = json.loads(json.dumps(data))
    for key, value in overrides.items():
        if value is None:
            continue
        path = OVERRIDE_PATHS.get(key, key).split(".")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key}: {part} is not a section")
        node[path[-1]] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read YAML (if given), apply overrides, validate and run precondition checks."""
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping at top level")
    cfg = _build(apply_overrides(data, overrides or {}))
    validate.raise_if_issues(validate.validate_run_config(cfg), "config")
    logger.debug("config loaded (hash %s)", cfg.config_hash()[:12])
    return cfg


__all__ = [
    "GridConfig",
    "SamplingConfig",
    "SpectrumConfig",
    "DensityConfig",
    "MalliavinConfig",
    "VerifyConfig",
    "RunConfig",
    "apply_overrides",
    "load_config",
]
