"""Exception types shared by the toolkit modules.

Every error raised on purpose derives from `ToolkitError` so the CLI can map it
to an exit code and a machine-readable error JSON.
"""
from __future__ import annotations

from typing import Any, Dict, List, Optional


class ToolkitError(Exception):
    """Base class for errors raised by the toolkit."""

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self)}


class DomainError(ToolkitError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class GridMismatchError(ToolkitError, ValueError):
    """Matrices or noise vectors were built on different grids."""


class EigensolverError(ToolkitError, RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["diagnostics"] = self.diagnostics
        return out


class NumericalError(ToolkitError, ArithmeticError):
    """A computation produced NaN or infinite values; `points` lists where."""

    def __init__(self, message: str, points: Optional[List[Any]] = None):
        super().__init__(message)
        self.points = list(points or [])

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["points"] = [list(p) if isinstance(p, tuple) else p for p in self.points[:10]]
        return out


class PartialBatchError(ToolkitError, RuntimeError):
    """A batch stopped early; `completed` rows were produced before the failure."""

    def __init__(self, message: str, completed: int):
        super().__init__(message)
        self.completed = completed

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["completed"] = self.completed
        return out


class InsufficientModesError(ToolkitError, ValueError):
    def __init__(self, n_modes: int, order: int):
        super().__init__(
            f"characteristic-function inversion of derivative order {order} needs "
            f"J > 2(n+1) = {2 * (order + 1)} nonzero modes, got J = {n_modes}"
        )
        self.n_modes = n_modes
        self.order = order


class TailFitError(ToolkitError, ValueError):
    def __init__(self, message: str, t_max: float):
        super().__init__(message)
        self.t_max = t_max

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["usable_t_max"] = self.t_max
        return out


class ConfigError(ToolkitError, ValueError):
    def __init__(self, message: str, issues: Optional[List[str]] = None):
        super().__init__(message)
        self.issues = issues or []

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["issues"] = self.issues
        return out


__all__ = [
    "ToolkitError",
    "DomainError",
    "GridMismatchError",
    "EigensolverError",
    "PartialBatchError",
    "NumericalError",
    "InsufficientModesError",
    "TailFitError",
    "ConfigError",
]
