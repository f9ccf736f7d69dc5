"""JSON manifest of a run directory.

`manifest.json` is written first when a run starts (command, config hash,
config dump, package versions) and updated each time an artifact lands.
"""
from __future__ import annotations

import json
import os
from importlib import metadata
from typing import Any, Dict, List, Optional

MANIFEST_NAME = "manifest.json"
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "PyYAML", "tabulate")


def _ensure_dir(path: str) -> None:
    d = os.path.dirname(path)
    if d and not os.path.exists(d):
        os.makedirs(d, exist_ok=True)


def package_versions(packages=TRACKED_PACKAGES) -> Dict[str, Optional[str]]:
    out: Dict[str, Optional[str]] = {}
    for name in packages:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = None
    return out


def manifest_path(run_dir: str) -> str:
    return os.path.join(run_dir, MANIFEST_NAME)


def read_manifest(run_dir: str) -> Dict[str, Any]:
    path = manifest_path(run_dir)
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError:
            return {}


def _write(run_dir: str, data: Dict[str, Any]) -> None:
    path = manifest_path(run_dir)
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)


def start_manifest(run_dir: str, command: str, config_hash: str, config: Dict[str, Any]) -> Dict[str, Any]:
    data = {
        "command": command,
        "config_hash": config_hash,
        "config": config,
        "versions": package_versions(),
        "artifacts": [],
        "status": "running",
    }
    _write(run_dir, data)
    return data


def write_entry(run_dir: str, key: str, value: Any) -> None:
    data = read_manifest(run_dir)
    data[key] = value
    _write(run_dir, data)


def record_artifact(run_dir: str, relpath: str, kind: str) -> None:
    data = read_manifest(run_dir)
    artifacts: List[Dict[str, str]] = data.setdefault("artifacts", [])
    if not any(a["path"] == relpath for a in artifacts):
        artifacts.append({"path": relpath, "kind": kind})
    _write(run_dir, data)


def get_entry(run_dir: str, key: str) -> Optional[Any]:
    return read_manifest(run_dir).get(key)


__all__ = [
    "MANIFEST_NAME",
    "package_versions",
    "manifest_path",
    "read_manifest",
    "start_manifest",
    "write_entry",
    "record_artifact",
    "get_entry",
]
