"""Run-directory writer.

Every run gets one directory holding CSV data, JSON reports and the
manifest. Numbers are written with 17 significant digits and data files carry
no timestamps, so identical runs produce byte-identical files.

Usage:
    store = RunStorage("./runs/spectrum")
    store.save_csv(frame, "spectrum_T")
    store.save_json({"coverage": 0.999}, "spectrum_T")
"""
from __future__ import annotations

import json
import logging
import os
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

import manifest

logger = logging.getLogger("storage")

FLOAT_FORMAT = "%.17g"


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, tuple):
        return list(obj)
    return str(obj)


class RunStorage:
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, filename: str) -> str:
        return os.path.join(self.out_dir, filename)

    def start(self, command: str, config_hash: str, config: Dict[str, Any]) -> None:
        manifest.start_manifest(self.out_dir, command, config_hash, config)

    def finish(self, status: str = "ok", **extra: Any) -> None:
        manifest.write_entry(self.out_dir, "status", status)
        for key, value in extra.items():
            manifest.write_entry(self.out_dir, key, value)

    def save_json(self, payload: Any, filename: str, record: bool = True) -> str:
        name = filename if filename.endswith(".json") else f"{filename}.json"
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=_jsonable)
            f.write("\n")
        logger.info("Wrote %s", path)
        if record:
            manifest.record_artifact(self.out_dir, name, "json")
        return path

    def save_csv(self, frame: pd.DataFrame, filename: str, header: Optional[Dict[str, Any]] = None) -> str:
        """Write a data frame; an optional header goes to a <name>.meta.json sidecar."""
        name = filename if filename.endswith(".csv") else f"{filename}.csv"
        path = self.path(name)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.info("Wrote %d rows to %s", len(frame), path)
        manifest.record_artifact(self.out_dir, name, "csv")
        if header is not None:
            self.save_json(header, name[:-4] + ".meta")
        return path

    def save_text(self, text: str, filename: str) -> str:
        path = self.path(filename)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        manifest.record_artifact(self.out_dir, filename, "text")
        return path


__all__ = ["RunStorage", "FLOAT_FORMAT"]
