"""Command-line front end.

Subcommands:
  spectrum   eigenvalue spectra of T and of M_t at each partition time
  simulate   increment vectors (and levels) of the process
  malliavin  Gram determinants, positivity census, negative moments, scaling
  density    cf-inversion and KDE densities, tail and bound fits
  verify     the acceptance suite

Exit codes: 0 success, 1 criterion failure or computation error, 2 usage or
config error. Errors are also written to <out>/error.json.

Usage:
    python cli.py spectrum --hurst 0.75 --times 1 --out runs/spec
    python cli.py verify --config run.yaml --scale 0.1 --only 4,5
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from config import OUT_DIR, load_config
from errors import ConfigError, ToolkitError
from pipeline import COMMANDS
from storage import RunStorage
from verify import run_verify

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _str_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--hurst", type=float)
    common.add_argument("--times", type=_float_list, help="comma-separated positive times, e.g. 1,2")
    common.add_argument("--n-samples", dest="n_samples", type=int)
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rosenblatt", description="Rosenblatt process simulation and verification")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    verify = sub.add_parser("verify", parents=[common])
    verify.add_argument("--scale", type=float, help="multiplier for all verification sample sizes")
    verify.add_argument("--only", type=_str_list, help="comma-separated criterion ids or numbers")
    return parser


def error_payload(exc: BaseException) -> Dict[str, Any]:
    if isinstance(exc, ToolkitError):
        return exc.to_dict()
    return {"error": type(exc).__name__, "message": str(exc)}


def write_error(out_dir: Optional[str], exc: BaseException) -> None:
    payload = error_payload(exc)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    if not out_dir:
        return
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "error.json"), "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    except OSError:
        logger.exception("could not write error.json to %s", out_dir)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    overrides = {
        "hurst": args.hurst,
        "times": args.times,
        "seed": args.seed,
        "threads": args.threads,
        "out": args.out,
        "n_samples": args.n_samples,
        "scale": getattr(args, "scale", None),
        "only": getattr(args, "only", None),
    }
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        logger.error("config rejected: %s", exc)
        write_error(args.out or OUT_DIR, exc)
        return EXIT_USAGE

    store = RunStorage(cfg.out_dir)
    store.start(args.command, cfg.config_hash(), cfg.model_dump(mode="json", exclude={"out_dir", "threads"}))
    logger.info("%s: run directory %s (config %s)", args.command, cfg.out_dir, cfg.config_hash()[:12])
    try:
        if args.command == "verify":
            summary = run_verify(cfg, store)
            status = "ok" if summary["passed"] else "failed"
            store.finish(status, n_failed=summary["n_failed"])
            return EXIT_OK if summary["passed"] else EXIT_FAILED
        COMMANDS[args.command](cfg, store)
    except ConfigError as exc:
        logger.error("%s", exc)
        store.finish("error")
        write_error(cfg.out_dir, exc)
        return EXIT_USAGE
    except ToolkitError as exc:
        logger.exception("%s failed", args.command)
        store.finish("error")
        write_error(cfg.out_dir, exc)
        return EXIT_FAILED
    except Exception as exc:
        logger.exception("%s failed with an unexpected %s", args.command, type(exc).__name__)
        store.finish("error")
        write_error(cfg.out_dir, exc)
        return EXIT_FAILED
    store.finish("ok")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
