"""Command-line harness: ``iecdiff {sample,norms,ablate,metrics} --config PATH``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import experiments
from .config import ABLATION_AXES, load_config
from .errors import ConfigError, DivergenceError

log = logging.getLogger("iecdiff")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iecdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None, help="worker processes")
        p.add_argument("--seed", type=int, default=None, help="override run.base_seed")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("sample", help="clean / perturbed / corrected runs with error curves"))
    common(sub.add_parser("norms", help="per-step amplification and contraction norms"))
    ablate = sub.add_parser("ablate", help="sweep one axis listed in the config")
    common(ablate)
    ablate.add_argument("--axis", required=True, choices=ABLATION_AXES)
    common(sub.add_parser("metrics", help="Frechet distance of each variant to reference data"))
    return parser


def _write(out_dir: Path, report: dict, files: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, body in files.items():
        (out_dir / name).write_text(body, encoding="utf-8")
    report = {**report, "timestamp": datetime.now(timezone.utc).isoformat()}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, allow_nan=True) + "\n",
                                         encoding="utf-8")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["base_seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.out is not None:
            overrides["out_dir"] = str(args.out)
        if overrides:
            cfg = cfg.with_overrides(**overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(cfg.out_dir)
    header = experiments.report_header(cfg, args.command)
    log.info("running %s with %d trajectories", args.command, cfg.n_trajectories)
    try:
        if args.command == "sample":
            body, files = experiments.sample_report(cfg)
        elif args.command == "norms":
            body, files = experiments.norms_table(cfg)
        elif args.command == "ablate":
            header["axis"] = args.axis
            body, files = experiments.ablation_table(cfg, args.axis)
        else:
            body, files = experiments.metrics_report(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        _write(out_dir, {**header, "diverged": True, "partial": True, "error": str(exc),
                         "step": exc.step, "lipschitz": exc.lipschitz}, {})
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    _write(out_dir, {**header, "diverged": False, "results": body}, files)
    log.info("wrote %s", out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
