"""Command-line entry point: ``homogenize-lab run|coefficients|validate <config>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .config import load_raw, validate
from .errors import ConfigError, FlowMonotonicityError, NumericQualityError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _load(path, seed=None, out=None):
    raw = load_raw(path)
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = str(out)
    return validate(raw)


def cmd_validate(args) -> int:
    cfg = _load(args.config)
    print(f"ok: {cfg.experiment} (config hash {cfg.content_hash()[:12]})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed, args.out)
    result = runner.run(cfg, threads=args.threads, out_dir=cfg.output_dir)
    sys.stdout.write(result.metrics_csv())
    logging.getLogger(__name__).info("wrote results to %s", cfg.output_dir)
    return EXIT_OK


def cmd_coefficients(args) -> int:
    cfg = _load(args.config, args.seed, args.out)
    cfg.coefficients_file = None
    r = runner.Runner(cfg, threads=args.threads)
    spec = cfg.spec if cfg.spec is not None and cfg.spec.centered() else None
    r.coefficients(spec)
    r.coefficients_only()
    runner.write_outputs(cfg, r.result, cfg.output_dir, {"threads": args.threads, "command": "coefficients"})
    sys.stdout.write(r.result.metrics_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homogenize-lab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment pipeline")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--seed", type=int)
    run.set_defaults(func=cmd_run)

    co = sub.add_parser("coefficients", help="estimate homogenized coefficients only")
    co.add_argument("config")
    co.add_argument("--out")
    co.add_argument("--threads", type=int, default=1)
    co.add_argument("--seed", type=int)
    co.set_defaults(func=cmd_coefficients)

    va = sub.add_parser("validate", help="check a config file")
    va.add_argument("config")
    va.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FlowMonotonicityError as exc:
        print(f"numeric-quality error: {exc} (trajectory ids {exc.trajectory_ids})", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericQualityError as exc:
        print(f"numeric-quality error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
