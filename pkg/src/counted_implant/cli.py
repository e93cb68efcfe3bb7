"""Command-line entry point.

::

    counted-implant simulate implant|pl|hbt  [--config F] [--seed N] [--out DIR]
    counted-implant analyze  pulses|pl|hbt   [--config F] [--seed N] [--out DIR] [--in DIR]
    counted-implant report                   [--out DIR]
    counted-implant run                      [--config F] [--seed N] [--out DIR]

Exit status is 0 when the requested stage (or full report) completed, 2 for
configuration errors and 1 when a stage failed.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .config import ConfigError
from .pipeline import (StageError, analyze_hbt, analyze_pl, analyze_pulses, load_run_config,
                       report, simulate_hbt, simulate_implant, simulate_pl)

log = logging.getLogger("counted_implant")

SIMULATE = {"implant": simulate_implant, "pl": simulate_pl, "hbt": simulate_hbt}
ANALYZE = {"pulses": analyze_pulses, "pl": analyze_pl, "hbt": analyze_hbt}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="INI configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: run)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="counted-implant",
        description="Simulate and analyse counted single-ion implantation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a simulation stage")
    p.add_argument("stage", choices=sorted(SIMULATE))
    _common(p)

    p = sub.add_parser("analyze", help="run an analysis stage")
    p.add_argument("stage", choices=sorted(ANALYZE))
    _common(p)
    p.add_argument("--in", dest="inp", type=Path, default=None,
                   help="read simulation files from this run directory (copied into --out)")
    p.add_argument("--bin-ns", type=float, default=None, help="correlator bin width (hbt)")
    p.add_argument("--window-ns", type=float, default=None, help="correlator half window (hbt)")
    p.add_argument("--rho", type=float, default=None,
                   help="background ratio applied to every site (hbt)")

    p = sub.add_parser("report", help="assemble the report from analysis files")
    _common(p)

    p = sub.add_parser("run", help="every stage in order")
    _common(p)
    return parser


def _import_inputs(src: Path, dst: Path):
    if src.resolve() == dst.resolve():
        return
    if not src.is_dir():
        raise FileNotFoundError(f"input directory {src} does not exist")
    for f in sorted(src.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            target = dst / f.relative_to(src)
            if not target.exists():
                target.parent.mkdir(parents=True, exist_ok=True)
                shutil.copy2(f, target)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    out: Path = args.out
    try:
        inp = getattr(args, "inp", None)
        if inp is not None:
            _import_inputs(inp, out)
        cfg = load_run_config(out, args.config, args.seed)
        if args.command == "simulate":
            result = SIMULATE[args.stage](cfg, out)
        elif args.command == "analyze":
            if args.stage == "hbt":
                result = analyze_hbt(cfg, out, bin_ns=args.bin_ns, window_ns=args.window_ns,
                                     rho=args.rho)
            else:
                result = ANALYZE[args.stage](cfg, out)
        elif args.command == "report":
            rep = report(cfg, out)
            sys.stdout.write(rep.to_text())
            return 0
        else:
            for fn in (simulate_implant, analyze_pulses, simulate_pl, analyze_pl, simulate_hbt):
                fn(cfg, out)
            analyze_hbt(cfg, out)
            rep = report(cfg, out)
            sys.stdout.write(rep.to_text())
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error in {exc.stage} ({exc.module}): {exc.original}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    log.info("%s", result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
