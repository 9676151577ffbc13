"""Command-line entry point ``homogfc``.

Exit codes: 0 ok, 2 config error, 3 numerical error, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import from_dict, load_config
from .errors import ConfigError, HomogError
from .pipeline import ORDER, emit_plot_data, run_pipeline

log = logging.getLogger("homogfc")

# subcommand -> (stage, main output file printed when --out is absent)
_STAGE_CMDS = {"scaling": ("scaling", "scaling.json"), "drifts": ("drifts", "drifts.json"),
               "cell": ("cell", "cell.json"), "tensors": ("tensors", "tensors.json"),
               "macro": ("macro", None), "validate": ("validate", None)}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="artifact directory")
    common.add_argument("--threads", type=int, help="worker threads for table nodes and eps sweeps")
    common.add_argument("--seed", type=int, help="mesh jitter seed (0 = canonical mesh)")
    common.add_argument("--force", action="store_true", help="ignore cached stage outputs")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="homogfc", parents=[common],
                                description="Periodic homogenization of reactive transport with drift")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("scaling", parents=[common], help="dimensionless numbers and regime")
    sub.add_parser("drifts", parents=[common], help="effective capacity and drifts")
    c = sub.add_parser("cell", parents=[common], help="corrector cell problems at (T0, C0)")
    c.add_argument("--T0", type=float)
    c.add_argument("--C0", type=float)
    t = sub.add_parser("tensors", parents=[common], help="effective tensors")
    t.add_argument("--table", action="store_true", help="print the tensor table instead")
    sub.add_parser("macro", parents=[common], help="homogenized macro run")
    v = sub.add_parser("validate", parents=[common], help="micro runs and moving-frame errors")
    v.add_argument("--eps", help="comma-separated n values, epsilon = 1/n (e.g. 4,8,16)")
    pl = sub.add_parser("pipeline", parents=[common], help="run several stages")
    pl.add_argument("--stages", default=",".join(ORDER), help=f"subset of {','.join(ORDER)}")
    pd = sub.add_parser("plotdata", parents=[common], help="tidy CSV series from artifacts")
    pd.add_argument("dir", nargs="?", help="artifact directory (defaults to --out)")
    return p


def _load(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("--config is required")
    data = cfg.data
    if args.seed is not None:
        data["seed"] = args.seed
    if args.threads is not None:
        data["threads"] = args.threads
    if getattr(args, "T0", None) is not None:
        data["cell"]["T0"] = args.T0
    if getattr(args, "C0", None) is not None:
        data["cell"]["C0"] = args.C0
    if getattr(args, "eps", None):
        try:
            data["micro"]["eps"] = [int(s) for s in args.eps.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--eps must be comma-separated integers, got {args.eps!r}") from exc
    # re-validate after overrides
    return from_dict(data, cfg.base_dir)


def _run(args) -> int:
    if args.command == "plotdata":
        target = args.dir or args.out
        if not target:
            raise ConfigError("plotdata needs an artifact directory")
        for name in emit_plot_data(target):
            print(name)
        return 0
    cfg = _load(args)
    if args.command == "pipeline":
        stages = [s for s in args.stages.split(",") if s]
        if not args.out:
            raise ConfigError("pipeline needs --out")
        status = run_pipeline(cfg, stages, args.out, force=args.force)
        print(json.dumps(status, sort_keys=True))
        return 0
    stage, main_file = _STAGE_CMDS[args.command]
    if args.command == "tensors" and args.table:
        main_file = "tensor_table.json"
    if args.out:
        status = run_pipeline(cfg, [stage], args.out, force=args.force)
        log.info("stages: %s", status)
        if main_file:
            sys.stdout.write((Path(args.out) / main_file).read_text(encoding="utf-8"))
        else:
            print(json.dumps(status, sort_keys=True))
        return 0
    if main_file is None:
        raise ConfigError(f"{args.command} writes field files and needs --out")
    with tempfile.TemporaryDirectory() as tmp:
        run_pipeline(cfg, [stage], tmp, force=True)
        sys.stdout.write((Path(tmp) / main_file).read_text(encoding="utf-8"))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except HomogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
