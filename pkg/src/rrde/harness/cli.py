"""Command line entry point: ``rrde <verb> [--config FILE] [--seed S] [--out DIR] [--scale desk|paper]``.

Verbs:
  generate-data  write the synthetic train/validation manifests and face PNGs under OUT/data
  train          train and checkpoint every model for the configured seeds
  evaluate       recompute results.csv from the checkpoints in OUT
  sweep          train, evaluate and report in one go
  report         summary, plot data and figures from OUT/results.csv

The exit status is 0 only when every requested cell completed.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .. import dataset as ds
from . import experiment as ex
from .config import PRESETS, load_config
from .report import emit_report

log = logging.getLogger("rrde")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rrde", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="\n".join(__doc__.split("\n")[2:]))
    p.add_argument("verb", choices=("generate-data", "train", "evaluate", "sweep", "report"))
    p.add_argument("--config", type=Path, help="INI file overriding the preset")
    p.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    p.add_argument("--scale", choices=sorted(PRESETS), default="desk", help="preset to start from")
    p.add_argument("--workers", type=int, help="parallel seed cells")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    cfg = load_config(args.config, args.scale)
    if args.seed:
        cfg = replace(cfg, seeds=tuple(args.seed))
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _report_failures(failures) -> int:
    for seed, model, n, stage, msg in failures:
        print(f"FAILED seed={seed} model={model} n={n} stage={stage}: {msg}", file=sys.stderr)
    return 1 if failures else 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    out = args.out
    t0 = time.perf_counter()
    try:
        if args.verb == "generate-data":
            train, val = ex.load_data(_config(args))
            for m in (train, val):
                path = ds.write_manifest(m, out / "data" / m.split)
                print(f"{path}: {len(m.groups)} groups, class counts {m.per_class_counts}")
            return 0
        if args.verb == "train":
            return _report_failures(ex.train(_config(args), out))
        if args.verb == "evaluate":
            cfg = _config(args) if args.config or args.seed else None
            table = ex.evaluate(out, cfg)
            print(f"{len(table.rows)} rows -> {out / 'results.csv'}")
            return _report_failures(table.failures)
        if args.verb == "sweep":
            table = ex.run_experiment(_config(args), out)
            emit_report(table, out, figures=not args.no_figures)
            print(f"{len(table.rows)} rows in {time.perf_counter() - t0:.0f}s -> {out}")
            return _report_failures(table.failures)
        table = ex.read_table(out)
        for path in emit_report(table, out, figures=not args.no_figures):
            print(path)
        return _report_failures(table.failures)
    except (OSError, ValueError, KeyError) as exc:
        print(f"rrde {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
