"""Command-line entry points.

    gnmlab train --config run.cfg [--optimizer gnm] [--seed 3] [--out runs/a]
                 [--landscape slice.csv] [--dump-data train.txt]
    gnmlab compare runs/a/report.jsonl runs/b/report.jsonl
    gnmlab landscape --checkpoint runs/a/model.ckpt --config run.cfg --out slice.csv

Exit status is 0 on success, 1 when a run aborted on a non-finite loss, and
2 for usage or input errors (bad config, unreadable file), with a one-line
reason on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from gnmlab.checkpoint import load_checkpoint, save_checkpoint
from gnmlab.config import ConfigError, RunConfig, apply_overrides, load_config
from gnmlab.data import dump_dataset_text
from gnmlab.harness import (
    RunReport,
    compare_runs,
    dataset_from_config,
    execute_run,
    initial_state,
    run_landscape,
)
from gnmlab.landscape import write_grid_csv

__all__ = ["main"]


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "optimizer", None):
        overrides["optim.kind"] = args.optimizer
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = str(args.seed)
    if getattr(args, "out_dir", None):
        overrides["run.out_dir"] = args.out_dir
    return apply_overrides(cfg, overrides)


def cmd_train(args) -> int:
    cfg = _load(args)
    report, clf, ds = execute_run(cfg)
    out_dir = Path(cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write(out_dir / "report.jsonl")
    save_checkpoint(clf.params_, out_dir / "model.ckpt")
    if args.dump_data:
        dump_dataset_text(ds, args.dump_data)
    if args.landscape:
        grid = run_landscape(cfg, clf.model_state_, clf.params_, ds)
        write_grid_csv(grid, args.landscape)
    s = report.summary
    print(f"optimizer={s['optimizer']} seed={s['seed']} steps={s['steps']} "
          f"forwards={s['forwards']} backwards={s['backwards']} test_acc={s['test_acc']:.4f}")
    print(f"wrote {out_dir / 'report.jsonl'} and {out_dir / 'model.ckpt'}")
    if s["aborted"]:
        ab = clf.aborted_
        print(f"error: run aborted at epoch {ab['epoch']}, step {ab['step']}: {ab['reason']}",
              file=sys.stderr)
        return 1
    return 0


def cmd_compare(args) -> int:
    reports = [RunReport.read(path) for path in args.reports]
    print(compare_runs(reports).table, end="")
    return 0


def cmd_landscape(args) -> int:
    cfg = _load(args)
    params = load_checkpoint(args.checkpoint)
    state = initial_state(cfg).with_trainable(params)
    ds = dataset_from_config(cfg)
    grid = run_landscape(cfg, state, params, ds)
    write_grid_csv(grid, args.out)
    print(f"wrote {args.out} ({grid.resolution}x{grid.resolution} grid, range {grid.range})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnmlab",
                                     description="Train and inspect small long-tail classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model and write report + checkpoint")
    p_train.add_argument("--config", help="config file (omit for all defaults)")
    p_train.add_argument("--optimizer", choices=["sgd", "sam", "gnm"],
                         help="override optim.kind")
    p_train.add_argument("--seed", type=int, help="override run.seed")
    p_train.add_argument("--out", dest="out_dir", help="override run.out_dir")
    p_train.add_argument("--landscape", metavar="CSV",
                         help="also write a loss-landscape slice around the final parameters")
    p_train.add_argument("--dump-data", metavar="FILE",
                         help="also write the training split as text")
    p_train.set_defaults(func=cmd_train)

    p_cmp = sub.add_parser("compare", help="tabulate pass counts and accuracy across reports")
    p_cmp.add_argument("reports", nargs="+", metavar="REPORT")
    p_cmp.set_defaults(func=cmd_compare)

    p_land = sub.add_parser("landscape", help="loss-landscape slice around a checkpoint")
    p_land.add_argument("--checkpoint", required=True)
    p_land.add_argument("--config", help="config file (omit for all defaults)")
    p_land.add_argument("--out", required=True, metavar="CSV")
    p_land.set_defaults(func=cmd_landscape)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
