"""Command-line harness.

Subcommands:
    gradcheck     finite-difference checks over every layer; gradcheck.csv
    equivalence   limit-case oracles (blend and group extremes); equivalence.csv
    train         one training run; curve.csv, summary.csv, model.ckpt
    ablate-batch  train BN and BCN across batch sizes; ablation.csv
    dump-mix      per-layer mixing-coefficient statistics from a checkpoint

Every config key can be set in a key = value file (--config) and
overridden by a --key=value flag; flags win.  Exit codes: 0 success,
1 oracle/assertion failure, 2 usage or config error, 3 I/O error.
"""

import argparse
import csv
import os
import sys
from dataclasses import fields

from . import experiments as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .experiments import (
    ExperimentConfig,
    OracleFailure,
    TrainingDiverged,
    UsageError,
)

EXIT_OK = 0
EXIT_ORACLE = 1
EXIT_USAGE = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(parser):
    for f in fields(ExperimentConfig):
        parser.add_argument(f"--{f.name}", default=None, metavar="V")


def _resolve_config(args):
    cfg = ExperimentConfig()
    if args.config:
        cfg = ex.load_config(args.config, cfg)
    overrides = [
        (f.name, getattr(args, f.name))
        for f in fields(ExperimentConfig)
        if getattr(args, f.name) is not None
    ]
    return ex.config_from_pairs(overrides, cfg).validate()


def _outdir(cfg):
    os.makedirs(cfg.outdir, exist_ok=True)
    return cfg.outdir


def cmd_gradcheck(args):
    reports = ex.gradcheck_suite(seed=int(args.seed), tol=float(args.tol))
    outdir = args.outdir
    os.makedirs(outdir, exist_ok=True)
    ex.write_gradcheck_csv(os.path.join(outdir, "gradcheck.csv"), reports)
    print(f"{'layer':<14} {'group':<8} {'max_rel_err':>12}  status")
    for report in reports:
        for layer, group, err, idx, h, tol, status in report.rows():
            print(f"{layer:<14} {group:<8} {err:>12.3e}  {status}")
    if not all(r.passed for r in reports):
        raise OracleFailure("gradient check failed; see gradcheck.csv")
    print(f"all gradient checks passed (report: {outdir}/gradcheck.csv)")


def cmd_equivalence(args):
    rows = ex.equivalence_suite(seed=int(args.seed))
    outdir = args.outdir
    os.makedirs(outdir, exist_ok=True)
    ex.write_equivalence_csv(os.path.join(outdir, "equivalence.csv"), rows)
    for pair, mode, dev, tol, ok in rows:
        print(f"{pair:<22} {mode:<6} max_dev={dev:.3e} tol={tol:.0e} "
              f"{'pass' if ok else 'FAIL'}")
    if not all(ok for *_, ok in rows):
        raise OracleFailure("equivalence oracle failed; see equivalence.csv")
    print(f"all equivalences hold (report: {outdir}/equivalence.csv)")


def cmd_train(args):
    cfg = _resolve_config(args)
    outdir = _outdir(cfg)
    record = ex.train_run(cfg)
    ex.write_curve_csv(os.path.join(outdir, "curve.csv"), record)
    ex.write_summary_csv(os.path.join(outdir, "summary.csv"), [record])
    save_checkpoint(os.path.join(outdir, "model.ckpt"), record.state)
    print(f"normalizer={cfg.normalizer} batch={cfg.batch_size} seed={cfg.seed} "
          f"epochs={len(record.rows)} steps={record.total_steps}")
    print(f"final train_acc={record.final_train_acc:.4f} "
          f"val_acc={record.final_val_acc:.4f} loss={record.final_loss:.4f} "
          f"wall={record.wall_time:.1f}s")
    for name, (lo, mean, hi) in record.mix_stats.items():
        print(f"{name}.mix min={lo:.4f} mean={mean:.4f} max={hi:.4f}")
    print(f"wrote {outdir}/curve.csv, summary.csv, model.ckpt")


def cmd_ablate_batch(args):
    cfg = _resolve_config(args)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --sizes {args.sizes!r}; expected comma-separated ints") from None
    outdir = _outdir(cfg)
    records, rows = ex.ablate_batch(cfg, sizes)
    ex.write_ablation_csv(os.path.join(outdir, "ablation.csv"), rows)
    for row in rows:
        print(f"{row['normalizer']:<4} batch={row['batch_size']:<4} "
              f"train={row['final_train_acc']} val={row['final_val_acc']}")
    print(f"wrote {outdir}/ablation.csv")


def cmd_dump_mix(args):
    state = load_checkpoint(args.checkpoint)
    stats = ex.mix_stats_from_state(state)
    if not stats:
        raise UsageError(
            f"{args.checkpoint}: no mixing coefficients found "
            "(not a batch-channel-normalized model)"
        )
    rows = [{"layer": name, "mix_min": f"{lo:.6f}", "mix_mean": f"{mean:.6f}",
             "mix_max": f"{hi:.6f}"} for name, (lo, mean, hi) in stats.items()]
    if args.outdir:
        os.makedirs(args.outdir, exist_ok=True)
        with open(os.path.join(args.outdir, "mix.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    for row in rows:
        print(f"{row['layer']:<10} min={row['mix_min']} mean={row['mix_mean']} "
              f"max={row['mix_max']}")


def build_parser():
    parser = _Parser(prog="bcnorm", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", default=7)
    p.add_argument("--tol", default=1e-4)
    p.add_argument("--outdir", default="runs/gradcheck")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("equivalence", help="limit-case equivalence oracles")
    p.add_argument("--seed", default=5)
    p.add_argument("--outdir", default="runs/equivalence")
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("train", help="train the small CNN")
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate-batch", help="batch-size ablation for bn and bcn")
    p.add_argument("--config", default=None)
    p.add_argument("--sizes", default=",".join(str(s) for s in ex.DEFAULT_ABLATION_SIZES))
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate_batch)

    p = sub.add_parser("dump-mix", help="mixing-coefficient statistics from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_dump_mix)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OracleFailure, TrainingDiverged) as exc:
        print(f"error: oracle: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (OSError, ValueError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
