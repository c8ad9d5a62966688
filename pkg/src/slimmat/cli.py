"""``slimmat`` command line.

Exit codes: 0 ok, 1 stage failure, 2 bad flags or config, 3 refusal to
overwrite, 4 missing checkpoint or dataset.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ConfigError, StageConfig, load_config
from .data import MIN_SIZE, DatasetExistsError, generate_dataset, load_split
from .losses import KDMethod, LossConfigError
from .metrics import METRIC_COLUMNS
from .netgraph import load_checkpoint, save_checkpoint
from .pipeline import (PRESETS, Dataset, MissingArtifactError, RunDir, run_experiment_preset,
                       run_train_stage, train_plain, train_teacher)
from .pruner import prune_student, run_prune_stage
from .training import TensorData, evaluate

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_EXISTS, EXIT_MISSING = 0, 1, 2, 3, 4

log = logging.getLogger("slimmat")


class _Missing(Exception):
    def __init__(self, path):
        super().__init__(f"missing: {path}")
        self.path = path


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise _Missing(p)
    return p


def _config(args) -> StageConfig:
    cfg = load_config(_existing(args.config)) if args.config else StageConfig()
    changes = {}
    if getattr(args, "ratio", None) is not None:
        changes["ratio"] = args.ratio
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _dataset(args, cfg) -> Dataset:
    if args.data is None:
        return Dataset.synthetic(cfg)
    return Dataset.from_dir(_existing(args.data))


def _size_arg(text):
    v = int(text)
    if v < MIN_SIZE:
        raise argparse.ArgumentTypeError(f"size must be >= {MIN_SIZE}")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.out, args.n_train, args.n_test, args.size, args.seed, args.force)
    print(manifest)
    return EXIT_OK


def cmd_teacher(args) -> int:
    cfg = _config(args)
    run = RunDir(args.run)
    run.freeze_config(cfg)
    out = run.ckpt("teacher")
    if out.exists() and not args.force:
        raise DatasetExistsError(f"{out} exists; pass --force to retrain")
    net, train_log = train_teacher(cfg, _dataset(args, cfg))
    save_checkpoint(net, out, {"stage": "teacher"})
    train_log.write_csv(run.logfile("teacher"))
    print(out)
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    teacher = load_checkpoint(_existing(args.teacher))
    run = RunDir(args.run)
    run.freeze_config(cfg)
    data = _dataset(args, cfg)
    sparse, train_log = run_prune_stage(teacher, cfg, data.train)
    train_log.write_csv(run.logfile("prune"))
    save_checkpoint(sparse, run.ckpt("sparse"), {"stage": "prune"})
    pruned, report = prune_student(sparse, cfg.ratio, cfg.min_keep_fraction, cfg.size)
    save_checkpoint(pruned, run.ckpt("pruned"), {"stage": "pruned", "ratio": cfg.ratio})
    report.write(run.path)
    print(f"tau_enc={report.tau_enc:.6g} tau_dec={report.tau_dec:.6g} "
          f"params_before={report.params_before} params_after={report.params_after}")
    print(run.ckpt("pruned"))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    pruned = load_checkpoint(_existing(args.student))
    run = RunDir(args.run)
    run.freeze_config(cfg)
    data = _dataset(args, cfg)
    if args.plain:
        net, train_log = train_plain(pruned, cfg, data)
    else:
        teacher = load_checkpoint(_existing(args.teacher))
        kd = KDMethod(args.kd) if args.kd else None
        net, train_log = run_train_stage(pruned, teacher, cfg, data, kd)
    out = run.ckpt("final")
    save_checkpoint(net, out, {"stage": "train"})
    train_log.write_csv(run.logfile("train"))
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_checkpoint(_existing(args.model))
    data = TensorData.from_samples(load_split(_existing(args.data)))
    rows, agg = evaluate(net, data)
    if args.per_image:
        with open(args.per_image, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["index", *METRIC_COLUMNS[:4]], lineterminator="\n")
            w.writeheader()
            for i, r in enumerate(rows):
                w.writerow({"index": i, **r})
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    w.writerow([f"{agg[c]:.6g}" if isinstance(agg[c], float) else agg[c] for c in METRIC_COLUMNS])
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    run = RunDir(args.run or args.preset)
    data = _dataset(args, cfg)
    report = run_experiment_preset(args.preset, cfg, data, run, not args.no_train_teacher)
    print(report.to_markdown())
    print(run.path / "report.md")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slimmat", description="Distillation-guided channel pruning for matting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic composite dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=_nonneg, default=200)
    g.add_argument("--n-test", type=_nonneg, default=20)
    g.add_argument("--size", type=_size_arg, default=64)
    g.add_argument("--seed", type=_nonneg, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def common(sp, data_required=False):
        sp.add_argument("--config", help="YAML config (schema slimmat/v1); defaults apply if omitted")
        sp.add_argument("--data", required=data_required, help="dataset root (synthetic in-memory data if omitted)")
        sp.add_argument("--run", default=sp.prog.split()[-1], help="run directory name under $SLIMMAT_RUNS_DIR")
        sp.add_argument("--seed", type=_nonneg)

    t = sub.add_parser("teacher", help="train the unpruned teacher")
    common(t)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_teacher)

    pr = sub.add_parser("prune", help="pruning stage plus structural prune")
    common(pr)
    pr.add_argument("--teacher", required=True)
    pr.add_argument("--ratio", type=float)
    pr.set_defaults(func=cmd_prune)

    tr = sub.add_parser("train", help="training stage for a pruned architecture")
    common(tr)
    tr.add_argument("--student", required=True, help="pruned checkpoint (architecture source)")
    tr.add_argument("--teacher")
    tr.add_argument("--kd", choices=("NST", "OFD", "SPKD"))
    tr.add_argument("--plain", action="store_true", help="ground-truth loss only, no teacher")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint; prints a CSV header and row")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="split directory or dataset root (test split)")
    e.add_argument("--per-image")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="run an experiment preset and write report.md/report.csv")
    common(r)
    r.set_defaults(run=None, func=cmd_report)
    r.add_argument("--preset", required=True, choices=PRESETS)
    r.add_argument("--no-train-teacher", action="store_true",
                   help="fail instead of training a missing teacher")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.plain and not args.teacher:
        parser.error("train needs --teacher unless --plain is given")
    try:
        return args.func(args)
    except (ConfigError, LossConfigError) as exc:
        keys = getattr(exc, "keys", ())
        print(f"config error: {exc}" + (f" (keys: {', '.join(keys)})" if keys else ""), file=sys.stderr)
        return EXIT_USAGE
    except DatasetExistsError as exc:
        print(f"refusing to overwrite: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except _Missing as exc:
        print(f"not found: {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except MissingArtifactError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # any stage failure
        log.exception("stage failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
