"""Pruning-stage sparsity with and without the L1 term on batch-norm gammas.

    python scripts/sparsity.py --out runs/sparsity
"""
import argparse
import json
from pathlib import Path

import numpy as np
import torch

from slimmat.config import StageConfig, load_config
from slimmat.pipeline import Dataset, train_teacher
from slimmat.pruner import run_prune_stage
from slimmat.training import near_zero_fraction


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--lambda3", type=float, nargs="+", default=[0.0, 1e-4])
    ap.add_argument("--out", default="runs/sparsity")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(args.config) if args.config else StageConfig()
    data = Dataset.synthetic(cfg)
    teacher, _ = train_teacher(cfg, data)
    out = {}
    for l3 in args.lambda3:
        lambdas = (cfg.lambdas[0], cfg.lambdas[1], l3, cfg.lambdas[3])
        student, log = run_prune_stage(teacher, cfg.replace(lambdas=lambdas), data.train)
        gammas = np.concatenate([np.abs(student.weights[b]["gamma"].numpy()) for b in student.bn_ids()])
        out[str(l3)] = {
            "near_zero_final": near_zero_fraction(student),
            "near_zero_per_epoch": [e["near_zero_gamma"] for e in log.epochs],
            "gamma_quantiles": dict(zip(("min", "p10", "median", "p90", "max"),
                                        np.quantile(gammas, [0, 0.1, 0.5, 0.9, 1]).tolist())),
        }
        print(f"lambda3={l3:g}: fraction |gamma|<1e-2 = {out[str(l3)]['near_zero_final']:.4f}", flush=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "sparsity.json").write_text(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
