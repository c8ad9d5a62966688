"""UNI+KD vs Ours+KD vs Ours-from-scratch at one ratio, averaged over seeds.

    python scripts/main_direction.py --seeds 0 1 2 --ratio 0.5 --kd SPKD --out runs/direction
"""
import argparse
import json
import time
from pathlib import Path

import torch

from slimmat.config import StageConfig, load_config
from slimmat.losses import KDMethod
from slimmat.pipeline import Dataset, Experiment, RunDir


def run_seed(cfg, data, root, kd):
    run = RunDir(f"seed{cfg.seed}", root)
    exp = Experiment(cfg, data, run)
    pct = round(cfg.ratio * 100)
    out = {}
    out["UNI+KD"] = exp.trained(f"UNI_{pct}_{kd.name}", exp.pruned("UNI", cfg.ratio), kd)
    ours = exp.pruned("Ours", cfg.ratio, kd)
    out["Ours+KD"] = exp.trained(f"Ours_{pct}_{kd.name}", ours, kd)
    out["Ours scratch"] = exp.trained(f"Ours_{pct}_{kd.name}_plain", ours, None)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--ratio", type=float, default=0.5)
    ap.add_argument("--kd", default="SPKD")
    ap.add_argument("--out", default="runs/direction")
    args = ap.parse_args()
    torch.set_num_threads(1)
    base = load_config(args.config) if args.config else StageConfig()
    kd = KDMethod(args.kd)
    base = base.replace(ratio=args.ratio, kd=kd)
    data = Dataset.synthetic(base)
    results = {}
    for seed in args.seeds:
        t0 = time.time()
        results[seed] = run_seed(base.replace(seed=seed), data, Path(args.out), kd)
        print(f"seed {seed} ({time.time() - t0:.0f}s):",
              {k: round(v["SAD"], 4) for k, v in results[seed].items()}, flush=True)
    rows = list(next(iter(results.values())))
    means = {r: sum(results[s][r]["SAD"] for s in results) / len(results) for r in rows}
    print("mean SAD:", {k: round(v, 4) for k, v in means.items()})
    print("Ours+KD <= UNI+KD:", means["Ours+KD"] <= means["UNI+KD"])
    print("Ours+KD <= Ours scratch:", means["Ours+KD"] <= means["Ours scratch"])
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "direction.json").write_text(json.dumps({"per_seed": results, "mean_sad": means}, indent=2))


if __name__ == "__main__":
    main()
