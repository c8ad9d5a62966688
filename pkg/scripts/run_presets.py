"""Run experiment presets into $SLIMMAT_RUNS_DIR (default runs/), sharing one teacher.

    python scripts/run_presets.py --presets motivation main ratio_sweep mismatch no_kd_baseline
"""
import argparse
import time

import torch

from slimmat.config import StageConfig, load_config
from slimmat.pipeline import PRESETS, Dataset, RunDir, run_experiment_preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--presets", nargs="+", default=list(PRESETS), choices=PRESETS)
    ap.add_argument("--run", default="presets", help="one run directory shared by all presets")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(args.config) if args.config else StageConfig()
    data = Dataset.synthetic(cfg)
    run = RunDir(args.run)
    for name in args.presets:
        t0 = time.time()
        report = run_experiment_preset(name, cfg, data, run)
        (run.path / f"report_{name}.md").write_text(report.to_markdown())
        (run.path / f"report_{name}.csv").write_text(report.to_csv())
        print(report.to_markdown(), flush=True)
        print(f"[{name}: {time.time() - t0:.0f}s]", flush=True)


if __name__ == "__main__":
    main()
