"""Fed accuracy across noise mechanisms and levels, next to a noiseless reference.

Usage: python3 scripts/noise_sweep.py configs/acceptance.yaml [--out DIR] [--threads N]
"""

import argparse
from collections import defaultdict

import numpy as np

from fedfmri.config import load_config
from fedfmri.experiments import Cell, execute, run_cells
from fedfmri.privacy import NoiseSpec, budget_row


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--out", default="results/noise")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config)
    outputs = execute(cfg, "sweep-noise", args.out, args.threads)
    clean = run_cells(cfg, [Cell("fed", s, cfg.fed.tau) for s in cfg.seeds], args.threads)
    ref = np.mean([r.subject_acc for o in clean for r in o.records])
    print(f"noiseless          acc={ref:.3f}")
    acc = defaultdict(list)
    for o in outputs:
        for r in o.records:
            acc[(r.mechanism, r.alpha)].append(r.subject_acc)
    for (mech, alpha), v in sorted(acc.items()):
        b = budget_row(NoiseSpec(mech, alpha))
        print(f"{mech:<8} alpha={alpha:<6g} acc={np.mean(v):.3f} delta={np.mean(v) - ref:+.3f} "
              f"nominal eps={b['epsilon']:.3g}")


if __name__ == "__main__":
    main()
