"""Fed accuracy across communication paces.

Usage: python3 scripts/pace_sweep.py configs/acceptance.yaml [--out DIR] [--threads N]
"""

import argparse

import numpy as np

from fedfmri.config import load_config
from fedfmri.evaluation import welch_t
from fedfmri.experiments import execute


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--out", default="results/pace")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config)
    outputs = execute(cfg, "sweep-pace", args.out, args.threads)
    # one accuracy per seed: mean over folds and sites
    per_tau = {}
    for o in outputs:
        for r in o.records:
            per_tau.setdefault(r.tau, {}).setdefault(r.seed, []).append(r.subject_acc)
    means = {tau: np.array([np.mean(v) for _, v in sorted(seeds.items())]) for tau, seeds in sorted(per_tau.items())}
    for tau, m in means.items():
        print(f"tau={tau:<3} acc={m.mean():.3f} (std {m.std(ddof=1):.3f} over {len(m)} seeds)")
    lo, hi = min(means), max(means)
    t, p = welch_t(means[lo], means[hi])
    print(f"Welch tau={lo} vs tau={hi}: t={t:.3f} p={p:.3f}")


if __name__ == "__main__":
    main()
