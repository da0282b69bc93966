"""Planted-ROI recovery and cross-site consistency of guided-backprop rankings.

Usage: python3 scripts/biomarkers.py configs/biomarkers.yaml [--strategies fed single]
"""

import argparse

import numpy as np

from fedfmri.config import load_config
from fedfmri.experiments import fold_averaged_report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--strategies", nargs="+", default=["fed", "single"])
    args = ap.parse_args()
    cfg = load_config(args.config)
    for strategy in args.strategies:
        for seed in cfg.seeds:
            rep, data = fold_averaged_report(cfg, seed, strategy)
            planted = set(data.informative.tolist())
            hits = [len(planted & set(t.tolist())) for t in rep.top_k.values()]
            print(f"{strategy:<8} seed={seed:<3} planted in top-{rep.k}: mean {np.mean(hits):.1f} "
                  f"min {min(hits)}  jaccard HC {rep.consistency[0]:.2f} ASD {rep.consistency[1]:.2f}")


if __name__ == "__main__":
    main()
