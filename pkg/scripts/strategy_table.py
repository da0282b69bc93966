"""Per-site accuracy of every configured strategy, with Welch tests against a baseline.

Usage: python3 scripts/strategy_table.py configs/acceptance.yaml [--baseline single] [--out DIR]
"""

import argparse
from pathlib import Path

from fedfmri.config import load_config
from fedfmri.experiments import execute, report_command


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--baseline", default="single")
    ap.add_argument("--out", default="results/strategies")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config)
    execute(cfg, "run", args.out, args.threads)
    rows = report_command(Path(args.out) / "results.csv", Path(args.out) / "summary.csv", args.baseline)
    print(f"{'strategy':<12} {'site':<8} {'acc':>6} {'std':>6} {'p vs ' + args.baseline:>12}")
    for r in rows:
        p = r.get("welch_p_vs_baseline")
        print(f"{r['strategy']:<12} {r['site']:<8} {r['mean_subject_acc']:6.3f} {r['std_subject_acc']:6.3f} "
              f"{'' if p is None else f'{p:.4f}':>12}")


if __name__ == "__main__":
    main()
