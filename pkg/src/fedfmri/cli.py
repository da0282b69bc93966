"""Command-line entry point: ``fedfmri <command> config.yaml [--seed N] [--out DIR] [--threads N]``.

The output directory is taken from ``--out``, else the ``FEDFMRI_OUT``
environment variable, else the config's ``out`` field.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import execute, interpret_command, preprocess_command, report_command, synth_command

OUT_ENV = "FEDFMRI_OUT"
log = logging.getLogger("fedfmri")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfmri", description="Federated fMRI classification experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("config", help="YAML experiment config")
        p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the config's seed list")
        p.add_argument("--threads", type=int, default=1, help="worker processes for independent cells")
        return p

    add("preprocess", "ROI CSV series -> windowed connectivity features")
    add("synth", "write a synthetic multi-site dataset as ROI CSVs")
    add("run", "train and evaluate every configured strategy")
    add("sweep-pace", "Fed accuracy across the tau grid (no noise)")
    add("sweep-noise", "Fed accuracy across the noise grid")
    add("interpret", "fold-averaged biomarker ROI rankings")
    rep = add("report", "summarize a results.csv", config=False)
    rep.add_argument("results", help="results.csv from run or a sweep")
    rep.add_argument("--baseline", help="strategy to Welch-test every other strategy against")
    return parser


def output_dir(args, cfg: ExperimentConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return cfg.resolve(cfg.out) if cfg is not None else Path(".")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.command == "report":
            out = output_dir(args, None)
            target = out / "summary.csv" if out.is_dir() or not out.suffix else out
            target.parent.mkdir(parents=True, exist_ok=True)
            rows = report_command(args.results, target, args.baseline)
            for r in rows:
                print(f"{r['strategy']:<16} {r['site']:<10} tau={r['tau']:<3} {r['mechanism']:<8} "
                      f"alpha={r['alpha']:<6g} acc={r['mean_subject_acc']:.3f} (std {r['std_subject_acc']:.3f}, n={r['n']})")
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seeds = [args.seed]
        out = output_dir(args, cfg)
        if args.command == "synth":
            print(synth_command(cfg, out, cfg.seeds[0]))
        elif args.command == "preprocess":
            print(preprocess_command(cfg, out))
        elif args.command == "interpret":
            interpret_command(cfg, out, args.threads)
        else:
            execute(cfg, args.command, out, args.threads)
        log.info("wrote %s", out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
