"""Site separability of generator features with and without adversarial alignment.

Fresh discriminators are trained on features of training subjects and scored on
held-out subjects; 0.5 means the sites cannot be told apart.

Usage: python3 scripts/alignment_probe.py configs/shift.yaml [--fold 0]
"""

import argparse

import numpy as np

from fedfmri.adaptation import domain_probe_accuracy, run_fed_align
from fedfmri.config import load_config
from fedfmri.data import subject_kfold
from fedfmri.experiments import Cell, fed_config_for, load_data
from fedfmri.privacy import NoiseSpec
from fedfmri.strategies import prepare_fold


def stacked(subjects):
    return np.concatenate([s.windows for s in subjects])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--fold", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(args.config)
    for seed in cfg.seeds:
        data = load_data(cfg, seed)
        fold = prepare_fold(data.features, subject_kfold(data.features, cfg.k_folds, seed), args.fold)
        sites = [fold.site_data(s) for s in fold.sites]
        fed = fed_config_for(cfg, Cell("fed-align", seed, cfg.fed.tau))
        noise = NoiseSpec("gaussian", cfg.adapt.feature_noise_alpha, seed)
        raw = domain_probe_accuracy({s: stacked(fold.train[s]) for s in fold.sites}, seed,
                                    held_out={s: stacked(fold.test[s]) for s in fold.sites})
        accs = []
        for align in (False, True):
            res = run_fed_align(fed, sites, warmup_epochs=cfg.adapt.warmup_epochs, feature_noise=noise, align=align)
            train = {s: res.features(stacked(fold.train[s])) for s in fold.sites}
            test = {s: res.features(stacked(fold.test[s])) for s in fold.sites}
            accs.append(domain_probe_accuracy(train, seed, held_out=test))
        print(f"seed={seed:<3} input {raw:.3f}  features before {accs[0]:.3f}  after {accs[1]:.3f}")


if __name__ == "__main__":
    main()
