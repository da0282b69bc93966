"""Training strategies compared against each other: Single, Cross, Mix,
Ensemble, Fed, Fed-MoE and Fed-Align.

Every strategy sees the same subject-wise folds and the same per-site
z-normalization (statistics from that site's training subjects).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FoldSplit, SubjectFeatures, zscore_apply, zscore_fit
from .evaluation import ResultRecord, evaluate_subjects
from .federation import FedConfig, SiteData, predict_probs, run_fed, train_centralized

STRATEGIES = ("single", "cross", "mix", "ensemble", "fed", "fed-moe", "fed-align")


@dataclass(frozen=True)
class StrategyKind:
    name: str
    train_site: str | None = None  # Cross / Ensemble partner override

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}")

    @classmethod
    def parse(cls, text: str) -> "StrategyKind":
        name, _, site = text.partition(":")
        return cls(name.strip().lower(), site.strip() or None)

    @property
    def label(self) -> str:
        return f"{self.name}:{self.train_site}" if self.train_site else self.name


@dataclass
class FoldData:
    train: dict[str, list[SubjectFeatures]]
    test: dict[str, list[SubjectFeatures]]

    @property
    def sites(self) -> list[str]:
        return sorted(self.train)

    def site_data(self, site: str) -> SiteData:
        subs = self.train[site]
        return SiteData(site, np.concatenate([s.windows for s in subs]),
                        np.concatenate([np.full(len(s.windows), s.label) for s in subs]))


def by_site(subjects: list[SubjectFeatures]) -> dict[str, list[SubjectFeatures]]:
    out: dict[str, list[SubjectFeatures]] = {}
    for s in subjects:
        out.setdefault(s.site_id, []).append(s)
    return out


def prepare_fold(features: list[SubjectFeatures], folds: FoldSplit, fold: int) -> FoldData:
    """Normalized train/test split of one fold. Subjects are taken in id order, so the
    result does not depend on how the input list was ordered."""
    features = sorted(features, key=lambda s: s.subject_id)
    test_ids = folds.fold_subjects(fold)
    train = [s for s in features if s.subject_id not in test_ids]
    test = [s for s in features if s.subject_id in test_ids]
    stats = zscore_fit(train)
    return FoldData(by_site(zscore_apply(stats, train)), by_site(zscore_apply(stats, test)))


def prepare_full(features: list[SubjectFeatures]) -> FoldData:
    """Each whole site normalized by its own statistics (train == test)."""
    features = sorted(features, key=lambda s: s.subject_id)
    norm = by_site(zscore_apply(zscore_fit(features), features))
    return FoldData(norm, norm)


def _record(kind, site, fold, config, accs) -> ResultRecord:
    return ResultRecord(kind, site, fold, config.seed, config.tau, config.noise.mechanism,
                        config.noise.alpha, accs[0], accs[1])


def partner_site(sites: list[str], site: str) -> str:
    return sites[(sites.index(site) + 1) % len(sites)]


def _pooled(fold: FoldData, name="mix") -> SiteData:
    parts = [fold.site_data(s) for s in fold.sites]
    return SiteData(name, np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]))


def train_single(fold: FoldData, site: str, config: FedConfig):
    return train_centralized(fold.site_data(site), config, arch="single-mlp")[0]


def train_cross(full: FoldData, site: str, config: FedConfig):
    return train_centralized(full.site_data(site), config, arch="single-mlp")[0]


def _test_windows(fold: FoldData, site: str) -> tuple[np.ndarray, np.ndarray]:
    subs = fold.test[site]
    return (np.concatenate([s.windows for s in subs]),
            np.concatenate([np.full(len(s.windows), s.label) for s in subs]))


def run_fold(kind: StrategyKind, fold: FoldData, fold_index: int, config: FedConfig,
             full: FoldData | None = None, sink: dict | None = None, **adapt_kwargs) -> list[ResultRecord]:
    """Train one strategy on one fold; one record per evaluated site.

    If ``sink`` is a dict it receives by-products: ``models`` (site -> model
    used for that site, where one exists), ``telemetry`` (federated variants),
    ``gates`` (Fed-MoE: site -> test-window gate values) and ``features``
    (Fed-Align: site -> generator features of the test windows).
    """
    sites = fold.sites
    name = kind.name
    records = []
    sink = {} if sink is None else sink
    models = sink.setdefault("models", {})
    if name == "single":
        for site in sites:
            model = models[site] = train_single(fold, site, config)
            accs = evaluate_subjects(lambda X: predict_probs(model, X), fold.test[site])
            records.append(_record(name, site, fold_index, config, accs))
    elif name == "mix":
        model, _ = train_centralized(_pooled(fold), config, arch="fed-mlp")
        for site in sites:
            models[site] = model
            accs = evaluate_subjects(lambda X: predict_probs(model, X), fold.test[site])
            records.append(_record(name, site, fold_index, config, accs))
    elif name == "fed":
        result = run_fed(config, [fold.site_data(s) for s in sites])
        sink["telemetry"] = result.telemetry
        for site in sites:
            model = models[site] = result.model_for(site)
            accs = evaluate_subjects(lambda X: predict_probs(model, X), fold.test[site])
            records.append(_record(name, site, fold_index, config, accs))
    elif name == "ensemble":
        if full is None:
            raise ValueError("ensemble needs whole-site data for its cross model")
        cross_models = {}
        for site in sites:
            other = kind.train_site or partner_site(sites, site)
            if other == site:
                other = partner_site(sites, site)
            if other not in cross_models:
                cross_models[other] = train_cross(full, other, config)
            single = train_single(fold, site, config)
            cross = cross_models[other]

            def predict(X, a=single, b=cross):
                return 0.5 * (predict_probs(a, X) + predict_probs(b, X))

            accs = evaluate_subjects(predict, fold.test[site])
            records.append(_record(name, site, fold_index, config, accs))
    elif name == "fed-moe":
        from .adaptation import train_fed_moe

        result = train_fed_moe(config, [fold.site_data(s) for s in sites], **adapt_kwargs)
        sink["telemetry"] = result.telemetry
        sink["gates"] = {site: result.gates(site, _test_windows(fold, site)[0]) for site in sites}
        for site in sites:
            accs = evaluate_subjects(lambda X: result.predict(site, X), fold.test[site])
            records.append(_record(name, site, fold_index, config, accs))
    elif name == "fed-align":
        from .adaptation import run_fed_align

        result = run_fed_align(config, [fold.site_data(s) for s in sites], **adapt_kwargs)
        model = result.global_model
        sink["telemetry"] = result.telemetry
        sink["features"] = {site: result.features(_test_windows(fold, site)[0]) for site in sites}
        for site in sites:
            models[site] = model
            accs = evaluate_subjects(lambda X: predict_probs(model, X), fold.test[site])
            records.append(_record(name, site, fold_index, config, accs))
    else:
        raise ValueError(f"{name} is not a fold-based strategy")
    return records


def run_cross(train_site: str, full: FoldData, config: FedConfig) -> list[ResultRecord]:
    """Train on one whole site, test on every other whole site (fold = -1)."""
    if train_site not in full.train:
        raise ValueError(f"unknown site {train_site!r} for cross strategy")
    model = train_cross(full, train_site, config)
    out = []
    for site in full.sites:
        if site == train_site:
            continue
        accs = evaluate_subjects(lambda X: predict_probs(model, X), full.test[site])
        out.append(_record(f"cross:{train_site}", site, -1, config, accs))
    return out


def run_strategy(kind: StrategyKind, features: list[SubjectFeatures], folds: FoldSplit,
                 config: FedConfig, **adapt_kwargs) -> list[ResultRecord]:
    """Per-site, per-fold accuracies of one strategy."""
    if kind.name == "cross":
        full = prepare_full(features)
        sites = [kind.train_site] if kind.train_site else full.sites
        return [r for s in sites for r in run_cross(s, full, config)]
    full = prepare_full(features) if kind.name == "ensemble" else None
    if kind.train_site and full is not None and kind.train_site not in full.train:
        raise ValueError(f"unknown site {kind.train_site!r}")
    records = []
    for f in range(folds.k):
        records += run_fold(kind, prepare_fold(features, folds, f), f, config, full=full, **adapt_kwargs)
    return records
