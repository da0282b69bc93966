"""Experiment orchestration: cells, sweeps, and the CSV files they produce.

A cell is one (strategy, seed, tau, noise) combination run over every fold.
Cells are independent and deterministic, so they may run in worker processes;
outputs are always written in cell order.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, from_dict
from .data import (SubjectFeatures, extract_features, load_roi_csv, n_rois_for, subject_kfold, synth_generate,
                   write_dataset_csv)
from .evaluation import RESULT_FIELDS, ResultRecord, welch_t
from .interpret import BiomarkerReport, RoiScoreVector, jaccard, load_roi_names, site_class_scores, top_k, write_report_csv
from .nn import MlpModel, save_checkpoint
from .privacy import NoiseSpec, budget_row
from .strategies import StrategyKind, prepare_fold, prepare_full, run_cross, run_fold

log = logging.getLogger(__name__)

EPOCH_TELEMETRY_FIELDS = ("strategy", "seed", "fold", "tau", "mechanism", "alpha", "epoch", "site", "mean_loss",
                          "comm_events")
STEP_TELEMETRY_FIELDS = ("strategy", "seed", "fold", "tau", "mechanism", "alpha", "epoch", "step", "site", "loss",
                         "comm_event")
GATE_FIELDS = ("strategy", "seed", "fold", "tau", "mechanism", "alpha", "site", "bin_lo", "bin_hi", "count")
DISC_FIELDS = ("seed", "fold", "tau", "mechanism", "alpha", "epoch", "site", "disc_loss", "disc_acc")
BUDGET_FIELDS = ("mechanism", "alpha", "sigma_prime", "epsilon", "delta", "regime_flag")
GATE_BINS = 10


@dataclass(frozen=True)
class Cell:
    strategy: str
    seed: int
    tau: int
    mechanism: str = "none"
    alpha: float = 0.0

    @property
    def tags(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed, "tau": self.tau, "mechanism": self.mechanism,
                "alpha": self.alpha}


@dataclass
class CellOutput:
    records: list[ResultRecord] = field(default_factory=list)
    telemetry: list[dict] = field(default_factory=list)
    gates: list[dict] = field(default_factory=list)
    disc: list[dict] = field(default_factory=list)
    models: dict[str, MlpModel] = field(default_factory=dict)  # checkpoint name -> model


# ---------------------------------------------------------------- data


@dataclass
class LoadedData:
    features: list[SubjectFeatures]
    n_rois: int
    informative: np.ndarray | None = None


def _csv_subjects(cfg: ExperimentConfig):
    return load_roi_csv(cfg.resolve(cfg.data.series_dir), cfg.resolve(cfg.data.phenotype))


@lru_cache(maxsize=4)
def _load_cached(cfg_json: str, seed: int) -> LoadedData:
    cfg = config_from_json(cfg_json)
    return _load(cfg, seed)


def _load(cfg: ExperimentConfig, seed: int) -> LoadedData:
    d = cfg.data
    if d.source == "synth":
        synth = dataclasses.replace(d.synth, seed=d.synth.seed + seed)
        ds = synth_generate(synth)
        feats = extract_features(ds.series, d.window, d.stride)
        return LoadedData(feats, synth.n_rois, ds.informative_rois)
    series = _csv_subjects(cfg)
    feats = extract_features(series, d.window, d.stride)
    return LoadedData(feats, series[0].n_rois)


def load_data(cfg: ExperimentConfig, seed: int) -> LoadedData:
    """Subjects for one seed. Synthetic data is regenerated with ``synth.seed + seed``;
    CSV data is the same for every seed (only folds and training differ)."""
    return _load_cached(config_to_json(cfg), seed)


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True)


def config_from_json(text: str) -> ExperimentConfig:
    raw = json.loads(text)
    return from_dict(raw, raw["base_dir"])


# ---------------------------------------------------------------- one cell


def adapt_kwargs(cfg: ExperimentConfig, strategy: str, seed: int) -> dict:
    if strategy == "fed-moe":
        return {"gate_input": cfg.adapt.gate_input, "gate_arch": cfg.adapt.gate_arch}
    if strategy == "fed-align":
        return {"warmup_epochs": cfg.adapt.warmup_epochs,
                "feature_noise": NoiseSpec("gaussian", cfg.adapt.feature_noise_alpha, seed)}
    return {}


def fed_config_for(cfg: ExperimentConfig, cell: Cell):
    return dataclasses.replace(cfg.fed, seed=cell.seed, tau=cell.tau,
                               noise=NoiseSpec(cell.mechanism, cell.alpha, cell.seed))


def _epoch_telemetry(rows, tags, fold):
    acc = defaultdict(lambda: [0.0, 0, 0])
    for r in rows:
        a = acc[(r["epoch"], r["site"])]
        a[0] += r["loss"]
        a[1] += 1
        a[2] += r["comm_event"]
    return [{**tags, "fold": fold, "epoch": e, "site": s, "mean_loss": tot / n, "comm_events": c}
            for (e, s), (tot, n, c) in sorted(acc.items())]


def _disc_curve(rows, tags, fold):
    acc = defaultdict(list)
    for r in rows:
        if r.get("disc_acc", "") != "":
            acc[(r["epoch"], r["site"])].append((r["disc_loss"], r["disc_acc"]))
    out = []
    for (e, s), vals in sorted(acc.items()):
        v = np.array(vals)
        out.append({k: tags[k] for k in ("seed", "tau", "mechanism", "alpha")}
                   | {"fold": fold, "epoch": e, "site": s, "disc_loss": float(v[:, 0].mean()),
                      "disc_acc": float(v[:, 1].mean())})
    return out


def run_cell(cfg: ExperimentConfig, cell: Cell) -> CellOutput:
    data = load_data(cfg, cell.seed)
    fed = fed_config_for(cfg, cell)
    kind = StrategyKind.parse(cell.strategy)
    out = CellOutput()
    if kind.name == "cross":
        full = prepare_full(data.features)
        for s in ([kind.train_site] if kind.train_site else full.sites):
            out.records += run_cross(s, full, fed)
        return out
    folds = subject_kfold(data.features, cfg.k_folds, cell.seed)
    full = prepare_full(data.features) if kind.name == "ensemble" else None
    kwargs = adapt_kwargs(cfg, kind.name, cell.seed)
    for f in range(cfg.k_folds):
        sink: dict = {}
        recs = run_fold(kind, prepare_fold(data.features, folds, f), f, fed, full=full, sink=sink, **kwargs)
        for r in recs:
            r.strategy = kind.label
        out.records += recs
        rows = sink.get("telemetry", [])
        if cfg.telemetry == "step":
            out.telemetry += [{**cell.tags, "fold": f, **r} for r in rows]
        else:
            out.telemetry += _epoch_telemetry(rows, cell.tags, f)
        for site, values in sorted(sink.get("gates", {}).items()):
            counts, edges = np.histogram(values, bins=GATE_BINS, range=(0.0, 1.0))
            out.gates += [{**cell.tags, "fold": f, "site": site, "bin_lo": float(edges[i]),
                           "bin_hi": float(edges[i + 1]), "count": int(c)} for i, c in enumerate(counts)]
        out.disc += _disc_curve(rows, cell.tags, f)
        if cfg.save_models:
            for site, model in sorted(sink.get("models", {}).items()):
                out.models[f"{cell.strategy}_seed{cell.seed}_tau{cell.tau}_{cell.mechanism}{cell.alpha:g}"
                           f"_fold{f}_{site}"] = model
    return out


def run_cells(cfg: ExperimentConfig, cells: list[Cell], threads: int = 1) -> list[CellOutput]:
    """Run cells, in worker processes when ``threads > 1``; results keep cell order."""
    if threads <= 1 or len(cells) <= 1:
        return [run_cell(cfg, c) for c in cells]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_cell, [cfg] * len(cells), cells))


# ---------------------------------------------------------------- cell grids


def run_grid(cfg: ExperimentConfig) -> list[Cell]:
    n = cfg.fed.noise
    return [Cell(s, seed, cfg.fed.tau, n.mechanism, n.alpha) for s in cfg.strategies for seed in cfg.seeds]


def pace_grid(cfg: ExperimentConfig) -> list[Cell]:
    # the pace sweep runs without noise
    return [Cell("fed", seed, tau) for tau in cfg.tau_grid for seed in cfg.seeds]


def noise_grid(cfg: ExperimentConfig) -> list[Cell]:
    return [Cell("fed", seed, cfg.fed.tau, n.mechanism, n.alpha) for n in cfg.noise_grid for seed in cfg.seeds]


# ---------------------------------------------------------------- writers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})


def write_outputs(out_dir, outputs: list[CellOutput], cells: list[Cell], cfg: ExperimentConfig, command: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "results.csv", RESULT_FIELDS, [r.row() for o in outputs for r in o.records])
    fields = STEP_TELEMETRY_FIELDS if cfg.telemetry == "step" else EPOCH_TELEMETRY_FIELDS
    write_rows(out / "telemetry.csv", fields, [r for o in outputs for r in o.telemetry])
    if any(o.gates for o in outputs):
        write_rows(out / "gates.csv", GATE_FIELDS, [r for o in outputs for r in o.gates])
    if any(o.disc for o in outputs):
        write_rows(out / "disc_accuracy.csv", DISC_FIELDS, [r for o in outputs for r in o.disc])
    specs = sorted({(c.mechanism, c.alpha) for c in cells})
    write_rows(out / "budget.csv", BUDGET_FIELDS, [budget_row(NoiseSpec(m, a)) for m, a in specs])
    models = [(name, m) for o in outputs for name, m in o.models.items()]
    if models:
        (out / "checkpoints").mkdir(exist_ok=True)
        for name, model in models:
            save_checkpoint(model, out / "checkpoints" / f"{name}.npz")
    write_manifest(out, cfg, command)


def write_manifest(out: Path, cfg: ExperimentConfig, command: str):
    meta = {
        "command": command,
        "seeds": cfg.seeds,
        "k_folds": cfg.k_folds,
        "note": "accuracies are distributions over seeds x folds; the budget report is nominal "
                "(unit sensitivity, noise std in units of the weight std)",
        "config": json.loads(config_to_json(cfg)) | {"base_dir": ""},
    }
    (out / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def execute(cfg: ExperimentConfig, command: str, out_dir, threads: int = 1) -> list[CellOutput]:
    grids = {"run": run_grid, "sweep-pace": pace_grid, "sweep-noise": noise_grid}
    cells = grids[command](cfg)
    if not cells:
        raise ValueError(f"{command}: empty grid")
    log.info("%s: %d cells", command, len(cells))
    outputs = run_cells(cfg, cells, threads)
    write_outputs(out_dir, outputs, cells, cfg, command)
    return outputs


# ---------------------------------------------------------------- interpretation


def fold_averaged_report(cfg: ExperimentConfig, seed: int, strategy: str | None = None,
                         k: int | None = None) -> tuple[BiomarkerReport, LoadedData]:
    """ROI scores per (site, class) averaged over the folds' test windows.

    Each fold's model scores its own held-out windows; the per-fold score
    vectors are averaged, renormalized to max 1 and ranked.
    """
    strategy = strategy or cfg.interpret.strategy
    k = k or cfg.interpret.k
    data = load_data(cfg, seed)
    kind = StrategyKind.parse(strategy)
    if kind.name in ("cross", "ensemble", "fed-moe"):
        raise ValueError(f"interpretation needs a single MLP per site; {strategy!r} has none")
    fed = fed_config_for(cfg, Cell(strategy, seed, cfg.fed.tau, cfg.fed.noise.mechanism, cfg.fed.noise.alpha))
    folds = subject_kfold(data.features, cfg.k_folds, seed)
    collected = defaultdict(list)
    for f in range(cfg.k_folds):
        fold = prepare_fold(data.features, folds, f)
        sink: dict = {}
        run_fold(kind, fold, f, fed, sink=sink, **adapt_kwargs(cfg, kind.name, seed))
        for site in fold.sites:
            X = np.concatenate([s.windows for s in fold.test[site]])
            y = np.concatenate([np.full(len(s.windows), s.label) for s in fold.test[site]])
            for c in (0, 1):
                sv = site_class_scores(sink["models"][site], X, y, c, data.n_rois)
                if sv is not None:
                    collected[(site, c)].append(sv.scores)
    scores, tops = {}, {}
    for key, vals in sorted(collected.items()):
        avg = np.mean(vals, axis=0)
        top = avg.max()
        sv = RoiScoreVector(avg / top if top > 0 else avg, normalized=bool(top > 0))
        scores[key], tops[key] = sv, top_k(sv, k)
    sites = sorted({s for s, _ in scores})
    consistency = {}
    for c in (0, 1):
        sets = [tops[(s, c)] for s in sites if (s, c) in tops]
        pairs = [(a, b) for i, a in enumerate(sets) for b in sets[i + 1:]]
        consistency[c] = float(np.mean([jaccard(a, b) for a, b in pairs])) if pairs else 1.0
    return BiomarkerReport(scores, tops, consistency, k), data


def interpret_command(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict[int, BiomarkerReport]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = load_roi_names(cfg.resolve(cfg.data.roi_names)) if cfg.data.roi_names else None
    if threads > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fold_averaged_report, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [fold_averaged_report(cfg, s) for s in cfg.seeds]
    reports = {}
    for seed, (rep, data) in zip(cfg.seeds, results):
        write_report_csv(rep, out / f"biomarkers_seed{seed}.csv", names)
        reports[seed] = rep
        if data.informative is not None:
            planted = set(data.informative.tolist())
            for key, top in sorted(rep.top_k.items()):
                log.info("seed %d %s class %d: %d/%d planted ROIs in top-%d", seed, key[0], key[1],
                         len(planted & set(top.tolist())), len(planted), rep.k)
    write_manifest(out, cfg, "interpret")
    return reports


# ---------------------------------------------------------------- synth / preprocess / report


def synth_command(cfg: ExperimentConfig, out_dir, seed: int = 0) -> Path:
    synth = dataclasses.replace(cfg.data.synth, seed=cfg.data.synth.seed + seed)
    ds = synth_generate(synth)
    out = write_dataset_csv(ds.series, out_dir)
    with open(Path(out_dir) / "informative_rois.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["roi_index"])
        w.writerows([[int(i)] for i in ds.informative_rois])
    return out


def preprocess_command(cfg: ExperimentConfig, out_dir) -> Path:
    """Connectivity features of CSV subjects: one ``.npz`` plus a subject table."""
    if cfg.data.source != "csv":
        raise ValueError("preprocess reads CSV series; set data.source: csv")
    feats = extract_features(_csv_subjects(cfg), cfg.data.window, cfg.data.stride)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "features.npz", **{s.subject_id: s.windows for s in feats})
    write_rows(out / "subjects.csv", ("subject_id", "site_id", "label", "n_windows", "n_rois"),
               [{"subject_id": s.subject_id, "site_id": s.site_id, "label": s.label,
                 "n_windows": len(s.windows), "n_rois": n_rois_for(s.windows.shape[1])} for s in feats])
    return out


SUMMARY_FIELDS = ("strategy", "site", "tau", "mechanism", "alpha", "n", "mean_subject_acc", "std_subject_acc",
                  "mean_window_acc", "welch_t_vs_baseline", "welch_p_vs_baseline")


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows: list[dict], baseline: str | None = None) -> list[dict]:
    """Mean/std per (strategy, site, tau, noise), with Welch's test against ``baseline``
    at the same (site, tau, noise)."""
    groups = defaultdict(list)
    for r in rows:
        key = (r["strategy"], r["site"], int(r["tau"]), r["mechanism"], float(r["alpha"]))
        groups[key].append((float(r["subject_acc"]), float(r["window_acc"])))
    out = []
    for key, vals in sorted(groups.items()):
        v = np.array(vals)
        row = dict(zip(("strategy", "site", "tau", "mechanism", "alpha"), key))
        row.update(n=len(v), mean_subject_acc=float(v[:, 0].mean()),
                   std_subject_acc=float(v[:, 0].std(ddof=1)) if len(v) > 1 else 0.0,
                   mean_window_acc=float(v[:, 1].mean()))
        base = groups.get((baseline, *key[1:])) if baseline else None
        if base is not None and key[0] != baseline and len(base) > 1 and len(v) > 1:
            t, p = welch_t(v[:, 0], np.array(base)[:, 0])
            row.update(welch_t_vs_baseline=t, welch_p_vs_baseline=p)
        out.append(row)
    return out


def report_command(results_path, out_path, baseline: str | None = None) -> list[dict]:
    rows = summarize(read_results(results_path), baseline)
    write_rows(out_path, SUMMARY_FIELDS, rows)
    return rows
