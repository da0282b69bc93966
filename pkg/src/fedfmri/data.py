"""ROI time series to connectivity features, synthetic sites, and CV splits."""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

log = logging.getLogger(__name__)

CORR_CLAMP = 1.0 - 1e-7
STD_FLOOR = 1e-8


@dataclass
class RoiTimeSeries:
    subject_id: str
    site_id: str
    series: np.ndarray  # T x R
    label: int  # 0 = HC, 1 = ASD

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2:
            raise ValueError(f"{self.subject_id}: series must be T x R")
        if not np.all(np.isfinite(self.series)):
            raise ValueError(f"{self.subject_id}: non-finite values in series")

    @property
    def n_rois(self) -> int:
        return self.series.shape[1]


@dataclass
class SubjectFeatures:
    """All window-level connectivity vectors of one subject (one row per window)."""

    subject_id: str
    site_id: str
    label: int
    windows: np.ndarray  # n_windows x R(R-1)/2


@dataclass
class NormStats:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]


@dataclass
class FoldSplit:
    k: int
    assignments: dict[str, int]

    def fold_subjects(self, fold: int) -> set[str]:
        return {s for s, f in self.assignments.items() if f == fold}


@dataclass
class SynthConfig:
    n_sites: int = 4
    subjects_per_class: int = 20
    n_rois: int = 30
    n_frames: int = 64
    window: int = 32
    stride: int = 1
    shift_strength: float = 0.0
    signal_strength: float = 0.3
    informative_roi_count: int = 6
    subject_noise: float = 0.1
    site_shift: dict[int, float] = field(default_factory=dict)  # per-site override of shift_strength
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_sites, self.subjects_per_class, self.n_rois, self.n_frames, self.window, self.stride)
        if min(counts) < 1:
            raise ValueError("all SynthConfig counts must be positive")
        if self.window > self.n_frames:
            raise ValueError("window longer than the series")
        if not 0 < self.informative_roi_count <= self.n_rois:
            raise ValueError("informative_roi_count must be in [1, n_rois]")
        if self.shift_strength < 0 or self.signal_strength < 0 or self.subject_noise < 0:
            raise ValueError("strengths must be nonnegative")
        self.site_shift = {int(k): float(v) for k, v in self.site_shift.items()}

    def site_ids(self) -> list[str]:
        return [f"site{i}" for i in range(self.n_sites)]

    def shift_for(self, site_index: int) -> float:
        return self.site_shift.get(site_index, self.shift_strength)


@dataclass
class SynthDataset:
    series: list[RoiTimeSeries]
    informative_rois: np.ndarray
    templates: dict[tuple[str, int], np.ndarray]  # (site, class) -> target correlation


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode())


# ---------------------------------------------------------------- features


def sliding_windows(series, window: int = 32, stride: int = 1) -> np.ndarray:
    """Contiguous windows of a T x R series, stacked as (count, window, R)."""
    x = series.series if isinstance(series, RoiTimeSeries) else np.asarray(series, dtype=np.float64)
    if window > x.shape[0]:
        raise ValueError(f"window {window} longer than series of {x.shape[0]} frames")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    view = sliding_window_view(x, window, axis=0)[::stride]  # (count, R, window)
    return np.ascontiguousarray(view.transpose(0, 2, 1))


def pearson_correlation(window: np.ndarray) -> np.ndarray:
    """R x R Pearson correlation of a T' x R window (or a stack of windows).

    Zero-variance ROIs correlate 0 with everything; the diagonal is exactly 1.
    """
    w = np.asarray(window, dtype=np.float64)
    if w.shape[-2] < 2:
        raise ValueError("need at least two time frames")
    centered = w - w.mean(axis=-2, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=-2))
    safe = np.where(norms > 0, norms, 1.0)
    z = centered / safe[..., None, :]
    corr = np.swapaxes(z, -1, -2) @ z
    dead = norms == 0
    corr = np.where(dead[..., :, None] | dead[..., None, :], 0.0, corr)
    corr = np.clip(corr, -1.0, 1.0)
    idx = np.arange(w.shape[-1])
    corr[..., idx, idx] = 1.0
    return corr


def fisher_z(corr: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(corr, -CORR_CLAMP, CORR_CLAMP))


def n_features(n_rois: int) -> int:
    return n_rois * (n_rois - 1) // 2


def flatten_upper(mat: np.ndarray) -> np.ndarray:
    """Strict upper triangle, row-major (i outer, j > i). Works on stacks."""
    m = np.asarray(mat)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError("expected square matrix")
    iu = np.triu_indices(m.shape[-1], k=1)
    return m[..., iu[0], iu[1]]


def n_rois_for(length: int) -> int:
    r = int(round((1 + np.sqrt(1 + 8 * length)) / 2))
    if n_features(r) != length:
        raise ValueError(f"{length} is not a triangular feature count")
    return r


def unflatten_upper(vec: np.ndarray, n_rois: int | None = None) -> np.ndarray:
    v = np.asarray(vec)
    r = n_rois_for(v.shape[-1]) if n_rois is None else n_rois
    if n_features(r) != v.shape[-1]:
        raise ValueError(f"vector length {v.shape[-1]} does not match R={r}")
    out = np.zeros(v.shape[:-1] + (r, r), dtype=v.dtype)
    iu = np.triu_indices(r, k=1)
    out[..., iu[0], iu[1]] = v
    out[..., iu[1], iu[0]] = v
    return out


def connectivity_features(series, window: int = 32, stride: int = 1) -> np.ndarray:
    """Fisher-z upper-triangle vectors for every window: (n_windows, R(R-1)/2)."""
    wins = sliding_windows(series, window, stride)
    return flatten_upper(fisher_z(pearson_correlation(wins)))


def extract_features(dataset: list[RoiTimeSeries], window: int = 32, stride: int = 1) -> list[SubjectFeatures]:
    rois = {ts.n_rois for ts in dataset}
    if len(rois) > 1:
        raise ValueError(f"ROI count differs across subjects: {sorted(rois)}")
    return [
        SubjectFeatures(ts.subject_id, ts.site_id, ts.label, connectivity_features(ts, window, stride))
        for ts in dataset
    ]


# ------------------------------------------------------------ normalization


def zscore_fit(train: list[SubjectFeatures]) -> NormStats:
    """Feature-wise mean/std per site over that site's training windows."""
    by_site: dict[str, list[np.ndarray]] = {}
    for s in train:
        by_site.setdefault(s.site_id, []).append(s.windows)
    mean, std = {}, {}
    for site, blocks in by_site.items():
        x = np.concatenate(blocks)
        if x.shape[0] < 2:
            raise ValueError(f"site {site}: need at least 2 training vectors")
        mean[site] = x.mean(axis=0)
        std[site] = np.maximum(x.std(axis=0), STD_FLOOR)
    return NormStats(mean, std)


def zscore_apply(stats: NormStats, features: list[SubjectFeatures]) -> list[SubjectFeatures]:
    out = []
    for s in features:
        if s.site_id not in stats.mean:
            raise KeyError(f"no normalization stats for site {s.site_id}")
        z = (s.windows - stats.mean[s.site_id]) / stats.std[s.site_id]
        out.append(SubjectFeatures(s.subject_id, s.site_id, s.label, z))
    return out


# ---------------------------------------------------------------- folds


def subject_kfold(subjects, k: int = 5, seed: int = 0) -> FoldSplit:
    """Subject-wise folds stratified by site and class.

    ``subjects`` holds objects with ``subject_id``, ``site_id`` and ``label``.
    Strata are dealt round-robin with a running offset so fold sizes within a
    site stay within one of each other.
    """
    strata: dict[tuple[str, int], list[str]] = {}
    for s in subjects:
        strata.setdefault((s.site_id, int(s.label)), []).append(s.subject_id)
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    offsets: dict[str, int] = {}
    for site, label in sorted(strata):
        ids = sorted(strata[(site, label)])
        if len(ids) < k:
            raise ValueError(f"site {site} class {label} has {len(ids)} subjects, fewer than {k} folds")
        order = rng.permutation(len(ids))
        start = offsets.get(site, 0)
        for pos, i in enumerate(order):
            if ids[i] in assignments:
                raise ValueError(f"duplicate subject id {ids[i]}")
            assignments[ids[i]] = (start + pos) % k
        offsets[site] = (start + len(ids)) % k
    return FoldSplit(k, assignments)


# ---------------------------------------------------------------- synthetic


def _random_symmetric(rng, r):
    a = rng.standard_normal((r, r))
    s = (a + a.T) / np.sqrt(2.0)
    np.fill_diagonal(s, 0.0)
    return s


def _base_correlation(rng, r, n_factors=3):
    loadings = rng.standard_normal((r, n_factors)) * 0.4
    cov = loadings @ loadings.T + np.eye(r)
    d = np.sqrt(np.diag(cov))
    return cov / np.outer(d, d)


def nearest_correlation(target: np.ndarray, max_ridge: float = 1e3) -> np.ndarray:
    """Regularize a symmetric unit-diagonal matrix until Cholesky succeeds.

    Adds a growing ridge to the diagonal and rescales to unit diagonal.
    """
    r = target.shape[0]
    ridge = 0.0
    while True:
        m = target + ridge * np.eye(r)
        d = np.sqrt(np.diag(m))
        corr = m / np.outer(d, d)
        try:
            np.linalg.cholesky(corr)
            return corr
        except np.linalg.LinAlgError:
            ridge = 1e-6 if ridge == 0.0 else ridge * 2.0
            if ridge > max_ridge:
                raise ValueError("covariance could not be regularized to positive-definite") from None


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    """Multi-site ROI series with planted class connectivity and site shift.

    The informative ROIs are split into two modules; relative to class 0,
    class 1 raises within-module correlation by ``signal_strength`` and lowers
    between-module correlation by the same amount, so either class has
    edges whose increase is evidence for it. Each site mixes the ROI signals
    with a fixed orthogonal map ``Q = expm(s K)`` (``K`` random skew-symmetric,
    ``s`` the site's shift strength), so its class covariances are
    ``Q C Q^T`` rescaled to unit diagonal. The mixing keeps the matrices
    positive-definite and the class contrast at full magnitude while rotating
    it away from the shared pattern as ``s`` grows. Every subject adds its own
    symmetric perturbation (``subject_noise``), and frames are i.i.d.
    Gaussian draws realizing the resulting correlation.
    """
    r = cfg.n_rois
    root = np.random.default_rng(cfg.seed)
    base = _base_correlation(root, r)
    chosen = root.choice(r, size=cfg.informative_roi_count, replace=False)
    informative = np.sort(chosen)
    # two modules: +1 within a module, -1 between modules
    module = np.zeros(r, dtype=int)
    module[chosen[: len(chosen) // 2]] = 1
    module[chosen[len(chosen) // 2:]] = 2
    planted = np.where(module[:, None] == module[None, :], 1.0, -1.0)
    mask = (module[:, None] > 0) & (module[None, :] > 0)
    planted = np.where(mask, planted, 0.0)
    np.fill_diagonal(planted, 0.0)
    class_templates = {
        0: base - 0.5 * cfg.signal_strength * planted,
        1: base + 0.5 * cfg.signal_strength * planted,
    }

    series, templates = [], {}
    for si, site in enumerate(cfg.site_ids()):
        srng = np.random.default_rng([cfg.seed, stable_hash(site)])
        a = srng.standard_normal((r, r))
        mixing = linalg.expm(cfg.shift_for(si) * (a - a.T) / np.sqrt(2.0 * r))
        for label in (0, 1):
            c = mixing @ class_templates[label] @ mixing.T
            d = np.sqrt(np.diag(c))
            templates[(site, label)] = c / np.outer(d, d)
        for label in (0, 1):
            for j in range(cfg.subjects_per_class):
                sid = f"{site}-{'ASD' if label else 'HC'}-{j:03d}"
                c = templates[(site, label)] + cfg.subject_noise * _random_symmetric(srng, r) / np.sqrt(2.0)
                np.fill_diagonal(c, 1.0)
                chol = np.linalg.cholesky(nearest_correlation(c))
                x = srng.standard_normal((cfg.n_frames, r)) @ chol.T
                series.append(RoiTimeSeries(sid, site, x, label))
    return SynthDataset(series, informative, templates)


# ---------------------------------------------------------------- CSV I/O

LABELS = {"ASD": 1, "HC": 0, "1": 1, "0": 0}


def read_series_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        width = None
        for i, row in enumerate(reader):
            if not row:
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if i == 0 and not rows:
                    continue  # header
                raise ValueError(f"{path}: non-numeric cell in row {i}") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ValueError(f"{path}: row {i} has {len(values)} columns, expected {width}")
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def load_phenotype_csv(path) -> dict[str, tuple[str, int]]:
    """subject_id -> (site_id, label)."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "site_id", "label"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for i, row in enumerate(reader, start=1):
            raw = row["label"].strip()
            if raw.upper() in LABELS:
                label = LABELS[raw.upper()]
            else:
                raise ValueError(f"{path}: row {i}: unknown label {raw!r}")
            out[row["subject_id"].strip()] = (row["site_id"].strip(), label)
    return out


def load_roi_csv(path, phenotype=None) -> list[RoiTimeSeries]:
    """Load one series file or a directory of ``<subject_id>.csv`` files.

    Subjects present in only one of series/phenotype are dropped with a
    warning. Without phenotype, the site is the parent directory name and
    the label defaults to 0.
    """
    path = Path(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    pheno = load_phenotype_csv(phenotype) if phenotype is not None else None
    out = []
    dropped = 0
    for f in files:
        sid = f.stem
        if pheno is not None and sid not in pheno:
            dropped += 1
            continue
        site, label = pheno[sid] if pheno is not None else (f.parent.name, 0)
        out.append(RoiTimeSeries(sid, site, read_series_csv(f), label))
    if pheno is not None:
        dropped += len(set(pheno) - {f.stem for f in files})
    if dropped:
        log.warning("dropped %d subjects lacking series or phenotype records", dropped)
    return out


def write_dataset_csv(dataset: list[RoiTimeSeries], out_dir) -> Path:
    """Export series as ``series/<subject_id>.csv`` plus ``phenotype.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "series").mkdir(parents=True, exist_ok=True)
    for ts in dataset:
        with open(out_dir / "series" / f"{ts.subject_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"roi{j}" for j in range(ts.n_rois)])
            for row in ts.series:
                w.writerow([repr(float(v)) for v in row])
    with open(out_dir / "phenotype.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "site_id", "label"])
        for ts in dataset:
            w.writerow([ts.subject_id, ts.site_id, "ASD" if ts.label else "HC"])
    return out_dir
