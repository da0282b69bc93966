"""Gradient saliency on connectivity inputs and ROI-level biomarker scores."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import n_features, unflatten_upper
from .nn import MlpModel, Softmax


@dataclass
class SaliencyVector:
    values: np.ndarray
    class_id: int
    subject_id: str = ""
    site_id: str = ""


@dataclass
class RoiScoreVector:
    scores: np.ndarray
    normalized: bool


@dataclass
class BiomarkerReport:
    scores: dict[tuple[str, int], RoiScoreVector]
    top_k: dict[tuple[str, int], np.ndarray]
    consistency: dict[int, float] = field(default_factory=dict)
    k: int = 10


def _score_layers(model: MlpModel) -> int:
    """Number of leading layers producing pre-softmax class scores."""
    return len(model.layers) - 1 if isinstance(model.layers[-1], Softmax) else len(model.layers)


def guided_gradient(model: MlpModel, x, class_id: int, guided: bool = True, rectify: bool = True) -> np.ndarray:
    """Saliency of the class score (pre-softmax) w.r.t. each input feature.

    ``guided=True`` applies the guided-backpropagation rule at every ReLU;
    ``guided=False`` gives the plain input gradient. The result is rectified
    unless ``rectify=False``. Works on a single vector or a batch of rows.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    upto = _score_layers(model)
    scores, cache = model.forward(X, train=False, upto=upto)
    if not 0 <= class_id < scores.shape[1]:
        raise ValueError(f"class {class_id} out of range")
    seed = np.zeros_like(scores)
    seed[:, class_id] = 1.0
    grad, _ = model.backward_from(seed, cache, guided=guided)
    if rectify:
        grad = np.maximum(grad, 0.0)
    return grad[0] if single else grad


def build_grad_matrix(g, n_rois: int) -> np.ndarray:
    values = g.values if isinstance(g, SaliencyVector) else np.asarray(g)
    if values.shape[-1] != n_features(n_rois):
        raise ValueError(f"saliency length {values.shape[-1]} does not match R={n_rois}")
    return unflatten_upper(values, n_rois)


def roi_scores(mat: np.ndarray) -> RoiScoreVector:
    """Column sums scaled so the largest is 1 (all-zero stays unnormalized)."""
    s = np.asarray(mat, dtype=np.float64).sum(axis=0)
    top = s.max()
    if top <= 0:
        return RoiScoreVector(np.zeros_like(s), normalized=False)
    return RoiScoreVector(s / top, normalized=True)


def top_k(scores, k: int = 10) -> np.ndarray:
    """Indices of the k largest scores; ties go to the lower ROI index."""
    s = scores.scores if isinstance(scores, RoiScoreVector) else np.asarray(scores)
    order = np.lexsort((np.arange(len(s)), -s))
    return order[:k]


def jaccard(a, b) -> float:
    a, b = set(map(int, a)), set(map(int, b))
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def site_class_scores(model: MlpModel, X: np.ndarray, labels: np.ndarray, class_id: int,
                      n_rois: int, guided: bool = True) -> RoiScoreVector | None:
    """Average of per-point normalized ROI scores over points of ``class_id``."""
    pts = X[labels == class_id]
    if len(pts) == 0:
        return None
    sal = guided_gradient(model, pts, class_id, guided=guided)
    sums = unflatten_upper(sal, n_rois).sum(axis=1)
    top = sums.max(axis=1, keepdims=True)
    per_point = np.where(top > 0, sums / np.where(top > 0, top, 1.0), 0.0)
    avg = per_point.mean(axis=0)
    if avg.max() <= 0:
        return RoiScoreVector(avg, normalized=False)
    return RoiScoreVector(avg / avg.max(), normalized=True)


def biomarker_report(models, test_sets: dict[str, tuple[np.ndarray, np.ndarray]], n_rois: int,
                     k: int = 10, classes=(0, 1), guided: bool = True) -> BiomarkerReport:
    """Per-site, per-class ROI scores, top-k sets and cross-site Jaccard consistency.

    ``models`` is one model for every site or a ``{site: model}`` mapping;
    ``test_sets`` maps site to ``(windows, labels)``. Saliency targets each
    point's true class.
    """
    scores, tops = {}, {}
    for site in sorted(test_sets):
        X, y = test_sets[site]
        if len(X) == 0:
            raise ValueError(f"empty test set for site {site}")
        model = models[site] if isinstance(models, dict) else models
        for c in classes:
            sv = site_class_scores(model, X, np.asarray(y), c, n_rois, guided)
            if sv is None:
                continue
            scores[(site, c)] = sv
            tops[(site, c)] = top_k(sv, k)
    consistency = {}
    for c in classes:
        sets = [tops[(s, c)] for s in sorted(test_sets) if (s, c) in tops]
        pairs = list(itertools.combinations(sets, 2))
        consistency[c] = float(np.mean([jaccard(a, b) for a, b in pairs])) if pairs else 1.0
    return BiomarkerReport(scores, tops, consistency, k)


def write_report_csv(report: BiomarkerReport, path, roi_names: dict[int, str] | None = None):
    """Rows (site, class, roi_index, roi_name, score, rank) then one consistency row per class.

    ``rank`` is 1-based within the top-k and empty for the remaining ROIs.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "class", "roi_index", "roi_name", "score", "rank"])
        for (site, c), sv in sorted(report.scores.items()):
            ranks = {int(r): i + 1 for i, r in enumerate(report.top_k[(site, c)])}
            for roi, score in enumerate(sv.scores):
                name = (roi_names or {}).get(roi, "")
                w.writerow([site, c, roi, name, repr(float(score)), ranks.get(roi, "")])
        for c, value in sorted(report.consistency.items()):
            w.writerow(["consistency", c, "", "", repr(float(value)), ""])


def load_roi_names(path) -> dict[int, str]:
    """Atlas label file: ``index,name`` per line (header optional)."""
    names = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if len(row) < 2:
                continue
            try:
                names[int(row[0])] = row[1].strip()
            except ValueError:
                continue
    return names

