"""Subject-level evaluation and Welch's t-test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

RESULT_FIELDS = ("strategy", "site", "fold", "seed", "tau", "mechanism", "alpha", "subject_acc", "window_acc")


@dataclass
class ResultRecord:
    strategy: str
    site: str
    fold: int
    seed: int
    tau: int
    mechanism: str
    alpha: float
    subject_acc: float
    window_acc: float

    def row(self) -> dict:
        return asdict(self)


def majority_vote(window_predictions) -> int:
    """ASD (1) iff strictly more than half the windows say ASD."""
    preds = np.asarray(window_predictions)
    if preds.size == 0:
        raise ValueError("no window predictions")
    return int(np.count_nonzero(preds == 1) * 2 > preds.size)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def evaluate_subjects(predict, subjects) -> tuple[float, float]:
    """(subject accuracy, window accuracy) for ``predict: X -> class probabilities``.

    Subjects are counted once each, whatever their number of windows.
    """
    if not subjects:
        raise ValueError("no test subjects")
    correct = 0
    win_correct = 0
    win_total = 0
    for s in subjects:
        if len(s.windows) == 0:
            raise ValueError(f"subject {s.subject_id} has no windows")
        preds = predict_labels(predict(s.windows))
        correct += int(majority_vote(preds) == s.label)
        win_correct += int(np.count_nonzero(preds == s.label))
        win_total += len(preds)
    return correct / len(subjects), win_correct / win_total


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t via the regularized incomplete beta."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return float(tail if t >= 0 else 1.0 - tail)


def welch_t(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    if va + vb == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = 2.0 * t_sf(abs(t), df)
    return float(t), min(1.0, p)
