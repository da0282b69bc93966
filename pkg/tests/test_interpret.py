import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfmri.data import flatten_upper
from fedfmri.interpret import (SaliencyVector, biomarker_report, build_grad_matrix, guided_gradient, jaccard,
                               load_roi_names, roi_scores, site_class_scores, top_k, write_report_csv)
from fedfmri.nn import Dense, MlpModel, ReLU, Softmax, init_model


def tiny(W1, W2):
    W1, W2 = np.array(W1, float), np.array(W2, float)
    return MlpModel([Dense(*W1.shape, W=W1), ReLU(), Dense(*W2.shape, W=W2), Softmax()])


def test_guided_blocks_negative_gradient():
    # h = [2, 2]; class-0 score = h0 - h1, so the plain gradient cancels
    m = tiny([[1, 1], [1, 1]], [[1, 0], [-1, 0]])
    x = np.array([1.0, 1.0])
    assert np.array_equal(guided_gradient(m, x, 0, guided=False, rectify=False), [0.0, 0.0])
    assert np.array_equal(guided_gradient(m, x, 0), [1.0, 1.0])


def test_guided_blocks_inactive_units():
    # h_pre = [3, 0]: the second unit is off, class-0 score = 2 h0 - h1
    m = tiny([[1, -1], [2, 1]], [[2, 0], [-1, 0]])
    assert np.array_equal(guided_gradient(m, np.array([1.0, 1.0]), 0), [2.0, 4.0])


def test_rectification():
    m = tiny([[-1, 0], [0, 1]], [[1, 0], [0, 0]])
    # h_pre = [1, 1] for x = [-1, 1]; d score / d x = [-1, 0] before rectification
    raw = guided_gradient(m, np.array([-1.0, 1.0]), 0, rectify=False)
    assert np.array_equal(raw, [-1.0, 0.0])
    assert np.array_equal(guided_gradient(m, np.array([-1.0, 1.0]), 0), [0.0, 0.0])


def test_class_out_of_range():
    with pytest.raises(ValueError):
        guided_gradient(init_model("mlp:6-3-2", 0), np.zeros(6), 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 500))
def test_saliency_nonnegative_and_batch_consistent(seed):
    m = init_model("mlp:10-4-2", seed)
    X = np.random.default_rng(seed).standard_normal((3, 10))
    batch = guided_gradient(m, X, 1)
    assert np.all(batch >= 0)
    assert np.allclose(batch[1], guided_gradient(m, X[1], 1), atol=1e-14)


def test_grad_matrix_and_scores():
    mat = np.array([[0, 1, 3], [1, 0, 0], [3, 0, 0]], dtype=float)
    g = SaliencyVector(flatten_upper(mat), class_id=1)
    assert np.array_equal(build_grad_matrix(g, 3), mat)
    sv = roi_scores(mat)
    assert np.allclose(sv.scores, [1.0, 0.25, 0.75]) and sv.normalized
    with pytest.raises(ValueError):
        build_grad_matrix(np.zeros(4), 3)


def test_all_zero_scores_stay_unnormalized():
    sv = roi_scores(np.zeros((4, 4)))
    assert not sv.normalized and np.all(sv.scores == 0)


def test_top_k_ties_prefer_lower_index():
    assert list(top_k(np.array([0.5, 1.0, 0.5, 0.5]), 3)) == [1, 0, 2]


def test_jaccard():
    assert jaccard([1, 2, 3], [2, 3, 4]) == 0.5
    assert jaccard([], []) == 1.0
    assert jaccard([1], [2]) == 0.0


def linear_model(weights):
    """Softmax over (0, w.x): the class-1 score gradient is w."""
    W = np.column_stack([np.zeros(len(weights)), weights])
    return MlpModel([Dense(len(weights), 2, W=W), Softmax()])


def test_site_class_scores_on_linear_model():
    r = 4
    w = np.zeros(6)
    w[0] = 2.0  # edge (0, 1)
    w[5] = 1.0  # edge (2, 3)
    m = linear_model(w)
    X = np.zeros((5, 6))
    y = np.array([1, 1, 0, 1, 0])
    sv = site_class_scores(m, X, y, 1, r)
    assert np.allclose(sv.scores, [1.0, 1.0, 0.5, 0.5])
    assert site_class_scores(m, X, np.zeros(5, int) + 1, 0, r) is None


def test_report_consistency_and_csv(tmp_path):
    w = np.zeros(6)
    w[0] = 1.0
    m = linear_model(w)
    X = np.zeros((4, 6))
    y = np.array([1, 1, 0, 0])
    rep = biomarker_report(m, {"A": (X, y), "B": (X, y)}, n_rois=4, k=2, classes=(1,))
    assert list(rep.top_k[("A", 1)]) == [0, 1]
    assert rep.consistency[1] == 1.0
    write_report_csv(rep, tmp_path / "r.csv", roi_names={0: "Left Amygdala"})
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["site", "class", "roi_index", "roi_name", "score", "rank"]
    assert rows[1] == ["A", "1", "0", "Left Amygdala", "1.0", "1"]
    assert rows[-1] == ["consistency", "1", "", "", "1.0", ""]


def test_report_per_site_models_and_empty_site():
    m = linear_model(np.ones(3))
    with pytest.raises(ValueError):
        biomarker_report({"A": m}, {"A": (np.zeros((0, 3)), np.zeros(0))}, n_rois=3)


def test_load_roi_names(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("index,name\n0,Frontal Pole\n1,Insular Cortex\n")
    assert load_roi_names(p) == {0: "Frontal Pole", 1: "Insular Cortex"}
