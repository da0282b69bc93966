import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfmri.nn import (AdamState, Batch, BatchNorm, Dense, Dropout, MlpModel, ReLU, Softmax, adam_step,
                        backward, cross_entropy, forward, init_model, load_checkpoint, lr_schedule,
                        save_checkpoint)


def numeric_grads(model, batch, h=1e-5):
    """Central differences of the train-mode loss (no dropout) per parameter entry."""
    out = {}
    for key, p in model.params().items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            vals = []
            for delta in (h, -h):
                p[idx] = orig + delta
                probs, _ = model.forward(batch.inputs, train=True, rng=np.random.default_rng(0))
                vals.append(cross_entropy(probs, batch.labels))
            p[idx] = orig
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out[key] = g
    return out


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def random_batch(rng, n, d, classes=2):
    return Batch(rng.standard_normal((n, d)), rng.integers(0, classes, n))


def test_init_is_deterministic():
    a = init_model("fed-mlp", 7)
    b = init_model("fed-mlp", 7)
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])


def test_paper_architectures():
    assert init_model("fed-mlp", 0).dense_dims() == [(6105, 16), (16, 2)]
    assert init_model("single-mlp", 0).dense_dims() == [(6105, 8), (8, 2)]
    assert init_model("gate-mlp", 0).dense_dims() == [(6105, 8), (8, 1)]
    assert init_model("disc", 0).dense_dims() == [(16, 8), (8, 1)]
    assert init_model("disc-wide", 0).dense_dims() == [(6105, 8), (8, 1)]
    kinds = [l.kind for l in init_model("fed-mlp", 0).layers]
    assert kinds == ["dropout", "dense", "relu", "batchnorm", "dropout", "dense", "softmax"]


def test_init_distribution():
    m = init_model("fed-mlp", 3, in_dim=400)
    W = m.params()["1.W"]
    assert np.abs(W).max() <= 1 / math.sqrt(400)
    assert np.all(m.params()["1.b"] == 0)
    bn = m.layers[3]
    assert np.all(bn.params["gamma"] == 1) and np.all(bn.params["beta"] == 0)
    assert np.all(bn.buffers["running_mean"] == 0) and np.all(bn.buffers["running_var"] == 1)


def test_unknown_arch():
    with pytest.raises(ValueError):
        init_model("resnet", 0)


def test_layer_chain_validation():
    with pytest.raises(ValueError):
        MlpModel([Dense(4, 3), Dense(2, 1)])
    with pytest.raises(ValueError):
        MlpModel([Dense(4, 2), Softmax(), ReLU()])
    with pytest.raises(ValueError):
        Dropout(1.0)
    with pytest.raises(ValueError):
        BatchNorm(3, eps=0)


def test_dimension_mismatch():
    m = init_model("mlp:20-5-2", 0)
    with pytest.raises(ValueError):
        forward(m, Batch(np.zeros((3, 19)), [0, 1, 0]))


def test_zero_input_rows_sum_to_one():
    m = init_model("mlp:20-5-2", 1)
    probs, _ = forward(m, Batch(np.zeros((4, 20)), [0, 0, 1, 1]))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_zero_input_symmetric_head_gives_half():
    m = MlpModel([Dense(3, 2, W=np.ones((3, 2))), Softmax()])
    probs, _ = forward(m, Batch(np.zeros((2, 3)), [0, 1]))
    assert np.allclose(probs, 0.5)


def test_eval_dropout_is_identity():
    rng = np.random.default_rng(0)
    m = init_model("mlp:20-5-2", 2, dropout=0.5)
    stripped = MlpModel([l for l in m.layers if not isinstance(l, Dropout)])
    x = rng.standard_normal((6, 20))
    assert np.array_equal(m.forward(x)[0], stripped.forward(x)[0])


def test_train_dropout_scaling():
    layer = Dropout(0.5)
    x = np.ones((2000, 10))
    y, mask = layer.forward(x, train=True, rng=np.random.default_rng(1))
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_softmax_rows_sum_to_one(seed, n):
    rng = np.random.default_rng(seed)
    m = init_model("mlp:7-4-3", seed, out=3)
    probs, _ = m.forward(rng.standard_normal((n, 7)) * 10)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-9)
    assert cross_entropy(probs, rng.integers(0, 3, n)) >= 0


def test_eval_forward_is_pure():
    rng = np.random.default_rng(4)
    m = init_model("mlp:10-4-2", 4)
    x = rng.standard_normal((5, 10))
    assert np.array_equal(m.forward(x)[0], m.forward(x)[0])


def test_cross_entropy_values():
    assert cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == 0.0
    assert math.isclose(cross_entropy(np.full((3, 2), 0.5), [0, 1, 0]), math.log(2))
    # hand evaluation: -ln 0.9
    assert math.isclose(cross_entropy(np.array([[0.9, 0.1]]), [0]), 0.10536051565782628, rel_tol=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(np.array([[0.5, 0.5]]), [2])


def test_cross_entropy_clamps():
    assert math.isclose(cross_entropy(np.array([[1.0, 0.0]]), [1]), -math.log(1e-12))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    m = init_model("mlp:20-5-2", 11, dropout=0.0)
    batch = random_batch(rng, 12, 20)
    probs, cache = forward(m, batch, "train", rng=np.random.default_rng(0))
    analytic = backward(m, batch, cache)
    numeric = numeric_grads(m, batch)
    for k in analytic:
        assert max_rel_error(analytic[k], numeric[k]) < 1e-4, k


def test_bias_gradient_of_blank_dense_layer():
    # zero weights, zero bias, zero input: logits 0, probs uniform
    m = MlpModel([Dense(3, 2), Softmax()])
    batch = Batch(np.zeros((4, 3)), [0, 1, 1, 1])
    _, cache = forward(m, batch, "train")
    g = backward(m, batch, cache)
    onehot = np.eye(2)[batch.labels]
    assert np.allclose(g["0.b"], (0.5 - onehot).mean(axis=0))
    assert np.allclose(g["0.W"], 0.0)


def test_duplicated_batch_keeps_mean_gradient():
    rng = np.random.default_rng(5)
    m = init_model("mlp:6-3-2", 5, dropout=0.0, batchnorm=False)
    batch = random_batch(rng, 5, 6)
    doubled = Batch(np.vstack([batch.inputs, batch.inputs]), np.concatenate([batch.labels, batch.labels]))
    g1 = backward(m, batch, forward(m, batch, "train")[1])
    g2 = backward(m, doubled, forward(m, doubled, "train")[1])
    for k in g1:
        assert np.allclose(g1[k], g2[k], atol=1e-14)


def test_stale_cache_rejected():
    rng = np.random.default_rng(1)
    m = init_model("mlp:6-3-2", 0, dropout=0.0)
    b1 = random_batch(rng, 5, 6)
    b2 = random_batch(rng, 7, 6)
    _, cache = forward(m, b1, "train")
    with pytest.raises(ValueError):
        backward(m, b2, cache)


def test_batchnorm_train_output_normalized():
    rng = np.random.default_rng(2)
    bn = BatchNorm(5)
    y, _ = bn.forward(rng.standard_normal((16, 5)) * 3 + 7, train=True)
    assert np.all(np.abs(y.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(y.var(axis=0) - 1) < 1e-4)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(AdamState(lr=0.1), p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_single_step_scalar_oracle():
    lr, g = 0.01, 0.3
    m = (1 - 0.9) * g
    v = (1 - 0.999) * g * g
    expected = 0.5 - lr * (m / 0.1) / (math.sqrt(v / 0.001) + 1e-8)
    p = {"w": np.array([0.5])}
    adam_step(AdamState(lr=lr), p, {"w": np.array([g])})
    assert math.isclose(p["w"][0], expected, rel_tol=1e-14)


def test_adam_constant_gradient_step_approaches_lr():
    state = AdamState(lr=1e-3)
    p = {"w": np.array([0.0])}
    prev = 0.0
    for _ in range(2000):
        adam_step(state, p, {"w": np.array([0.7])})
        step = prev - p["w"][0]
        prev = p["w"][0]
    assert math.isclose(step, 1e-3, rel_tol=1e-6)
    assert state.step_count == 2000


def test_adam_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        adam_step(AdamState(), {"w": np.zeros(1)}, {"w": np.array([np.nan])})


@pytest.mark.parametrize("epoch,lr", [(0, 1e-5), (19, 1e-5), (20, 5e-6), (40, 2.5e-6), (49, 2.5e-6)])
def test_lr_schedule(epoch, lr):
    assert math.isclose(lr_schedule(epoch), lr)


def test_checkpoint_round_trip(tmp_path):
    m = init_model("fed-mlp", 9, in_dim=30)
    m.layers[3].buffers["running_mean"] += 0.25
    save_checkpoint(m, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    assert back.arch == "fed-mlp"
    for k, v in m.state().items():
        assert np.array_equal(v, back.state()[k])
    x = np.random.default_rng(0).standard_normal((3, 30))
    assert np.array_equal(m.forward(x)[0], back.forward(x)[0])
