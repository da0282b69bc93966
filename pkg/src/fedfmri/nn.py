"""Feed-forward network engine with exact backpropagation and Adam.

Layers operate on row-major batches ``(batch, features)`` in float64. Every
layer exposes ``forward(x, train, rng) -> (y, cache)`` and
``backward(grad_y, cache) -> (grad_x, param_grads)`` so models can be chained
and differentiated through each other (mixtures, generator/discriminator
pairs).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


class Layer:
    kind = "layer"
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, cache, guided=False):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, W=None, b=None):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params["W"] = np.zeros((in_dim, out_dim)) if W is None else np.asarray(W, dtype=np.float64)
        self.params["b"] = np.zeros(out_dim) if b is None else np.asarray(b, dtype=np.float64)

    def forward(self, x, train=False, rng=None):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, grad, cache, guided=False):
        x = cache
        if x.shape[0] != grad.shape[0] or x.shape[1] != self.in_dim:
            raise ValueError("stale cache for dense layer")
        grads = {"W": x.T @ grad, "b": grad.sum(axis=0)}
        return grad @ self.params["W"].T, grads

    def spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad, cache, guided=False):
        out = grad * cache
        if guided:
            # guided rule: only positive signals pass through positive activations
            out = out * (grad > 0)
        return out, {}


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if eps <= 0:
            raise ValueError("BatchNorm eps must be positive")
        self.dim, self.eps, self.momentum = dim, eps, momentum
        self.params["gamma"] = np.ones(dim)
        self.params["beta"] = np.zeros(dim)
        self.buffers["running_mean"] = np.zeros(dim)
        self.buffers["running_var"] = np.ones(dim)

    def forward(self, x, train=False, rng=None):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            n = x.shape[0]
            m = self.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mu
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu) * inv_std
            return gamma * xhat + beta, ("train", xhat, inv_std)
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        xhat = (x - self.buffers["running_mean"]) * inv_std
        return gamma * xhat + beta, ("eval", xhat, inv_std)

    def backward(self, grad, cache, guided=False):
        mode, xhat, inv_std = cache
        if xhat.shape != grad.shape:
            raise ValueError("stale cache for batchnorm layer")
        gamma = self.params["gamma"]
        grads = {"gamma": (grad * xhat).sum(axis=0), "beta": grad.sum(axis=0)}
        if mode == "eval":
            return grad * gamma * inv_std, grads
        n = grad.shape[0]
        gx = grad * gamma
        dx = inv_std / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
        return dx, grads

    def spec(self):
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps, "momentum": self.momentum}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, None
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep) / keep
        return x * mask, mask

    def backward(self, grad, cache, guided=False):
        if cache is None:
            return grad, {}
        return grad * cache, {}

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False, rng=None):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, p

    def backward(self, grad, cache, guided=False):
        p = cache
        return p * (grad - (grad * p).sum(axis=1, keepdims=True)), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False, rng=None):
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        return s, s

    def backward(self, grad, cache, guided=False):
        s = cache
        return grad * s * (1.0 - s), {}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, ReLU, BatchNorm, Dropout, Softmax, Sigmoid)}


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("batch inputs must be a non-empty 2-D matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per input row required")


@dataclass
class Cache:
    """Activation record of one forward pass."""

    entries: list
    train: bool
    input_shape: tuple


class MlpModel:
    """Ordered stack of layers with a named parameter view.

    Parameter keys look like ``"1.W"`` (layer index, tensor name); BatchNorm
    running statistics are exposed separately as buffers.
    """

    def __init__(self, layers: list[Layer], arch: str = "custom"):
        self.layers = list(layers)
        self.arch = arch
        self._validate()

    def _validate(self):
        dim = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Softmax) and i != len(self.layers) - 1:
                raise ValueError("Softmax may only appear as the final layer")
            if isinstance(layer, Dense):
                if dim is not None and dim != layer.in_dim:
                    raise ValueError(f"layer {i}: expected in_dim {dim}, got {layer.in_dim}")
                dim = layer.out_dim
            elif isinstance(layer, BatchNorm):
                if dim is not None and dim != layer.dim:
                    raise ValueError(f"layer {i}: batchnorm dim {layer.dim} != {dim}")

    @property
    def in_dim(self) -> int:
        return next(l.in_dim for l in self.layers if isinstance(l, Dense))

    @property
    def out_dim(self) -> int:
        return [l.out_dim for l in self.layers if isinstance(l, Dense)][-1]

    def dense_dims(self) -> list[tuple[int, int]]:
        return [(l.in_dim, l.out_dim) for l in self.layers if isinstance(l, Dense)]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.buffers.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter and buffer tensor."""
        out = {k: v.copy() for k, v in self.params().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for key, value in state.items():
            idx, name = key.split(".", 1)
            layer = self.layers[int(idx)]
            store = layer.params if name in layer.params else layer.buffers
            if name not in store:
                raise KeyError(f"unknown tensor {key}")
            if store[name].shape != np.shape(value):
                raise ValueError(f"shape mismatch for {key}: {store[name].shape} vs {np.shape(value)}")
            store[name] = np.array(value, dtype=np.float64)

    def set_param(self, key: str, value: np.ndarray):
        idx, name = key.split(".", 1)
        self.layers[int(idx)].params[name] = value

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def forward(self, x, train=False, rng=None, upto=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        entries = []
        layers = self.layers if upto is None else self.layers[:upto]
        for layer in layers:
            x, c = layer.forward(x, train, rng)
            entries.append(c)
        return x, Cache(entries, train, np.shape(x))

    def backward_from(self, grad, cache: Cache, guided=False):
        """Backpropagate ``grad`` (w.r.t. the cached output) to the input.

        Returns ``(grad_input, param_grads)``. The cache may cover a prefix of
        the layers (see ``forward(upto=...)``).
        """
        grads = {}
        n = len(cache.entries)
        for i in range(n - 1, -1, -1):
            grad, g = self.layers[i].backward(grad, cache.entries[i], guided=guided)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return grad, grads


def forward(model: MlpModel, batch, mode="eval", rng=None):
    """Class probabilities for a batch, plus the activation cache."""
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng(0)
    return model.forward(inputs, train=train, rng=rng)


def cross_entropy(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= probs.shape[1]:
        raise ValueError("label out of range")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def ce_grad_probs(probs, labels):
    """d(mean cross-entropy)/d(probs)."""
    n = probs.shape[0]
    g = np.zeros_like(probs)
    rows = np.arange(n)
    g[rows, labels] = -1.0 / (np.maximum(probs[rows, labels], PROB_FLOOR) * n)
    return g


def backward(model: MlpModel, batch: Batch, cache: Cache) -> dict[str, np.ndarray]:
    """Exact cross-entropy gradients for every trainable tensor."""
    if len(cache.entries) != len(model.layers):
        raise ValueError("stale cache: layer count mismatch")
    probs = cache.entries[-1]
    if not isinstance(model.layers[-1], Softmax) or probs.shape[0] != len(batch.labels):
        raise ValueError("stale cache: output does not match batch")
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), batch.labels] -= 1.0
    grad /= n
    # softmax and cross-entropy are fused; start below the softmax layer
    partial = Cache(cache.entries[:-1], cache.train, cache.input_shape)
    _, grads = model.backward_from(grad, partial)
    return grads


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """In-place Adam update of ``params`` (arrays are replaced, not mutated)."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {p.shape}")
        m = state.first_moment.get(k)
        v = state.second_moment.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[k] = m
        state.second_moment[k] = v
        params[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
    return params, state


def apply_adam(model: MlpModel, state: AdamState, grads: dict[str, np.ndarray]):
    params = model.params()
    adam_step(state, params, grads)
    for k in grads:
        model.set_param(k, params[k])


def lr_schedule(epoch: int, base: float = 1e-5, every: int = 20, factor: float = 0.5) -> float:
    return base * factor ** (epoch // every)


ARCHS = ("fed-mlp", "single-mlp", "gate", "gate-mlp", "disc", "disc-wide", "generator", "classifier")


def _uniform_dense(rng, n_in, n_out):
    bound = 1.0 / math.sqrt(n_in)
    return Dense(n_in, n_out, W=rng.uniform(-bound, bound, size=(n_in, n_out)))


def build_layers(arch: str, rng, in_dim=6105, hidden=None, out=2, dropout=0.5, batchnorm=True):
    def block(n_in, n_out):
        layers = [Dropout(dropout)] if dropout > 0 else []
        layers += [_uniform_dense(rng, n_in, n_out), ReLU()]
        if batchnorm:
            layers.append(BatchNorm(n_out))
        return layers

    def head(n_in, n_out, final):
        layers = [Dropout(dropout)] if dropout > 0 else []
        return layers + [_uniform_dense(rng, n_in, n_out), final]

    if arch == "fed-mlp":
        return block(in_dim, hidden or 16) + head(hidden or 16, out, Softmax())
    if arch == "single-mlp":
        return block(in_dim, hidden or 8) + head(hidden or 8, out, Softmax())
    if arch == "mlp":
        return block(in_dim, hidden or 16) + head(hidden or 16, out, Softmax())
    if arch == "generator":
        return block(in_dim, hidden or 16)
    if arch == "classifier":
        return head(in_dim, out, Softmax())
    if arch == "gate":
        return [_uniform_dense(rng, in_dim, 1), Sigmoid()]
    if arch == "gate-mlp":
        return [_uniform_dense(rng, in_dim, hidden or 8), ReLU(), _uniform_dense(rng, hidden or 8, 1), Sigmoid()]
    if arch in ("disc", "disc-wide"):
        return [_uniform_dense(rng, in_dim, hidden or 8), ReLU(), _uniform_dense(rng, hidden or 8, 1), Sigmoid()]
    raise ValueError(f"unknown architecture {arch!r}")


def init_model(arch: str, seed: int, in_dim: int | None = None, hidden: int | None = None,
               out: int = 2, dropout: float = 0.5, batchnorm: bool = True) -> MlpModel:
    """Fresh model for a named architecture.

    Named architectures follow the appendix tables: ``fed-mlp`` (in-16-2),
    ``single-mlp`` (in-8-2), ``generator`` (in-16), ``classifier`` (16-2),
    ``gate`` (in-1 sigmoid), ``gate-mlp`` (in-8-1 sigmoid), ``disc`` (16-8-1
    sigmoid) and ``disc-wide`` (in-8-1 sigmoid). ``mlp:20-5-2`` builds a
    parametric in-hidden-out network.
    """
    rng = np.random.default_rng(seed)
    if arch.startswith("mlp:"):
        try:
            i, h, o = (int(s) for s in arch[4:].split("-"))
        except ValueError:
            raise ValueError(f"bad parametric architecture {arch!r}") from None
        layers = build_layers("mlp", rng, in_dim=i, hidden=h, out=o, dropout=dropout, batchnorm=batchnorm)
        return MlpModel(layers, arch=arch)
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    if in_dim is None:
        in_dim = 16 if arch in ("classifier", "disc") else 6105
    layers = build_layers(arch, rng, in_dim=in_dim, hidden=hidden, out=out, dropout=dropout, batchnorm=batchnorm)
    return MlpModel(layers, arch=arch)


def concat(*models: MlpModel, arch: str = "composite") -> MlpModel:
    """Chain models into one; tensors are shared, not copied."""
    layers = [l for m in models for l in m.layers]
    return MlpModel(layers, arch=arch)


# Checkpoint layout (``.npz``): key ``__meta__`` holds UTF-8 JSON with
# ``version``, ``arch`` and ``layers`` (list of layer specs in order); every
# other key is ``"<layer index>.<tensor name>"`` mapped to a C-ordered float64
# array.


def save_checkpoint(model: MlpModel, path):
    meta = {"version": CHECKPOINT_VERSION, "arch": model.arch, "layers": [l.spec() for l in model.layers]}
    arrays = {k: np.ascontiguousarray(v) for k, v in model.state().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> MlpModel:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        layers = []
        for spec in meta["layers"]:
            spec = dict(spec)
            cls = LAYER_KINDS[spec.pop("kind")]
            layers.append(cls(**spec))
        model = MlpModel(layers, arch=meta["arch"])
        model.load_state({k: data[k] for k in data.files if k != "__meta__"})
    return model
