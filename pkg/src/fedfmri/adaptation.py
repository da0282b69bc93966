"""Domain adaptation on top of federated training.

Two strategies:

* Fed-MoE: each site mixes the federated global model with a private model,
  ``y = a(x) y_global + (1 - a(x)) y_private`` with a sigmoid gate ``a``.
  Private model and gate never leave the site and are never noised.
* Fed-Align: each site has a generator G, classifier C and discriminator D.
  Features crossing a site boundary are noised before any discriminator sees
  them. G and C are averaged every ``tau`` steps; D never is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .federation import (BatchStream, FedConfig, GlobalServer, SiteData, average_states, site_rng)
from .nn import (PROB_FLOOR, AdamState, Cache, MlpModel, apply_adam, ce_grad_probs, concat, cross_entropy,
                 init_model)
from .privacy import NoiseSpec, perturb_tensor

# ---------------------------------------------------------------- MoE


@dataclass
class MoEHead:
    private_model: MlpModel
    gate: MlpModel
    gate_input: str = "features"  # "features": a(x) = sigmoid(psi.x + b); "outputs": FC(2,1) on (y_G, y_P)

    def __post_init__(self):
        if self.gate_input not in ("features", "outputs"):
            raise ValueError(f"unknown gate input {self.gate_input!r}")


def make_moe_head(in_dim: int, seed: int, gate_input: str = "features", gate_arch: str = "gate",
                  dropout: float = 0.5) -> MoEHead:
    private = init_model("single-mlp", seed + 1, in_dim=in_dim, dropout=dropout)
    gate_dim = in_dim if gate_input == "features" else 2
    gate = init_model(gate_arch, seed + 2, in_dim=gate_dim)
    return MoEHead(private, gate, gate_input)


def _gate_in(head: MoEHead, x, y_g, y_p):
    if head.gate_input == "features":
        return x
    return np.column_stack([y_g[:, 1], y_p[:, 1]])


def moe_mix(a, y_g, y_p):
    return a * y_g + (1.0 - a) * y_p


def moe_forward(head: MoEHead, global_model: MlpModel, x) -> np.ndarray:
    """Gated convex combination of global and private class probabilities (eval mode)."""
    x = np.asarray(x, dtype=np.float64)
    y_g = global_model.forward(x)[0]
    y_p = head.private_model.forward(x)[0]
    a = head.gate.forward(_gate_in(head, x, y_g, y_p))[0]
    return moe_mix(a, y_g, y_p)


def gate_values(head: MoEHead, global_model: MlpModel, x) -> np.ndarray:
    y_g = global_model.forward(x)[0]
    y_p = head.private_model.forward(x)[0]
    return head.gate.forward(_gate_in(head, x, y_g, y_p))[0][:, 0]


def moe_loss_and_grads(head: MoEHead, global_model: MlpModel, x, labels, rng=None, train=True):
    """Cross-entropy of the mixed output and gradients for all three parts.

    Returns ``(loss, grads_global, grads_private, grads_gate)``.
    """
    y_g, c_g = global_model.forward(x, train=train, rng=rng)
    y_p, c_p = head.private_model.forward(x, train=train, rng=rng)
    gin = _gate_in(head, x, y_g, y_p)
    a, c_a = head.gate.forward(gin, train=train, rng=rng)
    y = moe_mix(a, y_g, y_p)
    loss = cross_entropy(y, labels)
    g = ce_grad_probs(y, labels)
    d_a = (g * (y_g - y_p)).sum(axis=1, keepdims=True)
    d_gin, grads_gate = head.gate.backward_from(d_a, c_a)
    d_yg = a * g
    d_yp = (1.0 - a) * g
    if head.gate_input == "outputs":
        d_yg[:, 1] += d_gin[:, 0]
        d_yp[:, 1] += d_gin[:, 1]
    _, grads_g = global_model.backward_from(d_yg, c_g)
    _, grads_p = head.private_model.backward_from(d_yp, c_p)
    return loss, grads_g, grads_p, grads_gate


class MoENode:
    def __init__(self, data: SiteData, global_model: MlpModel, head: MoEHead, config: FedConfig):
        self.site_id = data.site_id
        self.model = global_model
        self.head = head
        self.opt_global = AdamState()
        self.opt_private = AdamState()
        self.opt_gate = AdamState()
        self.stream = BatchStream(data, config.steps_per_epoch, site_rng(config.seed, data.site_id, "batches"))
        self.rng = site_rng(config.seed, data.site_id, "dropout")
        self.noise_rng = site_rng(config.seed, data.site_id, "noise")

    def set_lr(self, lr):
        for opt in (self.opt_global, self.opt_private, self.opt_gate):
            opt.lr = lr

    def step(self) -> float:
        batch = self.stream.next()
        loss, gg, gp, ga = moe_loss_and_grads(self.head, self.model, batch.inputs, batch.labels, self.rng)
        apply_adam(self.model, self.opt_global, gg)
        apply_adam(self.head.private_model, self.opt_private, gp)
        apply_adam(self.head.gate, self.opt_gate, ga)
        return loss


@dataclass
class MoEResult:
    global_model: MlpModel | None
    local_models: dict[str, MlpModel]
    heads: dict[str, MoEHead]
    telemetry: list[dict]
    comm_events: int

    def model_for(self, site: str) -> MlpModel:
        return self.global_model if self.global_model is not None else self.local_models[site]

    def predict(self, site: str, X) -> np.ndarray:
        return moe_forward(self.heads[site], self.model_for(site), X)

    def gates(self, site: str, X) -> np.ndarray:
        return gate_values(self.heads[site], self.model_for(site), X)

    def gate_histogram(self, site: str, X, bins: int = 10) -> np.ndarray:
        counts, _ = np.histogram(self.gates(site, X), bins=bins, range=(0.0, 1.0))
        return counts


def train_fed_moe(config: FedConfig, sites: list[SiteData], gate_input: str = "features",
                  gate_arch: str = "gate", **_) -> MoEResult:
    """Federated global model (noised averaging) trained jointly with local MoE heads."""
    d = sites[0].X.shape[1]
    base = init_model(config.arch, config.seed, in_dim=d, dropout=config.dropout)
    nodes = [MoENode(s, base.copy(), make_moe_head(d, config.seed, gate_input, gate_arch, config.dropout), config)
             for s in sites]
    server = GlobalServer()
    telemetry, comms = [], 0
    for epoch in range(config.epochs):
        for n in nodes:
            n.set_lr(config.lr_at(epoch))
            n.stream.start_epoch()
        t = 0
        for step in range(config.steps_per_epoch):
            losses = [n.step() for n in nodes]
            t += 1
            comm = t % config.tau == 0
            if comm:
                states = [n.model.state() for n in nodes]
                server.weights = average_states(states, config.noise, [n.noise_rng for n in nodes],
                                                set(nodes[0].model.params()))
                server.rounds += 1
                for n in nodes:
                    n.model.load_state(server.weights)
                comms += 1
            for n, loss in zip(nodes, losses):
                telemetry.append({"epoch": epoch, "step": step, "site": n.site_id, "loss": loss, "comm_event": int(comm)})
    global_model = None
    if server.weights is not None:
        global_model = base.copy()
        global_model.load_state(server.weights)
    return MoEResult(global_model, {n.site_id: n.model for n in nodes}, {n.site_id: n.head for n in nodes},
                     telemetry, comms)


# ---------------------------------------------------------------- adversarial alignment


@dataclass
class FeatureBatch:
    """Generator output tagged with its owner and whether it was noised."""

    values: np.ndarray
    site_id: str
    noised: bool = False


def disc_loss(D: MlpModel, source_feats, target_feats) -> float:
    """-E[log D(source)] - E[log(1 - D(target))]."""
    d_s = D.forward(_values(source_feats))[0]
    d_t = D.forward(_values(target_feats))[0]
    return float(-np.mean(np.log(np.maximum(d_s, PROB_FLOOR))) - np.mean(np.log(np.maximum(1.0 - d_t, PROB_FLOOR))))


def gen_align_loss(D: MlpModel, source_feats, target_feats) -> float:
    """-E[log D(source)] - E[log D(target)]."""
    d_s = D.forward(_values(source_feats))[0]
    d_t = D.forward(_values(target_feats))[0]
    return float(-np.mean(np.log(np.maximum(d_s, PROB_FLOOR))) - np.mean(np.log(np.maximum(d_t, PROB_FLOOR))))


def _values(f):
    return f.values if isinstance(f, FeatureBatch) else np.asarray(f, dtype=np.float64)


def _log_grad(d, positive: bool):
    """Gradient of -mean(log d) (positive) or -mean(log(1-d)) w.r.t. d, clamp-aware."""
    n = d.shape[0]
    if positive:
        return np.where(d > PROB_FLOOR, -1.0 / (np.maximum(d, PROB_FLOOR) * n), 0.0)
    return np.where(1.0 - d > PROB_FLOOR, 1.0 / (np.maximum(1.0 - d, PROB_FLOOR) * n), 0.0)


def disc_loss_grads(D: MlpModel, source_feats, target_feats):
    """Discriminator loss and its parameter gradients (features held fixed)."""
    xs, xt = _values(source_feats), _values(target_feats)
    d_s, c_s = D.forward(xs)
    d_t, c_t = D.forward(xt)
    loss = disc_loss(D, xs, xt)
    _, g_s = D.backward_from(_log_grad(d_s, True), c_s)
    _, g_t = D.backward_from(_log_grad(d_t, False), c_t)
    return loss, {k: g_s[k] + g_t[k] for k in g_s}


def gen_align_grads(D: MlpModel, source_feats, target_feats):
    """Generator-side alignment loss and its gradients w.r.t. both feature batches.

    The discriminator is frozen: its parameter gradients are discarded.
    """
    xs, xt = _values(source_feats), _values(target_feats)
    d_s, c_s = D.forward(xs)
    d_t, c_t = D.forward(xt)
    loss = gen_align_loss(D, xs, xt)
    g_xs, _ = D.backward_from(_log_grad(d_s, True), c_s)
    g_xt, _ = D.backward_from(_log_grad(d_t, True), c_t)
    return loss, g_xs, g_xt


class AlignNode:
    def __init__(self, data: SiteData, G: MlpModel, C: MlpModel, D: MlpModel, config: FedConfig):
        self.site_id = data.site_id
        self.G, self.C, self.D = G, C, D
        self.opt_G, self.opt_C, self.opt_D = AdamState(), AdamState(), AdamState()
        self.stream = BatchStream(data, config.steps_per_epoch, site_rng(config.seed, data.site_id, "batches"))
        self.align_stream = BatchStream(data, config.steps_per_epoch, site_rng(config.seed, data.site_id, "align"))
        self.rng = site_rng(config.seed, data.site_id, "dropout")
        self.noise_rng = site_rng(config.seed, data.site_id, "noise")
        self.feature_noise_rng = site_rng(config.seed, data.site_id, "feature-noise")

    def set_lr(self, lr):
        for opt in (self.opt_G, self.opt_C, self.opt_D):
            opt.lr = lr

    def classify_step(self):
        batch = self.stream.next()
        f, c_g = self.G.forward(batch.inputs, train=True, rng=self.rng)
        p, c_c = self.C.forward(f, train=True, rng=self.rng)
        loss = cross_entropy(p, batch.labels)
        g = p.copy()
        g[np.arange(len(g)), batch.labels] -= 1.0
        g /= len(g)
        # fused softmax + cross-entropy: skip the classifier's softmax layer
        g_f, grads_c = self.C.backward_from(g, Cache(c_c.entries[:-1], c_c.train, c_c.input_shape))
        _, grads_g = self.G.backward_from(g_f, c_g)
        apply_adam(self.C, self.opt_C, grads_c)
        apply_adam(self.G, self.opt_G, grads_g)
        return loss, batch

    def export_features(self, noise: NoiseSpec, train: bool = True):
        """Features of a local mini-batch as sent to another site (noised)."""
        batch = self.align_stream.next()
        f, cache = self.G.forward(batch.inputs, train=train, rng=self.rng)
        noised = perturb_tensor(f, noise, self.feature_noise_rng)
        return FeatureBatch(noised, self.site_id, noised=noise.active), cache


def align_step(source: AlignNode, target: AlignNode, source_inputs, noise: NoiseSpec,
               disc_steps: int = 1, gen_steps: int = 1, align_weight: float = 1.0,
               update_source: bool = False, feature_mode: str = "train") -> dict:
    """One discriminator update then one generator update on a source/target pair.

    ``feature_mode`` is the generator mode for alignment features: "train"
    (dropout on, per-batch BatchNorm statistics) or "eval" (dropout off,
    running statistics, as the deployed model computes them). With
    ``update_source=False`` only the target generator follows the generator
    loss; its source term is then a constant.
    ``disc_acc`` in the returned stats is the updated discriminator's accuracy
    on this batch pair, measured before the generator step.
    """
    train = feature_mode == "train"
    f_s, c_s = source.G.forward(source_inputs, train=train, rng=source.rng)
    f_t, c_t = target.export_features(noise, train)
    if noise.active and not f_t.noised:
        raise RuntimeError("cross-site features must be noised")
    loss_d = None
    for _ in range(disc_steps):
        loss_d, grads_d = disc_loss_grads(source.D, f_s, f_t)
        apply_adam(source.D, source.opt_D, grads_d)
    d_s = source.D.forward(f_s)[0][:, 0]
    d_t = source.D.forward(f_t.values)[0][:, 0]
    disc_acc = (np.count_nonzero(d_s > 0.5) + np.count_nonzero(d_t <= 0.5)) / (len(d_s) + len(d_t))
    loss_g = None
    for _ in range(gen_steps):
        loss_g, g_fs, g_ft = gen_align_grads(source.D, f_s, f_t)
        # noise is additive, so d(noised)/d(features) is the identity
        if update_source:
            _, grads_gs = source.G.backward_from(align_weight * g_fs, c_s)
            apply_adam(source.G, source.opt_G, grads_gs)
        _, grads_gt = target.G.backward_from(align_weight * g_ft, c_t)
        apply_adam(target.G, target.opt_G, grads_gt)
    return {"disc_loss": loss_d, "gen_loss": loss_g, "disc_acc": disc_acc}


@dataclass
class AlignResult:
    global_model: MlpModel
    generator: MlpModel
    classifier: MlpModel
    nodes: dict[str, AlignNode]
    telemetry: list[dict]
    shared_tensors: list[str]
    disc_updates: int
    comm_events: int

    def features(self, X) -> np.ndarray:
        return self.generator.forward(X)[0]


def run_fed_align(config: FedConfig, sites: list[SiteData], warmup_epochs: int = 5, align: bool = True,
                  feature_noise: NoiseSpec | None = None,
                  disc_steps: int = 1, gen_steps: int = 1, align_weight: float = 1.0,
                  update_source: bool = False, feature_mode: str = "train", **_) -> AlignResult:
    """Federated adversarial alignment.

    Each site classifies its own batch; after ``warmup_epochs`` it also aligns
    against one other site per step (round-robin), using the other site's
    noised features. ``feature_noise`` defaults to Gaussian with alpha 0.01.
    """
    if len(sites) < 2 and align:
        raise ValueError("alignment needs at least two sites")
    if feature_noise is None:
        feature_noise = NoiseSpec("gaussian", 0.01, config.seed)
    d = sites[0].X.shape[1]
    G0 = init_model("generator", config.seed, in_dim=d, dropout=config.dropout)
    C0 = init_model("classifier", config.seed + 1, in_dim=G0.out_dim, dropout=config.dropout)
    nodes = [AlignNode(s, G0.copy(), C0.copy(), init_model("disc", config.seed + 2, in_dim=C0.in_dim), config)
             for s in sites]
    server_g, server_c = GlobalServer(), GlobalServer()
    telemetry, shared, disc_updates, comms = [], [], 0, 0
    n = len(nodes)
    for epoch in range(config.epochs):
        for node in nodes:
            node.set_lr(config.lr_at(epoch))
            node.stream.start_epoch()
            node.align_stream.start_epoch()
        t = 0
        for step in range(config.steps_per_epoch):
            rows = []
            for i, node in enumerate(nodes):
                loss, batch = node.classify_step()
                row = {"epoch": epoch, "step": step, "site": node.site_id, "loss": loss,
                       "target": "", "disc_loss": "", "gen_loss": "", "disc_acc": "", "comm_event": 0}
                if align and epoch >= warmup_epochs:
                    j = (i + 1 + step % (n - 1)) % n
                    stats = align_step(node, nodes[j], batch.inputs, feature_noise, disc_steps, gen_steps, align_weight,
                                       update_source, feature_mode)
                    disc_updates += disc_steps
                    row.update(target=nodes[j].site_id, **stats)
                rows.append(row)
            t += 1
            if t % config.tau == 0:
                for server, attr in ((server_g, "G"), (server_c, "C")):
                    models = [getattr(nd, attr) for nd in nodes]
                    server.weights = average_states([m.state() for m in models], config.noise,
                                                    [nd.noise_rng for nd in nodes], set(models[0].params()))
                    server.rounds += 1
                    for m in models:
                        m.load_state(server.weights)
                    shared.extend(f"{attr}:{k}" for k in server.weights)
                comms += 1
                for row in rows:
                    row["comm_event"] = 1
            telemetry.extend(rows)
    G, C = G0.copy(), C0.copy()
    if server_g.weights is not None:
        G.load_state(server_g.weights)
        C.load_state(server_c.weights)
    else:
        G, C = nodes[0].G, nodes[0].C
    return AlignResult(concat(G, C, arch="generator+classifier"), G, C, {nd.site_id: nd for nd in nodes},
                       telemetry, shared, disc_updates, comms)


# ---------------------------------------------------------------- domain probe


def _balanced(rng, a, b):
    m = min(len(a), len(b))
    return a[rng.permutation(len(a))[:m]], b[rng.permutation(len(b))[:m]]


def domain_probe_accuracy(features: dict[str, np.ndarray], seed: int = 0, epochs: int = 30,
                          lr: float = 1e-2, held_out: dict[str, np.ndarray] | None = None) -> float:
    """Mean held-out accuracy of fresh discriminators separating each site pair.

    Without ``held_out`` each site's features are split in half (train /
    held-out). Passing ``held_out`` (features of different subjects) avoids
    windows of one subject landing on both sides. Classes are balanced by
    subsampling. A higher value means more distinguishable domains.
    """
    sites = sorted(features)
    rng = np.random.default_rng(seed)
    accs = []
    for a_i in range(len(sites)):
        for b_i in range(a_i + 1, len(sites)):
            fa, fb = _balanced(rng, features[sites[a_i]], features[sites[b_i]])
            if held_out is None:
                h = len(fa) // 2
                fa, ta, fb, tb = fa[:h], fa[h:], fb[:h], fb[h:]
            else:
                ta, tb = _balanced(rng, held_out[sites[a_i]], held_out[sites[b_i]])
            X_tr = np.concatenate([fa, fb])
            y_tr = np.concatenate([np.ones(len(fa)), np.zeros(len(fb))])
            X_te = np.concatenate([ta, tb])
            y_te = np.concatenate([np.ones(len(ta)), np.zeros(len(tb))])
            mu, sd = X_tr.mean(axis=0), X_tr.std(axis=0) + 1e-8
            X_tr, X_te = (X_tr - mu) / sd, (X_te - mu) / sd
            D = init_model("disc", int(rng.integers(2**31)), in_dim=X_tr.shape[1])
            opt = AdamState(lr=lr)
            bs = max(8, len(X_tr) // 10)
            for _ in range(epochs):
                perm = rng.permutation(len(X_tr))
                for s in range(0, len(X_tr), bs):
                    idx = perm[s:s + bs]
                    pos, neg = X_tr[idx][y_tr[idx] == 1], X_tr[idx][y_tr[idx] == 0]
                    if len(pos) == 0 or len(neg) == 0:
                        continue
                    _, g = disc_loss_grads(D, pos, neg)
                    apply_adam(D, opt, g)
            pred = D.forward(X_te)[0][:, 0] > 0.5
            accs.append(float(np.mean(pred == (y_te == 1))))
    return float(np.mean(accs))
