"""Local training objectives and the per-client update loop.

Seven local objectives share one loop: plain cross-entropy (fedavg), a
proximal pull toward the received weights (fedprox), model-contrastive
representation alignment (moon), input mixing (mixup), stochastic depth,
self-distillation from the full network into sampled-width subnetworks
(gradaug), and spectral alignment of the final block's transmitting matrices
(fedalign). Every mu-weighted extra term short-circuits at mu = 0 so the
gradient path is then identical to plain cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DOWNSAMPLE_SCALES, downsample_transform, mixup_batch
from .models import BlockNet
from .tensor import (OptimizerState, Tensor, adaptive_avg_pool2d, clip_grad_norm,
                     exp, gradients, log, log_softmax, matmul, mse,
                     softmax_cross_entropy, sgd_step, sqrt, zero_gradients)

METHODS = ("fedavg", "fedprox", "moon", "mixup", "stochdepth", "gradaug", "fedalign")

# distillation weight by subnetwork count, applied when mu is left unset
_GRADAUG_MU = {1: 1.5, 2: 1.75, 3: 2.0, 4: 2.25}
_DEFAULT_MU = {"fedavg": 0.0, "fedprox": 1e-4, "moon": 1.0, "mixup": 0.0,
               "stochdepth": 0.0, "gradaug": 1.75, "fedalign": 0.45}


@dataclass(frozen=True)
class MethodConfig:
    """Hyperparameters for one local-training method.

    mu defaults to the method's standard operating point when left as None.
    """

    method: str = "fedavg"
    mu: float | None = None
    gamma: float = 0.1          # mixup Beta parameter
    gamma_L: float = 0.9        # stochastic depth final keep probability
    omega_b: float = 0.8        # gradaug lower width bound
    n_subnets: int = 2          # gradaug subnetworks per step
    omega_S: float = 0.25       # fedalign sub-block width
    tau: float = 0.5            # moon temperature
    power_iters: int = 20       # spectral norm iterations during training
    lip_epsilon: float = 1e-8   # guard below which the alignment term is skipped

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.mu is None:
            mu = _DEFAULT_MU[self.method]
            if self.method == "gradaug":
                mu = _GRADAUG_MU.get(self.n_subnets, _DEFAULT_MU["gradaug"])
            object.__setattr__(self, "mu", mu)
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if not 0.0 < self.gamma_L <= 1.0:
            raise ValueError("gamma_L must be in (0, 1]")
        if not 0.0 < self.omega_b <= 1.0:
            raise ValueError("omega_b must be in (0, 1]")
        if not 0.0 < self.omega_S <= 1.0:
            raise ValueError("omega_S must be in (0, 1]")
        if self.n_subnets < 0:
            raise ValueError("n_subnets must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.power_iters < 1:
            raise ValueError("power_iters must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "method", "mu", "gamma", "gamma_L", "omega_b", "n_subnets",
            "omega_S", "tau", "power_iters", "lip_epsilon")}

    @staticmethod
    def from_dict(d: dict) -> "MethodConfig":
        known = {"method", "mu", "gamma", "gamma_L", "omega_b", "n_subnets",
                 "omega_S", "tau", "power_iters", "lip_epsilon"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown method config keys: {sorted(unknown)}")
        return MethodConfig(**d)

    @property
    def needs_projection(self) -> bool:
        return self.method == "moon"


@dataclass
class ClientContext:
    """Everything one client update needs, bundled for the worker boundary."""

    model: BlockNet
    inputs: np.ndarray
    labels: np.ndarray
    data_rng: np.random.Generator
    method_rng: np.random.Generator
    global_weights: dict[str, np.ndarray] | None = None
    prev_weights: dict[str, np.ndarray] | None = None


# -- individual loss terms --------------------------------------------------


def loss_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    return softmax_cross_entropy(logits, labels)


def loss_fedprox(base_loss: Tensor, params: dict[str, Tensor],
                 anchor: dict[str, np.ndarray], mu: float) -> Tensor:
    """base + (mu/2) * squared distance to the received weights."""
    if mu == 0.0 or not params:
        return base_loss
    acc = None
    for name in sorted(params):
        d = params[name] - Tensor(anchor[name])
        s = (d * d).sum()
        acc = s if acc is None else acc + s
    return base_loss + (mu / 2.0) * acc


def _row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (batch, dim) tensors."""
    na = sqrt((a * a).sum(axis=1, keepdims=True))
    nb = sqrt((b * b).sum(axis=1, keepdims=True))
    if np.any(na.data == 0.0) or np.any(nb.data == 0.0):
        raise ValueError("zero-norm representation in contrastive loss")
    dots = (a * b).sum(axis=1, keepdims=True)
    return (dots / (na * nb)).reshape(a.shape[0])


def loss_moon(base_loss: Tensor, z_local: Tensor, z_global: Tensor,
              z_prev: Tensor, tau: float, mu: float) -> Tensor:
    """Contrastive pull toward the global representation, push from the local past.

    Positive pair (local, global), negative pair (local, previous); the
    comparison representations enter detached so gradient flows only through
    z_local. With identical representations the term is exactly log 2.
    """
    if mu == 0.0:
        return base_loss
    s_pos = _row_cosine(z_local, z_global.detach()) * (1.0 / tau)
    s_neg = _row_cosine(z_local, z_prev.detach()) * (1.0 / tau)
    # -log(exp(a) / (exp(a) + exp(b))) = log(exp(a) + exp(b)) - a
    term = log(exp(s_pos) + exp(s_neg)) - s_pos
    return base_loss + mu * term.mean()


def _kd_divergence(student_logits: Tensor, teacher_probs: np.ndarray) -> Tensor:
    """KL(student || teacher) with the teacher held constant."""
    log_q = log_softmax(student_logits)
    q = exp(log_q)
    log_p = np.log(teacher_probs)
    return (q * (log_q - Tensor(log_p))).sum(axis=1).mean()


def _np_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _gradaug_impl(net: BlockNet, x: np.ndarray, y: np.ndarray,
                  config: MethodConfig,
                  rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    logits = net.forward(x)
    base = loss_ce(logits, y)
    if config.mu == 0.0 or config.n_subnets == 0:
        return base, logits
    teacher = _np_softmax(logits.data)
    kd = None
    for _ in range(config.n_subnets):
        omega = float(rng.uniform(config.omega_b, 1.0))
        scale = float(rng.choice(DOWNSAMPLE_SCALES))
        xi = downsample_transform(x, scale, rng)
        sub_logits = net.forward_subnetwork(xi, omega)
        term = _kd_divergence(sub_logits, teacher)
        kd = term if kd is None else kd + term
    return base + config.mu * kd, logits


def loss_gradaug(net: BlockNet, x: np.ndarray, y: np.ndarray,
                 config: MethodConfig, rng: np.random.Generator) -> Tensor:
    """Cross-entropy plus distillation into sampled-width subnetworks.

    Each subnetwork sees an independently transformed input at a width drawn
    from U(omega_b, 1) and is pulled toward the full network's detached
    output distribution. mu = 0 skips the subnetworks entirely.
    """
    return _gradaug_impl(net, x, y, config, rng)[0]


def transmitting_matrices(f_prev: Tensor, f_last: Tensor,
                          f_sub: Tensor) -> tuple[Tensor, Tensor]:
    """Cross-feature products used to estimate the final block's gain.

    Feature maps are flattened so batch (and any spatial positions) form the
    rows and channels the columns; when two maps disagree on spatial size the
    larger is adaptively average-pooled down to the smaller before the
    product. Returns (X_full, X_sub) with shapes (c_prev, c_last) and
    (c_prev, c_sub).
    """
    def flatten(f: Tensor) -> Tensor:
        if f.ndim == 2:
            return f
        if f.ndim == 4:
            b, c = f.shape[0], f.shape[1]
            return f.permute((0, 2, 3, 1)).reshape(b * f.shape[2] * f.shape[3], c)
        raise ValueError("features must be (B, C) or (B, C, H, W)")

    def match(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
        if a.ndim == 4 and b.ndim == 4 and a.shape[2:] != b.shape[2:]:
            if a.shape[2] * a.shape[3] >= b.shape[2] * b.shape[3]:
                a = adaptive_avg_pool2d(a, (b.shape[2], b.shape[3]))
            else:
                b = adaptive_avg_pool2d(b, (a.shape[2], a.shape[3]))
        return a, b

    a1, b1 = match(f_prev, f_last)
    x_full = matmul(flatten(a1).T, flatten(b1))
    a2, b2 = match(f_prev, f_sub)
    x_sub = matmul(flatten(a2).T, flatten(b2))
    return x_full, x_sub


def spectral_norm(x: Tensor, power_iters: int = 20,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Largest singular value by power iteration.

    The singular-vector estimates are built from detached values, so the
    result differentiates through x as u^T x v with u, v held constant (the
    exact gradient of sigma_max when the vectors have converged). A zero
    matrix short-circuits to 0.
    """
    if x.ndim != 2:
        raise ValueError("spectral norm is defined for 2-d tensors")
    if power_iters < 1:
        raise ValueError("power_iters must be positive")
    a = x.data
    if not np.any(a):
        return Tensor(0.0) * x.sum()  # keeps the zero on the graph with zero grad
    rng = rng if rng is not None else np.random.default_rng(0)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(power_iters):
        u = a @ v
        u /= np.linalg.norm(u)
        v = a.T @ u
        v /= np.linalg.norm(v)
    outer = np.outer(u, v)
    return (x * Tensor(outer)).sum()


def _fedalign_impl(net: BlockNet, x: np.ndarray, y: np.ndarray,
                   config: MethodConfig,
                   rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    f_prev, f_last, logits = net.forward_with_features(x)
    base = loss_ce(logits, y)
    if config.mu == 0.0:
        return base, logits
    f_sub = net.forward_final_subblock(f_prev, config.omega_S)
    x_full, x_sub = transmitting_matrices(f_prev, f_last, f_sub)
    k_full = spectral_norm(x_full, config.power_iters, rng)
    k_sub = spectral_norm(x_sub, config.power_iters, rng)
    lip = mse(k_sub, k_full)
    lip_value = lip.item()
    if lip_value < config.lip_epsilon:
        return base, logits
    scale = config.mu * base.item() / lip_value
    return base + scale * lip, logits


def loss_fedalign(net: BlockNet, x: np.ndarray, y: np.ndarray,
                  config: MethodConfig, rng: np.random.Generator) -> Tensor:
    """Cross-entropy plus alignment of full- and sub-width block gains.

    The final block is re-run at width omega_S on its full-width input; the
    squared difference of the two transmitting-matrix spectral norms is added
    after being rescaled so its contribution equals mu * value(cross-entropy)
    at the current point. A sub-epsilon alignment term is skipped outright,
    which also covers omega_S = 1 where both matrices coincide.
    """
    return _fedalign_impl(net, x, y, config, rng)[0]


# -- the client update loop ---------------------------------------------------


def _batched_indices(n: int, batch_size: int,
                     rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def _moon_shadows(ctx: ClientContext) -> tuple[BlockNet, BlockNet]:
    """Frozen copies of the received global model and the client's last model."""
    if ctx.global_weights is None or ctx.prev_weights is None:
        raise ValueError("moon needs global and previous weights")
    shadows = []
    for weights in (ctx.global_weights, ctx.prev_weights):
        net = BlockNet(ctx.model.spec, rng=None, with_projection=True,
                       requires_grad=False)
        net.load_state(weights)
        shadows.append(net)
    return shadows[0], shadows[1]


def _shadow_projection(shadow: BlockNet, x: np.ndarray) -> Tensor:
    _, f_last, _ = shadow.forward_with_features(x)
    return shadow.project(f_last)


def _step_loss(ctx: ClientContext, config: MethodConfig, xb: np.ndarray,
               yb: np.ndarray, aux) -> tuple[Tensor, float]:
    """Build one batch's loss graph; also report that batch's accuracy."""
    net = ctx.model
    m = config.method
    if m == "fedavg":
        logits = net.forward(xb)
        return loss_ce(logits, yb), _accuracy(logits.data, yb)
    if m == "fedprox":
        if ctx.global_weights is None:
            raise ValueError("fedprox needs the received global weights")
        logits = net.forward(xb)
        base = loss_ce(logits, yb)
        return (loss_fedprox(base, net.params, ctx.global_weights, config.mu),
                _accuracy(logits.data, yb))
    if m == "moon":
        f_prev, f_last, logits = net.forward_with_features(xb)
        base = loss_ce(logits, yb)
        if config.mu == 0.0:
            return base, _accuracy(logits.data, yb)
        global_net, prev_net = aux
        z_local = net.project(f_last)
        z_global = _shadow_projection(global_net, xb)
        z_prev = _shadow_projection(prev_net, xb)
        return (loss_moon(base, z_local, z_global, z_prev, config.tau, config.mu),
                _accuracy(logits.data, yb))
    if m == "mixup":
        perm = ctx.method_rng.permutation(len(xb))
        xm, ya, yb2, beta = mixup_batch(xb, yb, xb[perm], yb[perm],
                                        config.gamma, ctx.method_rng)
        logits = net.forward(xm)
        loss = beta * loss_ce(logits, ya) + (1.0 - beta) * loss_ce(logits, yb2)
        acc = beta * _accuracy(logits.data, ya) + (1 - beta) * _accuracy(logits.data, yb2)
        return loss, acc
    if m == "stochdepth":
        logits, _ = net.stochdepth_forward(xb, config.gamma_L, ctx.method_rng,
                                           training=True)
        return loss_ce(logits, yb), _accuracy(logits.data, yb)
    if m == "gradaug":
        loss, logits = _gradaug_impl(net, xb, yb, config, ctx.method_rng)
        return loss, _accuracy(logits.data, yb)
    if m == "fedalign":
        loss, logits = _fedalign_impl(net, xb, yb, config, ctx.method_rng)
        return loss, _accuracy(logits.data, yb)
    raise ValueError(f"unknown method {m!r}")


def client_update(ctx: ClientContext, config: MethodConfig, epochs: int,
                  batch_size: int, opt: OptimizerState) -> tuple[dict[str, Tensor], list[dict]]:
    """Run local epochs of clipped momentum SGD under the configured method.

    Returns the model's (mutated) parameter dict and per-epoch stats. Zero
    epochs leaves the parameters untouched.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if len(ctx.inputs) == 0:
        raise ValueError("client has no samples")
    aux = None
    if config.method == "moon" and config.mu != 0.0:
        aux = _moon_shadows(ctx)
    stats = []
    for _ in range(epochs):
        losses, accs, weights = [], [], []
        for idx in _batched_indices(len(ctx.inputs), batch_size, ctx.data_rng):
            xb, yb = ctx.inputs[idx], ctx.labels[idx]
            loss, acc = _step_loss(ctx, config, xb, yb, aux)
            zero_gradients(ctx.model.params)
            grads = gradients(loss, ctx.model.params)
            grads, _ = clip_grad_norm(grads, opt.clip_norm)
            sgd_step(ctx.model.params, grads, opt)
            losses.append(loss.item())
            accs.append(acc)
            weights.append(len(idx))
        w = np.asarray(weights, dtype=np.float64)
        stats.append({
            "loss": float(np.average(losses, weights=w)),
            "accuracy": float(np.average(accs, weights=w)),
        })
    return ctx.model.params, stats
