"""Shared test fixtures: tiny models and finite-difference oracles.

The gradient and Hessian oracles here deliberately avoid the library's own
backward pass: they perturb parameters and difference loss (or gradient)
values, so agreement is evidence rather than tautology. Networks built for
finite-difference comparison use tanh activations, which are smooth
everywhere; relu paths are checked separately at points safely away from the
kink.
"""
import numpy as np

from fedsim.tensor import Tensor, matmul, params_to_vector, tanh


class TanhMLP:
    """Dense tanh network over a params dict, shaped like the real models."""

    def __init__(self, dims, rng, scale=0.6, requires_grad=True):
        self.dims = tuple(dims)
        self.params = {}
        for i in range(len(dims) - 1):
            w = rng.normal(0.0, scale / np.sqrt(dims[i]), (dims[i], dims[i + 1]))
            b = rng.normal(0.0, 0.1, dims[i + 1])
            self.params[f"w{i}"] = Tensor(w, requires_grad=requires_grad)
            self.params[f"b{i}"] = Tensor(b, requires_grad=requires_grad)

    def forward(self, x):
        h = x if isinstance(x, Tensor) else Tensor(x)
        n = len(self.dims) - 1
        for i in range(n):
            h = matmul(h, self.params[f"w{i}"]) + self.params[f"b{i}"]
            if i < n - 1:
                h = tanh(h)
        return h

    def param_count(self):
        return int(params_to_vector(self.params).size)


class QuadraticModel:
    """loss(theta) = 0.5 theta^T A theta + b theta, so the Hessian is exactly A.

    A must be symmetric. Exposes the params-dict interface the curvature
    routines expect; the batch argument of the loss is ignored.
    """

    def __init__(self, a: np.ndarray, b: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        assert np.allclose(a, a.T), "test Hessian must be symmetric"
        self.a = a
        self.b = np.asarray(b, dtype=np.float64)
        self.params = {"theta": Tensor(np.zeros(len(b)), requires_grad=True)}

    def loss(self, model, x, y):
        th = self.params["theta"].reshape(1, -1)
        quad = (matmul(matmul(th, Tensor(self.a)), th.reshape(-1, 1))).sum()
        lin = (self.params["theta"] * Tensor(self.b)).sum()
        return 0.5 * quad + lin


def numeric_grad(loss_builder, params, eps=1e-6):
    """Central finite-difference gradient of a rebuildable scalar loss.

    loss_builder() must recompute the loss from the current params data.
    Returns {name: array} with the same shapes as the parameters.
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_builder().item()
            flat[i] = orig - eps
            down = loss_builder().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        out[name] = g
    return out


def numeric_hessian(loss_builder, params, eps=1e-3):
    """Dense Hessian from loss values alone (double central differences).

    H[i, j] = (L(+i+j) - L(+i-j) - L(-i+j) + L(-i-j)) / (4 eps^2), evaluated
    over the flattened parameter vector in params_to_vector order.
    """
    vec = params_to_vector(params)
    layout = vec.layout
    flats = {name: params[name].data.reshape(-1) for name, _, _ in layout}

    def poke(i, delta):
        for name, shape, offset in layout:
            n = flats[name].size
            if offset <= i < offset + n:
                flats[name][i - offset] += delta
                return

    n = vec.size
    h = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            acc = 0.0
            for si, sj, sign in ((eps, eps, 1.0), (eps, -eps, -1.0),
                                 (-eps, eps, -1.0), (-eps, -eps, 1.0)):
                poke(i, si)
                poke(j, sj)
                acc += sign * loss_builder().item()
                poke(i, -si)
                poke(j, -sj)
            h[i, j] = h[j, i] = acc / (4.0 * eps * eps)
    return h


def max_rel_err(got, want, floor=1e-8):
    """Largest absolute deviation, scaled by the oracle's largest magnitude."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(float(np.max(np.abs(want))), floor)
    return float(np.max(np.abs(got - want))) / denom


def random_orthogonal(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def matrix_with_spectrum(m, n, sigmas, rng):
    """Random matrix with the given leading singular values (rest zero)."""
    k = len(sigmas)
    u = random_orthogonal(m, rng)[:, :k]
    v = random_orthogonal(n, rng)[:, :k]
    return (u * np.asarray(sigmas)) @ v.T
