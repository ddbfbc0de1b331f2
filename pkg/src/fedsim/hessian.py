"""Matrix-free curvature diagnostics over the flat parameter vector.

Hessian-vector products come from central finite differences of the gradient
(two gradient evaluations per product, step h = 1e-4 along the normalized
direction, so the truncation error is O(h^2) and float64 round-off stays
around 1e-8 for desk-scale losses). On top of that: power iteration with
deflation for leading eigenvalues, Hutchinson probes for the trace and the
diagonal, pairwise cross-client curvature comparisons, and a 2-d loss
landscape slice. All routines restore the model's parameters exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, gradients, params_to_vector, load_vector,
                     softmax_cross_entropy, zero_gradients)

DEFAULT_FD_STEP = 1e-4


def _get_vector(model) -> np.ndarray:
    return params_to_vector(model.params).data.copy()


def _set_vector(model, vec: np.ndarray) -> None:
    pv = params_to_vector(model.params)
    load_vector(model.params, type(pv)(data=np.asarray(vec, dtype=np.float64),
                                       layout=pv.layout))


def _grad_at(model, loss_fn, batch, vec: np.ndarray) -> np.ndarray:
    _set_vector(model, vec)
    zero_gradients(model.params)
    loss = loss_fn(model, batch[0], batch[1])
    gmap = gradients(loss, model.params)
    return np.concatenate([gmap[name].reshape(-1)
                           for name, _, _ in params_to_vector(model.params).layout])


def hvp(model, loss_fn, batch, v: np.ndarray,
        h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient.

    Uses the normalized direction internally and rescales, so the step size
    is meaningful regardless of |v|. A zero direction returns zeros.
    """
    theta = _get_vector(model)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ValueError("direction length does not match parameter count")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(theta)
    try:
        unit = v / norm
        g_plus = _grad_at(model, loss_fn, batch, theta + h * unit)
        g_minus = _grad_at(model, loss_fn, batch, theta - h * unit)
        return (g_plus - g_minus) * (norm / (2.0 * h))
    finally:
        _set_vector(model, theta)


def top_eigenpairs(model, loss_fn, batch, k: int = 1, iters: int = 100,
                   tol: float = 1e-4, seed: int = 0,
                   h: float = DEFAULT_FD_STEP):
    """Leading Hessian eigenvalues (by magnitude, signed) and eigenvectors.

    Power iteration on the finite-difference operator; already-found pairs
    are deflated by subtracting their lambda * v v^T projections. A pair
    whose Rayleigh quotient moves by less than tol (relatively) is converged;
    otherwise the best estimate is returned and flagged.
    """
    if k < 1:
        raise ValueError("k must be positive")
    rng = np.random.default_rng([seed, 0x5EED])
    n = _get_vector(model).size
    values: list[float] = []
    vectors: list[np.ndarray] = []
    converged: list[bool] = []
    for which in range(k):
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        lam = 0.0
        ok = False
        for _ in range(iters):
            w = hvp(model, loss_fn, batch, v, h=h)
            for lam_j, v_j in zip(values, vectors):
                w = w - lam_j * float(v_j @ v) * v_j
            new_lam = float(v @ w)
            wn = float(np.linalg.norm(w))
            if wn == 0.0:
                lam, ok = 0.0, True
                break
            v = w / wn
            if abs(new_lam - lam) <= tol * max(abs(new_lam), 1e-12):
                lam = new_lam
                ok = True
                break
            lam = new_lam
        values.append(lam)
        vectors.append(v)
        converged.append(ok)
    return values, vectors, converged


def top_eigenvalues(model, loss_fn, batch, k: int = 1, iters: int = 100,
                    tol: float = 1e-4, seed: int = 0,
                    h: float = DEFAULT_FD_STEP) -> tuple[list[float], list[bool]]:
    values, _, converged = top_eigenpairs(model, loss_fn, batch, k=k,
                                          iters=iters, tol=tol, seed=seed, h=h)
    return values, converged


def hutchinson_trace(model, loss_fn, batch, num_probes: int = 100,
                     seed: int = 0, h: float = DEFAULT_FD_STEP) -> tuple[float, float]:
    """Trace estimate E[v^T H v] over Rademacher probes, with its std error."""
    if num_probes < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng([seed, 0x7ACE])
    n = _get_vector(model).size
    samples = np.empty(num_probes)
    for i in range(num_probes):
        v = rng.integers(0, 2, size=n) * 2.0 - 1.0
        samples[i] = float(v @ hvp(model, loss_fn, batch, v, h=h))
    stderr = float(samples.std(ddof=1) / np.sqrt(num_probes)) if num_probes > 1 else 0.0
    return float(samples.mean()), stderr


def hessian_diagonal(model, loss_fn, batch, num_probes: int = 100,
                     seed: int = 0, h: float = DEFAULT_FD_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal estimate E[v * Hv] over Rademacher probes, with std errors.

    Exact in expectation; for a diagonal Hessian each probe is already exact
    because v * (diag * v) = diag when v has unit-magnitude entries.
    """
    if num_probes < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng([seed, 0xD1A6])
    n = _get_vector(model).size
    mean = np.zeros(n)
    m2 = np.zeros(n)
    for i in range(num_probes):
        v = rng.integers(0, 2, size=n) * 2.0 - 1.0
        sample = v * hvp(model, loss_fn, batch, v, h=h)
        delta = sample - mean
        mean += delta / (i + 1)
        m2 += delta * (sample - mean)
    if num_probes > 1:
        stderr = np.sqrt(m2 / (num_probes - 1)) / np.sqrt(num_probes)
    else:
        stderr = np.zeros(n)
    return mean, stderr


@dataclass
class HessianReport:
    """Bundle of curvature diagnostics for one model and probe batch."""

    top_eigenvalues: list[float]
    eigen_converged: list[bool]
    trace_estimate: float
    trace_stderr: float
    diagonal: np.ndarray
    diagonal_stderr: np.ndarray
    num_probes: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "top_eigenvalues": [float(x) for x in self.top_eigenvalues],
            "eigen_converged": [bool(b) for b in self.eigen_converged],
            "trace_estimate": self.trace_estimate,
            "trace_stderr": self.trace_stderr,
            "diagonal": self.diagonal.tolist(),
            "diagonal_stderr": self.diagonal_stderr.tolist(),
            "num_probes": self.num_probes,
            "seed": self.seed,
        }


def hessian_report(model, loss_fn, batch, k: int = 2, num_probes: int = 100,
                   iters: int = 100, tol: float = 1e-4,
                   seed: int = 0) -> HessianReport:
    values, converged = top_eigenvalues(model, loss_fn, batch, k=k, iters=iters,
                                        tol=tol, seed=seed)
    trace, trace_se = hutchinson_trace(model, loss_fn, batch,
                                       num_probes=num_probes, seed=seed)
    diag, diag_se = hessian_diagonal(model, loss_fn, batch,
                                     num_probes=num_probes, seed=seed)
    return HessianReport(values, converged, trace, trace_se, diag, diag_se,
                         num_probes, seed)


@dataclass
class CrossClientReport:
    """Pairwise curvature-mismatch metrics over client Hessian diagonals.

    norm_gap compares overall curvature magnitude: the squared difference of
    the squared norms of two diagonals. direction is the dot product divided
    by the product of squared norms (the literal normalization this metric is
    defined with); direction_cosine divides by the product of plain norms and
    is 1 for identical diagonals. Each field is the average over unordered
    client pairs; per_pair keeps the individual values.
    """

    norm_gap: float
    direction: float
    direction_cosine: float
    per_pair: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "norm_gap": self.norm_gap,
            "direction": self.direction,
            "direction_cosine": self.direction_cosine,
            "per_pair": self.per_pair,
        }


def cross_client_metrics(diagonals: list[np.ndarray],
                         client_ids: list[int] | None = None) -> CrossClientReport:
    if len(diagonals) < 2:
        raise ValueError("need at least two client diagonals")
    ids = client_ids if client_ids is not None else list(range(len(diagonals)))
    if len(ids) != len(diagonals):
        raise ValueError("client ids do not match diagonals")
    sq = []
    for d in diagonals:
        d = np.asarray(d, dtype=np.float64)
        s = float(d @ d)
        if s == 0.0:
            raise ValueError("zero-norm Hessian diagonal")
        sq.append(s)
    pairs = []
    for i in range(len(diagonals)):
        for j in range(i + 1, len(diagonals)):
            dot = float(np.asarray(diagonals[i]) @ np.asarray(diagonals[j]))
            pairs.append({
                "clients": [ids[i], ids[j]],
                "norm_gap": (sq[i] - sq[j]) ** 2,
                "direction": dot / (sq[i] * sq[j]),
                "direction_cosine": dot / np.sqrt(sq[i] * sq[j]),
            })
    return CrossClientReport(
        norm_gap=float(np.mean([p["norm_gap"] for p in pairs])),
        direction=float(np.mean([p["direction"] for p in pairs])),
        direction_cosine=float(np.mean([p["direction_cosine"] for p in pairs])),
        per_pair=pairs,
    )


def landscape_slice(model, loss_fn, batch, dir1: np.ndarray | None = None,
                    dir2: np.ndarray | None = None, grid: int = 21,
                    radius: float = 1.0, seed: int = 0):
    """Loss surface on a 2-d slice through the current parameters.

    Directions default to the top-2 Hessian eigenvectors; dir2 is
    orthonormalized against dir1 either way. Returns (alphas, betas, losses)
    with losses[i, j] evaluated at theta + alphas[i]*d1 + betas[j]*d2. The
    center entry is the unperturbed loss.
    """
    if grid < 2 or grid % 2 == 0:
        raise ValueError("grid must be odd and at least 3")
    if radius <= 0:
        raise ValueError("radius must be positive")
    theta = _get_vector(model)
    if dir1 is None or dir2 is None:
        _, vecs, _ = top_eigenpairs(model, loss_fn, batch, k=2, seed=seed)
        dir1 = vecs[0] if dir1 is None else dir1
        dir2 = vecs[1] if dir2 is None else dir2
    d1 = np.asarray(dir1, dtype=np.float64)
    d2 = np.asarray(dir2, dtype=np.float64)
    if d1.shape != theta.shape or d2.shape != theta.shape:
        raise ValueError("direction length does not match parameter count")
    d1 = d1 / np.linalg.norm(d1)
    scale2 = np.linalg.norm(d2)
    d2 = d2 - (d1 @ d2) * d1
    n2 = np.linalg.norm(d2)
    if n2 <= 1e-9 * scale2:
        raise ValueError("slice directions are collinear")
    d2 = d2 / n2
    alphas = np.linspace(-radius, radius, grid)
    betas = np.linspace(-radius, radius, grid)
    losses = np.empty((grid, grid))
    try:
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                _set_vector(model, theta + a * d1 + b * d2)
                losses[i, j] = float(loss_fn(model, batch[0], batch[1]).item())
    finally:
        _set_vector(model, theta)
    return alphas, betas, losses


def ce_loss_fn(model, x, y) -> Tensor:
    """Default probe loss: plain cross-entropy of the model on the batch."""
    return softmax_cross_entropy(model.forward(x), y)
