"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the simulator flows through the Tensor type below. Ops build a
DAG as they run; backward() walks it once in reverse topological order and
accumulates gradients into leaf tensors. The op set is intentionally small:
matmul, 2-d convolution, elementwise arithmetic, relu/tanh/exp/log/sqrt,
reductions, slicing and axis permutation, average pooling (plain, adaptive,
nearest upsample), fused softmax cross-entropy, and mean squared error.

The module also carries the optimizer-side helpers that operate on parameter
dicts: SGD with classic momentum, global gradient-norm clipping, and the
flatten/unflatten bijection between a parameter dict and a single vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def _f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode AD needs.

    `requires_grad` marks leaves that should receive gradients and propagates
    through ops. Detached tensors (`detach()`) never receive gradient
    contributions. Value arrays are treated as immutable once wrapped.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _op(data: Array, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar; gradients accumulate into .grad.

        Repeated calls keep accumulating until zero_grad() clears a leaf,
        which is what makes backward linear in the loss.
        """
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, Array] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        # leaves collected above; interior nodes with no _backward cannot occur

    # -- arithmetic -------------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other
        data = a.data + b.data
        return Tensor._op(data, (a, b), lambda g: (
            _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._op(-a.data, (a,), lambda g: (-g,))

    def __sub__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other
        data = a.data - b.data
        return Tensor._op(data, (a, b), lambda g: (
            _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))

    def __rsub__(self, other):
        return Tensor._wrap(other) - self

    def __mul__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other
        data = a.data * b.data
        return Tensor._op(data, (a, b), lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other
        data = a.data / b.data
        return Tensor._op(data, (a, b), lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        data = a.data ** p
        return Tensor._op(data, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._op(a.data.reshape(shape), (a,),
                          lambda g: (g.reshape(old),))

    def permute(self, axes: tuple[int, ...]) -> "Tensor":
        a = self
        inv = tuple(np.argsort(axes))
        return Tensor._op(np.transpose(a.data, axes), (a,),
                          lambda g: (np.transpose(g, inv),))

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ValueError("T is defined for 2-d tensors")
        return self.permute((1, 0))

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            gg = g
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                for ax in sorted(ax % a.data.ndim for ax in axes):
                    gg = np.expand_dims(gg, ax)
            return (np.broadcast_to(gg, a.data.shape).copy(),)

        return Tensor._op(data, (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        s = self.sum(axis=axis, keepdims=keepdims)
        n = self.data.size / s.data.size
        return s * (1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-d tensors only")
    data = a.data @ b.data
    return Tensor._op(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    x = Tensor._wrap(x)
    mask = x.data > 0
    return Tensor._op(np.where(mask, x.data, 0.0), (x,),
                      lambda g: (np.where(mask, g, 0.0),))


def tanh(x: Tensor) -> Tensor:
    x = Tensor._wrap(x)
    t = np.tanh(x.data)
    return Tensor._op(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    x = Tensor._wrap(x)
    e = np.exp(x.data)
    return Tensor._op(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    x = Tensor._wrap(x)
    return Tensor._op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    x = Tensor._wrap(x)
    s = np.sqrt(x.data)
    return Tensor._op(s, (x,), lambda g: (g * 0.5 / s,))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads the complement."""
    x = Tensor._wrap(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return Tensor._op(data, (x,), back)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """2-d convolution, NCHW layout, square kernel, no bias.

    x: (B, Cin, H, W), w: (Cout, Cin, k, k). Implemented by gathering kernel
    offsets into columns; desk-scale sizes keep this cheap.
    """
    x, w = Tensor._wrap(x), Tensor._wrap(w)
    B, Cin, H, W = x.data.shape
    Cout, Cin2, k, k2 = w.data.shape
    if Cin != Cin2 or k != k2:
        raise ValueError("kernel shape does not match input channels")
    Hout = (H + 2 * padding - k) // stride + 1
    Wout = (W + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((B, Cin, k, k, Hout, Wout), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Hout:stride,
                                  j:j + stride * Wout:stride]
    cols2 = cols.reshape(B, Cin * k * k, Hout * Wout)
    w2 = w.data.reshape(Cout, Cin * k * k)
    out = (w2 @ cols2).reshape(B, Cout, Hout, Wout)

    def back(g):
        g2 = g.reshape(B, Cout, Hout * Wout)
        dw = np.einsum("bol,bcl->oc", g2, cols2).reshape(w.data.shape)
        dcols = (w2.T @ g2).reshape(B, Cin, k, k, Hout, Wout)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * Hout:stride,
                    j:j + stride * Wout:stride] += dcols[:, :, i, j]
        if padding:
            dx = dxp[:, :, padding:-padding, padding:-padding]
        else:
            dx = dxp
        return (dx, dw)

    return Tensor._op(out, (x, w), back)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k-by-k average pooling; spatial dims must divide by k."""
    x = Tensor._wrap(x)
    B, C, H, W = x.data.shape
    if H % k or W % k:
        raise ValueError("pooling window must divide spatial dims")
    data = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def back(g):
        gg = g[:, :, :, None, :, None] / (k * k)
        return (np.broadcast_to(gg, (B, C, H // k, k, W // k, k))
                .reshape(B, C, H, W).copy(),)

    return Tensor._op(data, (x,), back)


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Average pooling onto an arbitrary output grid (identity when equal)."""
    x = Tensor._wrap(x)
    B, C, H, W = x.data.shape
    oh, ow = out_hw
    if (oh, ow) == (H, W):
        return x
    rb = [(i * H // oh, -(-(i + 1) * H // oh)) for i in range(oh)]
    cb = [(j * W // ow, -(-(j + 1) * W // ow)) for j in range(ow)]
    data = np.empty((B, C, oh, ow), dtype=np.float64)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            data[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def back(g):
        dx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                dx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] /
                                           ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return (dx,)

    return Tensor._op(data, (x,), back)


def upsample_nearest(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    x = Tensor._wrap(x)
    B, C, H, W = x.data.shape
    oh, ow = out_hw
    ri = (np.arange(oh) * H) // oh
    ci = (np.arange(ow) * W) // ow
    data = x.data[:, :, ri][:, :, :, ci]

    def back(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        return (dx,)

    return Tensor._op(data, (x,), back)


def softmax_cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits).

    Fused forward/backward: grad wrt logits is (softmax - onehot) / batch.
    """
    logits = Tensor._wrap(logits)
    y = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, classes)")
    B, K = logits.data.shape
    if y.shape != (B,):
        raise ValueError("labels must be a (batch,) integer array")
    if y.min() < 0 or y.max() >= K:
        raise ValueError("label out of range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - z[np.arange(B), y]).mean())

    def back(g):
        p = np.exp(z - lse)
        p[np.arange(B), y] -= 1.0
        return (p * (g / B),)

    return Tensor._op(np.float64(loss), (logits,), back)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference; on scalars this is just (a - b)^2."""
    d = Tensor._wrap(a) - Tensor._wrap(b)
    return (d * d).mean()


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log softmax built from primitive ops (shift is a constant)."""
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - m
    lse = log(exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


# -- parameter-dict helpers -----------------------------------------------


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, Array]:
    """Backward from `loss` and return {name: grad} for every parameter.

    Parameters not reachable from the loss get zero gradients rather than an
    error. Accumulates into existing .grad slots like backward() does.
    """
    loss.backward()
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_gradients(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def clip_grad_norm(grads: dict[str, Array], max_norm: float) -> tuple[dict[str, Array], float]:
    """Scale gradients so their global L2 norm is at most max_norm.

    Returns (scaled grads, applied scale). Non-finite gradients raise, which
    is the divergence signal the training loop relies on.
    """
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    if not np.isfinite(total):
        raise FloatingPointError("non-finite gradient norm; training diverged")
    norm = total ** 0.5
    if norm <= max_norm or norm == 0.0:
        return dict(grads), 1.0
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, scale


@dataclass
class OptimizerState:
    """SGD with classic momentum: v <- momentum*v + g; w <- w - lr*v."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    velocity: dict[str, Array] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], grads: dict[str, Array],
             state: OptimizerState) -> dict[str, Tensor]:
    """One momentum-SGD update, in place. Velocity persists in `state`."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v
    return params


@dataclass(frozen=True)
class ParamVector:
    """A flat float64 view of a parameter dict plus its layout.

    layout is a tuple of (name, shape, offset) triples sorted by name, which
    makes two models with the same architecture produce identical layouts.
    """

    data: Array
    layout: tuple[tuple[str, tuple[int, ...], int], ...]

    @property
    def size(self) -> int:
        return int(self.data.size)


def params_to_vector(params: dict[str, Tensor]) -> ParamVector:
    names = sorted(params)
    layout = []
    chunks = []
    offset = 0
    for name in names:
        arr = params[name].data
        layout.append((name, arr.shape, offset))
        chunks.append(arr.reshape(-1))
        offset += arr.size
    data = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float64)
    return ParamVector(data=data, layout=tuple(layout))


def vector_to_params(vec: ParamVector) -> dict[str, Array]:
    """Invert params_to_vector; exact bitwise round trip."""
    out = {}
    for name, shape, offset in vec.layout:
        n = int(np.prod(shape)) if shape else 1
        out[name] = vec.data[offset:offset + n].reshape(shape).copy()
    return out


def load_vector(params: dict[str, Tensor], vec: ParamVector) -> None:
    """Write a flat vector back into a parameter dict (layouts must match)."""
    expect = params_to_vector(params).layout
    if expect != vec.layout:
        raise ValueError("parameter layout mismatch")
    for name, shape, offset in vec.layout:
        n = int(np.prod(shape)) if shape else 1
        params[name].data = vec.data[offset:offset + n].reshape(shape).copy()
