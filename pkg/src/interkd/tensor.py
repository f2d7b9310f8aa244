"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
at least one input requires a gradient, the output keeps references to its
parents and a closure mapping the upstream gradient to one gradient per
parent. :meth:`Tensor.backward` walks the resulting graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    # make ndarray (op) Tensor dispatch to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if self.data.size != 1:
            raise ShapeError(f"backward: root must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_sigmoid = expit


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "swish")


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half along ``axis``."""
    n = a.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis {axis} of shape {a.shape} has odd size")
    x1, x2 = np.split(a.data, 2, axis=axis)
    s = _sigmoid(x2)

    def backward(g):
        return (np.concatenate([g * s, g * x1 * s * (1.0 - s)], axis=axis),)

    return _make(x1 * s, (a,), backward, "glu")


def dropout(a: Tensor, mask: np.ndarray | None, p: float) -> Tensor:
    """Inverted dropout with an externally drawn keep-mask (``None`` means identity)."""
    if mask is None or p == 0.0:
        return a
    if mask.shape != a.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {a.shape}")
    m = mask.astype(DTYPE) / (1.0 - p)
    return _make(a.data * m, (a,), lambda g: (g * m,), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic(index)

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            shapes = [t.shape for t in tensors]
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ``ids`` may have any integer shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {weight.shape}")
    rows = weight.shape

    def backward(g):
        out = np.zeros(rows, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (out,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


def gather_last(a: Tensor, idx) -> Tensor:
    """``a[..., idx]`` with per-row index sets: idx has shape a.shape[:-1] + (K,)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} does not match {a.shape}")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        lead = np.indices(idx.shape[:-1] + (idx.shape[-1],))[:-1]
        np.add.at(out, (*lead, idx), g)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis=-1), (a,), backward, "gather")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None
    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (weight is in x out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        # ones @ g runs on BLAS and beats a reduction along axis 0
        return gx, gw, np.ones(g2.shape[0]) @ g2

    return _make(out.reshape(*lead, weight.shape[1]), parents, backward, "linear")


def pointwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Kernel-size-1 convolution over time, i.e. the same linear map at every frame.

    x: (B, T, C_in); weight: (C_in, C_out).
    """
    return linear(x, weight, bias)


# ---------------------------------------------------------------------------
# normalisations


def _check_axis(op: str, a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")
    return axis


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def logsumexp_np(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("log_softmax", a, axis)
    out = a.data - logsumexp_np(a.data, axis=axis, keepdims=True)
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("logsumexp", a, axis)
    out = logsumexp_np(a.data, axis=axis, keepdims=True)
    p = np.exp(a.data - out)
    return _make(np.squeeze(out, axis=axis), (a,),
                 lambda g: (np.expand_dims(g, axis) * p,), "logsumexp")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    d = x.shape[-1]
    if gain is not None and gain.shape != (d,):
        raise ShapeError(f"layer_norm: gain shape {gain.shape} does not match input {x.shape}")
    # row means as matvecs against a 1/d vector: BLAS beats ndarray.mean here
    avg = np.full(d, 1.0 / d)
    xc = x.data - (x.data @ avg)[..., None]
    inv = 1.0 / np.sqrt(((xc * xc) @ avg)[..., None] + eps)
    xhat = xc * inv
    out = xhat if gain is None else xhat * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward(g):
        gh = g if gain is None else g * gain.data
        gx = inv * (gh - (gh @ avg)[..., None] - xhat * ((gh * xhat) @ avg)[..., None])
        grads = [gx]
        ones = np.ones(g.size // d)
        if gain is not None:
            grads.append(ones @ (g * xhat).reshape(-1, d))
        if bias is not None:
            grads.append(ones @ g.reshape(-1, d))
        return tuple(grads)

    return _make(out, parents, backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolution and attention


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' convolution over time.

    x: (B, T, C); weight: (k, C) with odd k; output (B, T, C).
    """
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[1] != x.shape[2] or weight.shape[0] % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} and weight {weight.shape} incompatible")
    k = weight.shape[0]
    pad = k // 2
    T = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j:j + T, :] * weight.data[j]
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for j in range(k):
            gxp[:, j:j + T, :] += g * weight.data[j]
            gw[j] = (g * xp[:, j:j + T, :]).sum(axis=(0, 1))
        grads = (gxp[:, pad:pad + T, :], gw)
        return grads if bias is None else grads + (g.sum(axis=(0, 1)),)

    return _make(out, parents, backward, "depthwise_conv1d")


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where query i may attend to key j (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


NEG_INF = -1e30


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention.

    q: (..., Tq, d), k and v: (..., Tk, d). ``mask`` broadcasts to
    (..., Tq, Tk) and is True where attention is allowed.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} incompatible")
    c = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * c
    if mask is not None:
        scores = np.where(mask, scores, NEG_INF)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _make(out, (q, k, v), backward, "attention")


def grad_norm(tensors: Iterable[Tensor]) -> float:
    """Global L2 norm of the gradients held by ``tensors``."""
    return float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in tensors if t.grad is not None)))
