"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a fresh graph node; `backward` walks the graph once in
reverse topological order. Only what the window transformer, the task
heads and the Gumbel-softmax objective need is implemented.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from mtnas.errors import NumericsError, ShapeError, StateError

_grad_enabled = True

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NumericsError("non-finite value in tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = op
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(lead + i for i, n in enumerate(shape) if n == 1 and g.shape[lead + i] != 1)
    return g.sum(axis=axes).reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast") from exc


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dims do not broadcast, {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # fold batch dims into one contraction instead of summing per-batch products
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight stored as (out, in)."""
    y = matmul(x, transpose(weight, (1, 0)))
    return y if bias is None else add(y, bias)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _make(x * cdf, (a,), bw, "gelu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericsError("log of non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis. Zero-variance input maps to `bias`."""
    if axis not in (-1, x.ndim - 1):
        raise ShapeError("layer_norm normalizes over the last axis only")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------- structure


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def slice(a: Tensor, ranges: Sequence) -> Tensor:  # noqa: A001 - op name
    """Basic-index slice; `ranges` holds one (start, stop) pair or slice per leading axis."""
    if len(ranges) > a.ndim:
        raise ShapeError("more slice ranges than axes")
    key = []
    for ax, r in enumerate(ranges):
        s = r if isinstance(r, type(np.s_[:])) else np.s_[r[0]:r[1]]
        start, stop, _ = s.indices(a.shape[ax])
        if stop <= start:
            raise ShapeError(f"empty slice {r} on axis {ax} of extent {a.shape[ax]}")
        key.append(s)
    key = tuple(key)
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(out, (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def pad2d(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad a (B, H, W, C) map at the bottom/right."""
    if pad_h == 0 and pad_w == 0:
        return x
    _, h, w, _ = x.shape
    out = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    return _make(out, (x,), lambda g: (g[:, :h, :w, :],), "pad2d")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `targets` under softmax(logits, -1)."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    idx = targets[..., None].astype(np.int64)
    n = targets.size
    loss = -np.take_along_axis(logp, idx, axis=-1).sum() / n

    def bw(g):
        d = np.exp(logp)
        np.put_along_axis(d, idx, np.take_along_axis(d, idx, axis=-1) - 1.0, axis=-1)
        return (d * (g / n),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


def l1_loss(pred: Tensor, target) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _make(np.asarray(np.abs(diff).mean()), (pred,), lambda g: (np.sign(diff) * (g / n),), "l1_loss")


# ---------------------------------------------------------------- spatial


def window_partition(x: Tensor, win: int) -> Tensor:
    """(B, H, W, C) -> (B * H/win * W/win, win*win, C), windows in row-major order."""
    b, h, w, c = x.shape
    if h % win or w % win:
        raise ShapeError(f"window {win} does not divide map {h}x{w}")
    nh, nw = h // win, w // win
    out = x.data.reshape(b, nh, win, nw, win, c).transpose(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)

    def bw(g):
        return (g.reshape(b, nh, nw, win, win, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c),)

    return _make(np.ascontiguousarray(out), (x,), bw, "window_partition")


def window_reverse(windows: Tensor, win: int, h: int, w: int) -> Tensor:
    n, t, c = windows.shape
    if t != win * win or h % win or w % win or n % ((h // win) * (w // win)):
        raise ShapeError(f"window_reverse: {windows.shape} incompatible with {h}x{w}, win={win}")
    nh, nw = h // win, w // win
    b = n // (nh * nw)
    out = windows.data.reshape(b, nh, nw, win, win, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)

    def bw(g):
        return (g.reshape(b, nh, win, nw, win, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, t, c),)

    return _make(np.ascontiguousarray(out), (windows,), bw, "window_reverse")


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    b, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (b, h, factor, w, factor, c)).reshape(
        b, h * factor, w * factor, c)

    def bw(g):
        return (g.reshape(b, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return _make(out.copy(), (x,), bw, f"nearest_upsample_{factor}x")


def nearest_upsample_2x(x: Tensor) -> Tensor:
    return nearest_upsample(x, 2)


def avgpool_2x(x: Tensor) -> Tensor:
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool_2x needs even sides, got {h}x{w}")
    out = x.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        g4 = np.broadcast_to(g[:, :, None, :, None, :] * 0.25, (b, h // 2, 2, w // 2, 2, c))
        return (g4.reshape(b, h, w, c).copy(),)

    return _make(out, (x,), bw, "avgpool_2x")


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, C)."""
    return mean(x, axis=(1, 2))


# ---------------------------------------------------------------- autodiff


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate dloss/dleaf into every participating leaf's `.grad`.

    When `wrt` is given, returns their gradients (zeros for tensors the loss
    does not depend on) in the same order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward already ran on this graph; rebuild it before calling again")
    loss._consumed = True

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()

    if wrt is None:
        return None
    out = []
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        out.append(t.grad)
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(f: Callable, params: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    plist = [params] if isinstance(params, Tensor) else list(params)
    zero_grad(plist)
    analytic = [g.copy() for g in backward(f(params), plist)]
    worst = 0.0
    for p, a in zip(plist, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(params).item()
                flat[i] = orig - h
                fm = f(params).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(aflat[i] - num) / max(1.0, abs(aflat[i])))
    zero_grad(plist)
    return worst
