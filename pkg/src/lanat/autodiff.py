"""Dense f64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: every differentiable op appends a node
holding its parents and a backward closure, and ``backward`` replays the
nodes in exact reverse execution order. Tensors created while gradients
are disabled (see ``no_grad``) carry no graph and are plain values.

Non-finite values (NaN/Inf) anywhere in an op result are a contract
violation and raise ``NumericsError`` eagerly rather than propagating.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np


class NumericsError(ArithmeticError):
    """A tensor operation produced NaN or Inf."""


class GradientError(RuntimeError):
    """Backward called on an unsuitable graph (non-scalar or detached)."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    # Sum is one dispatch; any NaN/Inf in the array poisons it. Finite
    # overflow of the sum itself would need magnitudes ~1e300.
    if not math.isfinite(float(arr.sum())):
        raise NumericsError(f"non-finite values produced by {op}")


class Tensor:
    """N-dimensional f64 array, optionally tracked on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

    # -- introspection -------------------------------------------------

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
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph ---------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from self."""
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._backward is None and not self.requires_grad:
            raise GradientError("backward on a detached graph: loss does not depend on "
                                "any requires_grad tensor")
        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        # Node ids are allocated in execution order; visiting by descending
        # id replays the tape exactly backwards.
        nodes.sort(key=lambda t: t._id, reverse=True)
        self.grad = np.ones_like(self.data)
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    """Wrap an op result; records the tape node only when a parent needs grad."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _acc(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Accumulate a gradient contribution into ``t``.

    ``own=True`` promises ``g`` is a freshly allocated array no one else
    aliases, letting us adopt it without a defensive copy.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own and g.flags.writeable and g.base is None else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape`` by summing."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape), own=True)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        _acc(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    inv = 1.0 / b.data

    def bw(g):
        _acc(a, _unbroadcast(g * inv, a.data.shape), own=True)
        _acc(b, _unbroadcast(-g * a.data * inv * inv, b.data.shape), own=True)

    return _node(a.data * inv, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        _acc(x, g * y, own=True)

    return _node(y, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    def bw(g):
        _acc(x, g / x.data, own=True)

    return _node(np.log(x.data), (x,), bw, "log")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def bw(g):
        _acc(x, g * (0.5 / y), own=True)

    return _node(y, (x,), bw, "sqrt")


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _acc(x, g * y * (1.0 - y), own=True)

    return _node(y, (x,), bw, "sigmoid")


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def bw(g):
        _acc(x, g * (x.data > 0.0), own=True)

    return _node(y, (x,), bw, "relu")


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: split ``axis`` in half, a * sigmoid(b)."""
    n = x.data.shape[axis]
    if n % 2:
        raise ValueError(f"glu needs an even dimension, got {n} on axis {axis}")
    a, b = np.split(x.data, 2, axis=axis)
    s = 1.0 / (1.0 + np.exp(-b))
    y = a * s

    def bw(g):
        da = g * s
        db = g * a * s * (1.0 - s)
        _acc(x, np.concatenate([da, db], axis=axis), own=True)

    return _node(y, (x,), bw, "glu")


# -- reductions and reshaping -----------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.data.shape))
        elif keepdims:
            _acc(x, np.broadcast_to(g, x.data.shape))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), _lift(1.0 / n))


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _acc(x, g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _acc(x, g.transpose(inv))

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw, "transpose")


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _acc(p, piece)

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


def take_rows(x: Tensor, ids) -> Tensor:
    """Gather rows of a 2-d tensor; backward scatter-adds into used rows."""
    ids = np.asarray(ids, dtype=np.intp)
    if x.data.ndim != 2:
        raise ValueError("take_rows expects a 2-d tensor")
    if ids.size and (ids.min() < 0 or ids.max() >= x.data.shape[0]):
        raise IndexError(f"row index out of range for {x.data.shape[0]} rows")

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, ids, g)
        _acc(x, gx, own=True)

    return _node(x.data[ids], (x,), bw, "take_rows")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d by 2-d product, or batched 3-d by 3-d with equal leading dim."""
    ad, bd = a.data, b.data
    if ad.ndim == bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul shape mismatch: {ad.shape} by {bd.shape}")

        def bw(g):
            _acc(a, g @ bd.T, own=True)
            _acc(b, ad.T @ g, own=True)

    elif ad.ndim == bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ValueError(f"matmul shape mismatch: {ad.shape} by {bd.shape}")

        def bw(g):
            _acc(a, g @ bd.transpose(0, 2, 1), own=True)
            _acc(b, ad.transpose(0, 2, 1) @ g, own=True)

    else:
        raise ValueError(f"matmul supports 2-d or 3-d pairs, got {ad.ndim}-d and {bd.ndim}-d")
    return _node(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b for 2-d x; one tape node instead of two."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ValueError(f"linear shape mismatch: {xd.shape} by {wd.shape}")
    y = xd @ wd
    if b is not None:
        y += b.data

    def bw(g):
        _acc(x, g @ wd.T, own=True)
        _acc(w, xd.T @ g, own=True)
        if b is not None:
            _acc(b, g.sum(axis=0), own=True)

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, bw, "linear")


def split_heads(x: Tensor, heads: int, scale: float = 1.0) -> Tensor:
    """(L, d) to (heads, L, d/heads), optionally pre-scaled."""
    l, d = x.data.shape
    dk = d // heads
    y = x.data.reshape(l, heads, dk).transpose(1, 0, 2)
    y = y * scale if scale != 1.0 else np.ascontiguousarray(y)

    def bw(g):
        # reshape of the transposed view copies, so the result is fresh
        gx = g.transpose(1, 0, 2).reshape(l, d)
        _acc(x, gx * scale if scale != 1.0 else gx, own=True)

    return _node(y, (x,), bw, "split_heads")


def merge_heads(x: Tensor) -> Tensor:
    """(heads, L, dk) back to (L, heads*dk)."""
    h, l, dk = x.data.shape
    y = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(l, h * dk)

    def bw(g):
        _acc(x, np.ascontiguousarray(g.reshape(l, h, dk).transpose(1, 0, 2)), own=True)

    return _node(y, (x,), bw, "merge_heads")


# -- normalisation ----------------------------------------------------


def softmax(x: Tensor, axis: int = -1, add: np.ndarray | None = None) -> Tensor:
    """Softmax along one axis; ``add`` is a constant pre-softmax offset
    (an additive attention mask), applied without a graph node of its own."""
    z = x.data if add is None else x.data + add
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(x, (g - dot) * y, own=True)

    return _node(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        _acc(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True), own=True)

    return _node(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale-shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.data.shape[-1]

    def bw(g):
        _acc(gain, _unbroadcast(g * xhat, gain.data.shape))
        _acc(bias, _unbroadcast(g, bias.data.shape))
        gh = g * gain.data
        dot1 = gh.sum(axis=-1, keepdims=True)
        dot2 = (gh * xhat).sum(axis=-1, keepdims=True)
        _acc(x, (gh - (dot1 + xhat * dot2) / n) * inv, own=True)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


# -- convolution support ----------------------------------------------


def im2col(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """Unfold a (C, H, W) tensor into (out_h*out_w, C*kernel*kernel) patches."""
    c, h, w = x.data.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out_h = (hp - kernel) // stride + 1
    out_w = (wp - kernel) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {kernel} stride {stride}")
    # patch[oh, ow, c, ki, kj] -> flat index into the padded (C, hp, wp) buffer
    patch = (np.arange(c).reshape(1, 1, c, 1, 1) * (hp * wp)
             + (stride * np.arange(out_h) * wp).reshape(out_h, 1, 1, 1, 1)
             + (np.arange(kernel) * wp).reshape(1, 1, 1, kernel, 1)
             + (stride * np.arange(out_w)).reshape(1, out_w, 1, 1, 1)
             + np.arange(kernel).reshape(1, 1, 1, 1, kernel))
    idx = patch.reshape(out_h * out_w, c * kernel * kernel)
    padded_size = c * hp * wp

    def bw(g):
        gflat = np.bincount(idx.ravel(), weights=g.ravel(), minlength=padded_size)
        gpad = gflat.reshape(c, hp, wp)
        _acc(x, gpad[:, padding:padding + h, padding:padding + w], own=False)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    return _node(xp.reshape(-1)[idx], (x,), bw, "im2col")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """2-d convolution of a (C_in, H, W) tensor with (C_out, C_in, k, k) kernels."""
    c_out, c_in, kh, kw = kernels.data.shape
    if kh != kw:
        raise ValueError("square kernels only")
    if c_in != x.data.shape[0]:
        raise ValueError(f"kernel expects {c_in} input channels, got {x.data.shape[0]}")
    cols = im2col(x, kh, stride, padding)
    w = transpose(reshape(kernels, (c_out, c_in * kh * kw)), (1, 0))
    out = matmul(cols, w)
    if bias is not None:
        out = add(out, bias)
    hp = x.data.shape[1] + 2 * padding
    wp = x.data.shape[2] + 2 * padding
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kh) // stride + 1
    return transpose(reshape(out, (out_h, out_w, c_out)), (2, 0, 1))


# Table lookup and gather share one implementation; lookup of an id >= rows
# raises IndexError (out-of-vocabulary).
embedding_lookup = take_rows


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two nonzero vectors, as a scalar tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ValueError("cosine_similarity expects vectors")
    if not float(a.data @ a.data) or not float(b.data @ b.data):
        raise ValueError("cosine_similarity of a zero-norm vector")
    num = tsum(mul(a, b))
    den = sqrt(mul(tsum(mul(a, a)), tsum(mul(b, b))))
    return div(num, den)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def bw(g):
        _acc(x, g * mask, own=True)

    return _node(x.data * mask, (x,), bw, "dropout")


# -- gradient checking -------------------------------------------------


def check_gradient(f, x: Tensor, h: float = 1e-5, sample: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward and central finite differences.

    ``f`` must map ``x`` to a scalar Tensor. With ``sample`` set, only that
    many randomly chosen coordinates are probed (for large parameters).
    """
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=sample, replace=False)
    else:
        coords = np.arange(n)

    worst = 0.0
    af = analytic.reshape(-1)
    with no_grad():
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            up = f(x).item()
            flat[i] = keep - h
            down = f(x).item()
            flat[i] = keep
            central = (up - down) / (2.0 * h)
            err = abs(af[i] - central) / (abs(af[i]) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
