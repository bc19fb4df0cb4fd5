"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a *primitive* registered in ``PRIMITIVES``.
A primitive takes numpy arrays plus an attribute dict and returns the output
array together with a vector-Jacobian product closure.  ``eval_primitive``
wraps that in a :class:`Tensor` and records the application when any input
requires a gradient.

The public helpers (``conv3d``, ``linear``, ``softmax`` ...) are thin wrappers
over ``eval_primitive``.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS_NORM = 1e-5

_node_counter = itertools.count(1)
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised for misuse of the recorded graph (detached loss, double backward)."""


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class _Node:
    kind: str
    parents: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_node", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self._node: _Node | None = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, node: _Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = node is not None
        t.node_id = next(_node_counter)
        t._node = node
        t._consumed = False
        return t

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

PrimitiveFn = Callable[[list[np.ndarray], dict], tuple[np.ndarray, Callable]]
PRIMITIVES: dict[str, PrimitiveFn] = {}


def primitive(kind: str):
    def register(fn: PrimitiveFn) -> PrimitiveFn:
        PRIMITIVES[kind] = fn
        return fn

    return register


def eval_primitive(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply primitive ``kind`` to ``inputs`` and record it if needed."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    out, vjp = fn([t.data for t in tensors], dict(attrs or {}))
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    track = _grad_enabled and any(t.requires_grad for t in tensors)
    node = _Node(kind, tuple(tensors), vjp) if track else None
    return Tensor._from_op(out, node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


# ---------------------------------------------------------------------------
# elementwise / algebraic
# ---------------------------------------------------------------------------


@primitive("add")
def _add(xs, attrs):
    a, b = xs
    try:
        out = a + b
    except ValueError as e:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}") from e
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("mul")
def _mul(xs, attrs):
    a, b = xs
    try:
        out = a * b
    except ValueError as e:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}") from e
    return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("scale")
def _scale(xs, attrs):
    (a,) = xs
    c = float(attrs["factor"])
    return a * c, lambda g: (g * c,)


@primitive("matmul")
def _matmul(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


@primitive("relu")
def _relu(xs, attrs):
    (a,) = xs
    on = a > 0
    return np.where(on, a, 0.0), lambda g: (g * on,)


@primitive("exp")
def _exp(xs, attrs):
    (a,) = xs
    out = np.exp(a)
    return out, lambda g: (g * out,)


@primitive("log")
def _log(xs, attrs):
    (a,) = xs
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a)
    return out, lambda g: (g / a,)


@primitive("linear")
def _linear(xs, attrs):
    if len(xs) == 3:
        x, w, b = xs
    else:
        (x, w), b = xs, None
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = g @ w.T
        gw = x.reshape(-1, w.shape[0]).T @ g2
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return out, vjp


# ---------------------------------------------------------------------------
# normalisations and softmax family (last axis)
# ---------------------------------------------------------------------------


@primitive("softmax")
def _softmax(xs, attrs):
    (a,) = xs
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@primitive("log_softmax")
def _log_softmax(xs, attrs):
    """Log-softmax over the last axis; ``mask`` (bool, True = candidate)
    restricts the normaliser and zeroes excluded outputs."""
    (a,) = xs
    mask = attrs.get("mask")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("log_softmax: a row has no candidates")
    masked = np.where(mask, a, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = np.where(mask, a - m - np.log(s), 0.0)
    p = e / s

    def vjp(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return out, vjp


@primitive("logsumexp")
def _logsumexp(xs, attrs):
    """log(sum(exp(x))) over the last axis restricted to ``mask`` entries."""
    (a,) = xs
    mask = attrs.get("mask")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("logsumexp: a row has no candidates")
    masked = np.where(mask, a, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    p = e / s
    return out, lambda g: (p * g[..., None],)


@primitive("layernorm")
def _layernorm(xs, attrs):
    x, gamma, beta = xs
    eps = float(attrs.get("eps", EPS_NORM))
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError("layernorm: affine parameters must match the last axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma + beta

    def vjp(g):
        dxhat = g * gamma
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return out, vjp


@primitive("l2_normalize")
def _l2_normalize(xs, attrs):
    (a,) = xs
    # rescale by the largest entry so squaring neither underflows nor overflows
    big = np.abs(a).max(axis=-1, keepdims=True)
    if np.any(big == 0):
        raise NonFiniteError("l2_normalize: zero vector")
    r = a / big
    rnorm = np.sqrt((r * r).sum(axis=-1, keepdims=True))
    norm = big * rnorm
    y = r / rnorm
    return y, lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)


@primitive("batchnorm3d")
def _batchnorm3d(xs, attrs):
    """Per-channel normalisation of an (N, C, D, H, W) tensor.

    ``running_mean``/``running_var`` are updated in place in training mode
    (momentum ``momentum``, unbiased variance) and used as-is in eval mode.
    """
    x, gamma, beta = xs
    if x.ndim != 5 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batchnorm3d: bad shapes x={x.shape} gamma={gamma.shape}")
    eps = float(attrs.get("eps", EPS_NORM))
    rm, rv = attrs["running_mean"], attrs["running_var"]
    axes = (0, 2, 3, 4)
    bshape = (1, -1, 1, 1, 1)
    gb, bb = gamma.reshape(bshape), beta.reshape(bshape)
    if attrs.get("training", True):
        m = x.size // x.shape[1]
        mu = x.mean(axis=axes)
        xc = x - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(bshape)
        mom = float(attrs.get("momentum", 0.1))
        if attrs.get("update_stats", True):
            rm *= 1.0 - mom
            rm += mom * mu
            rv *= 1.0 - mom
            rv += mom * var * (m / max(m - 1, 1))

        def vjp(g):
            dxhat = g * gb
            dx = inv.reshape(bshape) / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (x - rm.reshape(bshape)) * inv.reshape(bshape)

        def vjp(g):
            dx = g * (gamma * inv).reshape(bshape)
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return xhat * gb + bb, vjp


# ---------------------------------------------------------------------------
# 3-D convolution and pooling on (N, C, D, H, W)
# ---------------------------------------------------------------------------


def _scatter_windows(gw: np.ndarray, padded_shape, kernel, stride) -> np.ndarray:
    """Adjoint of the strided window view: gw is (kd, kh, kw, N, C, Do, Ho, Wo)."""
    out = np.zeros(padded_shape)
    do, ho, wo = gw.shape[5:]
    sd, sh, sw = stride
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            for k in range(kernel[2]):
                out[
                    :,
                    :,
                    i : i + sd * (do - 1) + 1 : sd,
                    j : j + sh * (ho - 1) + 1 : sh,
                    k : k + sw * (wo - 1) + 1 : sw,
                ] += gw[i, j, k]
    return out


def _windows(x: np.ndarray, kernel, stride) -> np.ndarray:
    win = sliding_window_view(x, kernel, axis=(2, 3, 4))
    return win[:, :, :: stride[0], :: stride[1], :: stride[2]]


@primitive("conv3d")
def _conv3d(xs, attrs):
    if len(xs) == 3:
        x, w, b = xs
    else:
        (x, w), b = xs, None
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError("conv3d: bias must have one entry per output channel")
    stride = _triple(attrs.get("stride", 1))
    pad = _triple(attrs.get("padding", 0))
    kernel = w.shape[2:]
    co, ci = w.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    if any(xp.shape[2 + i] < kernel[i] for i in range(3)):
        raise ValueError("conv3d: kernel larger than padded input")
    win = _windows(xp, kernel, stride)  # N, Ci, Do, Ho, Wo, kd, kh, kw
    n, _, do, ho, wo = win.shape[:5]
    kvol = int(np.prod(kernel))
    # im2col, transposed: one column per output location, rows ordered like w[o].ravel()
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(ci * kvol, -1)
    wmat = w.reshape(co, -1)
    out = wmat @ cols
    if b is not None:
        out += b[:, None]
    out = np.ascontiguousarray(out.reshape(co, n, do, ho, wo).transpose(1, 0, 2, 3, 4))

    def vjp(g):
        gmat = g.transpose(1, 0, 2, 3, 4).reshape(co, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        if stride == (1, 1, 1):
            # full correlation of g with the flipped, channel-swapped kernel
            gp = np.pad(g, ((0, 0), (0, 0)) + tuple((k - 1, k - 1) for k in kernel))
            gwin = sliding_window_view(gp, kernel, axis=(2, 3, 4))
            gcols = gwin.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(co * kvol, -1)
            wflip = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(ci, -1)
            gxp = (wflip @ gcols).reshape((ci, n) + gwin.shape[2:5]).transpose(1, 0, 2, 3, 4)
        else:
            gcols = (wmat.T @ gmat).reshape((ci,) + kernel + (n, do, ho, wo))
            gcols = np.ascontiguousarray(gcols.transpose(1, 2, 3, 4, 0, 5, 6, 7))
            gxp = _scatter_windows(gcols, xp.shape, kernel, stride)
        gx = gxp[
            :,
            :,
            pad[0] : pad[0] + x.shape[2],
            pad[1] : pad[1] + x.shape[3],
            pad[2] : pad[2] + x.shape[4],
        ]
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return out, vjp


@primitive("maxpool3d")
def _maxpool3d(xs, attrs):
    (x,) = xs
    if x.ndim != 5:
        raise ValueError(f"maxpool3d: expected a 5-d input, got {x.shape}")
    kernel = _triple(attrs.get("kernel", 2))
    stride = _triple(attrs.get("stride", kernel))
    if any(x.shape[2 + i] < kernel[i] for i in range(3)):
        raise ValueError(f"maxpool3d: input {x.shape} smaller than kernel {kernel}")
    win = _windows(x, kernel, stride)
    flat = win.reshape(win.shape[:5] + (-1,))
    # argmax returns the first maximum: ties go to the lowest flat index
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros(flat.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = np.ascontiguousarray(np.moveaxis(gw.reshape(win.shape), (5, 6, 7), (0, 1, 2)))
        return (_scatter_windows(gw, x.shape, kernel, stride),)

    return out, vjp


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@primitive("mha")
def _mha(xs, attrs):
    """Scaled dot-product attention over heads.

    q, k, v are (N, T, W).  ``key_mask`` (N, T) marks real (non-PAD) tokens;
    ``causal`` additionally hides future keys.
    """
    q, k, v = xs
    heads = int(attrs["heads"])
    n, t, width = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ValueError("mha: q, k, v must share a shape")
    if width % heads:
        raise ValueError(f"mha: width {width} not divisible by {heads} heads")
    dh = width // heads
    sc = 1.0 / np.sqrt(dh)

    def split(a):
        return a.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    allowed = np.ones((n, 1, t, t), dtype=bool)
    key_mask = attrs.get("key_mask")
    if key_mask is not None:
        allowed = allowed & np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if attrs.get("causal", False):
        allowed = allowed & np.tril(np.ones((t, t), dtype=bool))
    if not allowed.any(axis=-1).all():
        raise ValueError("mha: a query has no visible keys")
    s = np.where(allowed, (qh @ kh.transpose(0, 1, 3, 2)) * sc, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(s), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(n, t, width)

    def vjp(g):
        gh = split(g)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(n, t, width)

        return merge(gq), merge(gk), merge(gv)

    return out, vjp


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


@primitive("embedding")
def _embedding(xs, attrs):
    (table,) = xs
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding: token id out of range")

    def vjp(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return table[ids], vjp


@primitive("index")
def _index(xs, attrs):
    (a,) = xs
    key = attrs["key"]
    out = np.array(a[key], dtype=np.float64)

    def vjp(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, key, g)
        return (ga,)

    return out, vjp


@primitive("transpose")
def _transpose(xs, attrs):
    """Swap the last two axes."""
    (a,) = xs
    if a.ndim < 2:
        raise ValueError("transpose needs at least 2 axes")
    return np.swapaxes(a, -1, -2).copy(), lambda g: (np.swapaxes(g, -1, -2),)


@primitive("concat")
def _concat(xs, attrs):
    axis = int(attrs.get("axis", 0))
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError as e:
        raise ValueError(f"concat: {e}") from e
    bounds = np.cumsum([a.shape[axis] for a in xs])[:-1]
    return out, lambda g: np.split(g, bounds, axis=axis)


@primitive("reshape")
def _reshape(xs, attrs):
    (a,) = xs
    try:
        out = a.reshape(attrs["shape"])
    except ValueError as e:
        raise ValueError(f"reshape: {e}") from e
    return out, lambda g: (g.reshape(a.shape),)


@primitive("sum")
def _sum(xs, attrs):
    (a,) = xs
    axis, keep = attrs.get("axis"), attrs.get("keepdims", False)
    out = np.asarray(a.sum(axis=axis, keepdims=keep), dtype=np.float64)

    def vjp(g):
        if axis is not None and not keep:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


@primitive("mean")
def _mean(xs, attrs):
    (a,) = xs
    axis, keep = attrs.get("axis"), attrs.get("keepdims", False)
    out = np.asarray(a.mean(axis=axis, keepdims=keep), dtype=np.float64)
    count = a.size // max(out.size, 1) if a.size else 1

    def vjp(g):
        if axis is not None and not keep:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return out, vjp


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return eval_primitive("add", [a, b])


def mul(a, b) -> Tensor:
    return eval_primitive("mul", [a, b])


def scale(a, factor: float) -> Tensor:
    return eval_primitive("scale", [a], {"factor": factor})


def matmul(a, b) -> Tensor:
    return eval_primitive("matmul", [a, b])


def relu(a) -> Tensor:
    return eval_primitive("relu", [a])


def exp(a) -> Tensor:
    return eval_primitive("exp", [a])


def log(a) -> Tensor:
    return eval_primitive("log", [a])


def linear(x, w, b=None) -> Tensor:
    return eval_primitive("linear", [x, w] if b is None else [x, w, b])


def softmax(a) -> Tensor:
    return eval_primitive("softmax", [a])


def log_softmax(a, mask=None) -> Tensor:
    return eval_primitive("log_softmax", [a], {"mask": mask})


def logsumexp(a, mask=None) -> Tensor:
    return eval_primitive("logsumexp", [a], {"mask": mask})


def transpose(a) -> Tensor:
    return eval_primitive("transpose", [a])


def layernorm(x, gamma, beta, eps: float = EPS_NORM) -> Tensor:
    return eval_primitive("layernorm", [x, gamma, beta], {"eps": eps})


def l2_normalize(a) -> Tensor:
    return eval_primitive("l2_normalize", [a])


def batchnorm3d(x, gamma, beta, running_mean, running_var, training=True,
                momentum=0.1, eps=EPS_NORM, update_stats=True) -> Tensor:
    return eval_primitive(
        "batchnorm3d",
        [x, gamma, beta],
        {
            "running_mean": running_mean,
            "running_var": running_var,
            "training": training,
            "momentum": momentum,
            "eps": eps,
            "update_stats": update_stats,
        },
    )


def conv3d(x, w, b=None, stride=1, padding=0) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return eval_primitive("conv3d", inputs, {"stride": stride, "padding": padding})


def maxpool3d(x, kernel=2, stride=None) -> Tensor:
    return eval_primitive("maxpool3d", [x], {"kernel": kernel, "stride": stride or kernel})


def mha(q, k, v, heads: int, causal: bool = False, key_mask=None) -> Tensor:
    return eval_primitive("mha", [q, k, v], {"heads": heads, "causal": causal, "key_mask": key_mask})


def embedding(table, ids) -> Tensor:
    return eval_primitive("embedding", [table], {"ids": ids})


def index(a, key) -> Tensor:
    return eval_primitive("index", [a], {"key": key})


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return eval_primitive("concat", list(tensors), {"axis": axis})


def reshape(a, shape) -> Tensor:
    return eval_primitive("reshape", [a], {"shape": tuple(shape)})


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return eval_primitive("sum", [a], {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False) -> Tensor:
    return eval_primitive("mean", [a], {"axis": axis, "keepdims": keepdims})


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphRecord:
    kind: str
    input_ids: tuple[int, ...]
    output_id: int


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.node_id in seen:
            continue
        seen.add(t.node_id)
        stack.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.parents):
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
    return order


def graph_of(root: Tensor) -> list[GraphRecord]:
    """Primitive applications leading to ``root``, in topological order."""
    return [
        GraphRecord(t._node.kind, tuple(p.node_id for p in t._node.parents), t.node_id)
        for t in _topo_order(root)
        if t._node is not None
    ]


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``.  The graph
    is released afterwards; a second call on the same loss raises.
    Returns the gradient delivered to each leaf by this call, keyed by node id.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no input requires a gradient")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    delivered: dict[int, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(t.node_id, None)
        if g is None:
            continue
        if t._node is None:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient")
            delivered[t.node_id] = g
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        node = t._node
        if node.vjp is None:
            raise GraphError("graph already consumed by a previous backward call")
        in_grads = node.vjp(g)
        node.vjp = None
        for p, pg in zip(node.parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = np.asarray(pg, dtype=np.float64)
    for t in order:
        t._consumed = True
    return delivered


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-3,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``coords`` restricts the comparison to the given flat indices.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros(base.shape)
    analytic = analytic.ravel()
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for sgn in (1.0, -1.0):
            shifted = base.copy().ravel()
            shifted[i] += sgn * h
            with no_grad():
                v = float(f(Tensor(shifted.reshape(base.shape))).data)
            if not np.isfinite(v):
                raise NonFiniteError("f is not finite near the check point")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
