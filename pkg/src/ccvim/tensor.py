"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable computation in ccvim is expressed with the operations in
this module. A ``Tensor`` wraps a float64 ``numpy.ndarray``; operations on
tensors that require gradients record their parents and a backward closure,
and :func:`backward` replays that record in reverse topological order.

Custom fused operations (the selective scan, for instance) are built with
:func:`custom_op`, which takes the forward result, the parent tensors and a
closure mapping the output gradient to one gradient per parent.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ConfigError, LoadError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-dimensional float64 array with optional gradient accumulation."""

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str = "") -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn(g)`` receives the gradient w.r.t. the output and must return
    one array (or ``None``) per parent, each shaped like that parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out._op = name
    out._parents = ()
    out._backward = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Trailing-aligned broadcast; a dimension of size 1 stretches."""
    ndim = max(len(sa), len(sb))
    pa = (1,) * (ndim - len(sa)) + tuple(sa)
    pb = (1,) * (ndim - len(sb)) + tuple(sb)
    out = []
    for da, db in zip(pa, pb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"shapes {tuple(sa)} and {tuple(sb)} are not broadcastable")
    return tuple(out)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return custom_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return custom_op(out, (a, b), bw, "div")


# ---------------------------------------------------------------------------
# elementwise unary


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return custom_op(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return custom_op(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    big = x > 20.0
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    out[~big] = np.log1p(np.exp(x[~big]))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return custom_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return custom_op(_softplus(x), (a,), lambda g: (g * _sigmoid(x),), "softplus")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return custom_op(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    keep = x > lo
    return custom_op(np.where(keep, x, lo), (a,), lambda g: (g * keep,), "clamp_min")


_UNARY = {"sigmoid": sigmoid, "softplus": softplus, "exp": exp, "silu": silu,
          "neg": neg, "reciprocal": reciprocal}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"elementwise '{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise kind '{kind}'")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return custom_op(ad @ bd, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient flows to the first maximal element."""
    a = as_tensor(a)
    x = a.data
    if axis is None:
        idx = int(np.argmax(x))
        out = x.reshape(-1)[idx]
        if keepdims:
            out = np.reshape(out, (1,) * x.ndim)

        def bw(g):
            gx = np.zeros(x.size)
            gx[idx] = np.sum(g)
            return (gx.reshape(x.shape),)

        return custom_op(np.asarray(out), (a,), bw, "max")
    (ax,) = _norm_axis(axis, x.ndim)
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    out = np.take_along_axis(x, idx, ax)

    def bw(g):
        gx = np.zeros_like(x)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, gk, ax)
        return (gx,)

    return custom_op(out if keepdims else np.squeeze(out, ax), (a,), bw, "max")


def reduce(kind: str, a, axis=None) -> Tensor:
    fn = {"sum": tsum, "mean": mean, "max": tmax}.get(kind)
    if fn is None:
        raise ContractError(f"unknown reduction '{kind}'")
    return fn(a, axis)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    src = a.shape
    return custom_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    fancy = _is_fancy(idx)

    def bw(g):
        gx = np.zeros(shape)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return custom_op(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return custom_op(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"cannot stack shapes {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return custom_op(out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def pad(a, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows ``numpy.pad``."""
    a = as_tensor(a)
    pw = [tuple(p) for p in pad_width]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))
    return custom_op(np.pad(a.data, pw), (a,), lambda g: (g[crop],), "pad")


# ---------------------------------------------------------------------------
# fused layers


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm over last dim {d} got gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if a.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx,
                (g * xhat).sum(axis=lead) if gamma.requires_grad else None,
                g.sum(axis=lead) if beta.requires_grad else None)

    return custom_op(xhat * gd + beta.data, (a, gamma, beta), bw, "layer_norm")


def depthwise_conv2d(a, kernel, padding: int | None = None, channels_last: bool = False) -> Tensor:
    """Per-channel 2D cross-correlation with zero padding.

    ``a`` is ``[..., C, H, W]`` (or ``[..., H, W, C]`` with ``channels_last``),
    ``kernel`` is ``[C, k, k]`` with odd ``k``; the output keeps the spatial size.
    """
    a, kernel = as_tensor(a), as_tensor(kernel)
    if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
        raise DimensionError(f"kernel must be [C, k, k], got {kernel.shape}")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    p = (k - 1) // 2
    if padding is not None and padding != p:
        raise ConfigError(f"padding must be {p} for a shape-preserving {k}x{k} kernel")
    x = np.moveaxis(a.data, -1, -3) if channels_last else a.data
    C, H, W = x.shape[-3:]
    if kernel.shape[0] != C:
        raise DimensionError(f"kernel channels {kernel.shape[0]} != input channels {C}")
    kd = kernel.data
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)])
    out = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            out += kd[:, i, j, None, None] * xp[..., i:i + H, j:j + W]
    lead = tuple(range(x.ndim - 3))

    def bw(g):
        if channels_last:
            g = np.moveaxis(g, -1, -3)
        gxp = np.zeros_like(xp) if a.requires_grad else None
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        for i in range(k):
            for j in range(k):
                if gxp is not None:
                    gxp[..., i:i + H, j:j + W] += kd[:, i, j, None, None] * g
                if gk is not None:
                    gk[:, i, j] = (g * xp[..., i:i + H, j:j + W]).sum(axis=lead + (-2, -1))
        gx = None
        if gxp is not None:
            gx = gxp[..., p:p + H, p:p + W]
            if channels_last:
                gx = np.moveaxis(gx, -3, -1)
            gx = np.ascontiguousarray(gx)
        return gx, gk

    if channels_last:
        out = np.ascontiguousarray(np.moveaxis(out, -3, -1))
    return custom_op(out, (a, kernel), bw, "dwconv2d")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    sm = np.exp(out)
    return custom_op(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return custom_op(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root`` that require gradients, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor with an empty tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None,
                      floor: float = 1e-8) -> float:
    """Worst relative error between autodiff and central-difference gradients.

    ``f`` is a zero-argument closure computing a scalar from ``params`` (which
    are perturbed in place). With ``max_coords`` only that many coordinates,
    drawn with ``rng``, are probed across all parameters. The error is
    ``|a - n| / max(|a|, |n|, floor)``, so gradients smaller than ``floor``
    are compared in absolute terms.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")
    with no_grad():
        base1 = f().item()
        base2 = f().item()
    if base1 != base2:
        raise ContractError("f is not deterministic: two baseline evaluations differ")
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    coords = [(pi, ci) for pi, p in enumerate(params) for ci in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    with no_grad():
        for pi, ci in coords:
            flat = params[pi].data.reshape(-1)
            orig = flat[ci]
            flat[ci] = orig + eps
            fp = f().item()
            flat[ci] = orig - eps
            fm = f().item()
            flat[ci] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = analytic[pi].reshape(-1)[ci]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# CCVT binary format

_MAGIC = b"CCVT"


def save_tensor(path, t) -> None:
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    header = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f8").tobytes())


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise LoadError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    off = 8 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    if len(raw) - off != 8 * n:
        raise LoadError(f"{path}: payload has {len(raw) - off} bytes, expected {8 * n}")
    arr = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64).reshape(dims)
    return Tensor(arr, requires_grad=requires_grad)
