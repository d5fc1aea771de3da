"""Dense tensors with tape-based reverse-mode differentiation.

Every op records its parents and a backward closure on the output tensor; the
recorded graph is the tape. ``Tensor.backward`` walks it in reverse
topological order. Arrays are numpy, row-major, float32 by default and
float64 under :func:`precision`.

Spatial ops take ``(C, H, W)`` or batched ``(N, C, H, W)`` input.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import einops
import numpy as np


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype():
    return _get("dtype", np.float32)


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``np.float64`` for gradient checks)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def is_grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    old = _get("check_finite", True)
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._retain = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_shape("item() needs one element")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None) -> None:
        backward(self, grad=grad)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _raise_shape(msg):
    raise ShapeError(msg)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _get("check_finite", True) and not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._retain = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, grad=None, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params``, when given, are guaranteed a gradient afterwards (zeros when the
    loss does not depend on them).
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def broadcast_mul(m, t) -> Tensor:
    """Multiply a ``1xHxW`` spatial map or ``Cx1x1`` channel map into ``t``."""
    m, t = as_tensor(m), as_tensor(t)
    if m.ndim != t.ndim:
        raise ShapeError(f"broadcast_mul rank mismatch {m.shape} vs {t.shape}")
    lead = m.ndim - 3
    ms, ts = m.shape[lead:], t.shape[lead:]
    spatial = ms[0] == 1 and ms[1:] == ts[1:]
    channel = ms[1:] == (1, 1) and ms[0] == ts[0]
    if not (spatial or channel) or m.shape[:lead] != t.shape[:lead]:
        raise ShapeError(f"incompatible broadcast {m.shape} into {t.shape}")
    return mul(m, t)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softplus(x) -> Tensor:
    """log(1 + exp(x)) in the overflow-free form max(x, 0) + log1p(exp(-|x|))."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    return _make(out.astype(x.dtype), (x,), lambda g: (g * sigmoid(Tensor(x.data)).data,), "softplus")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def cosine_similarity(u, v, eps: float = 1e-8) -> Tensor:
    """u.v / (|u||v| + eps) along the last axis; two zero vectors give 0."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity shape mismatch {u.shape} vs {v.shape}")
    nu = np.sqrt((u.data * u.data).sum(-1, keepdims=True))
    nv = np.sqrt((v.data * v.data).sum(-1, keepdims=True))
    dot = (u.data * v.data).sum(-1, keepdims=True)
    den = nu * nv + eps
    out = dot / den

    def bw(g):
        g = g[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            uhat = np.where(nu > 0, u.data / nu, 0.0)
            vhat = np.where(nv > 0, v.data / nv, 0.0)
        gu = g * (v.data / den - dot * nv * uhat / den**2)
        gv = g * (u.data / den - dot * nu * vhat / den**2)
        return gu, gv

    return _make(out[..., 0], (u, v), bw, "cosine_similarity")


def l2norm(x, axis) -> Tensor:
    """Euclidean norm over ``axis`` (kept); zero-norm entries get zero gradient."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g * x.data / out, 0.0).astype(x.dtype),)

    return _make(out, (x,), bw, "l2norm")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axes, keepdims), 1.0 / n)


def amax(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties send the gradient to the first index."""
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis)
        return (gx,)

    return _make(out if keepdims else out.squeeze(axis), (x,), bw, "amax")


# ---------------------------------------------------------------- structure


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat shape mismatch {t.shape} vs {ref} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def chunk(x, n: int, axis: int = 0) -> list[Tensor]:
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] % n:
        raise ShapeError(f"cannot chunk extent {x.shape[axis]} into {n} parts")
    step = x.shape[axis] // n
    outs = []
    for i in range(n):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        sl = tuple(sl)

        def bw(g, sl=sl):
            gx = np.zeros_like(x.data)
            gx[sl] = g
            return (gx,)

        outs.append(_make(np.ascontiguousarray(x.data[sl]), (x,), bw, "chunk"))
    return outs


def channel_shuffle(x, groups: int) -> Tensor:
    """Interleave ``groups`` contiguous channel blocks: [a1 a2 b1 b2] -> [a1 b1 a2 b2]."""
    x = as_tensor(x)
    batched = x.ndim == 4
    c = x.shape[-3]
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} shuffle groups")
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    y = reshape(x, lead + (groups, c // groups, h, w))
    perm = (0, 2, 1, 3, 4) if batched else (1, 0, 2, 3)
    return reshape(transpose(y, perm), x.shape)


def _parse_side(side: str) -> list[list[str]]:
    groups, cur, depth = [], None, 0
    for tok in side.replace("(", " ( ").replace(")", " ) ").split():
        if tok == "(":
            cur, depth = [], 1
        elif tok == ")":
            groups.append(cur)
            cur, depth = None, 0
        elif depth:
            cur.append(tok)
        else:
            groups.append([tok])
    return groups


def rearrange(x, pattern: str, **sizes) -> Tensor:
    """einops-style axis rearrangement; backward applies the reversed pattern."""
    x = as_tensor(x)
    lhs, rhs = (s.strip() for s in pattern.split("->"))
    groups = _parse_side(lhs)
    if len(groups) != x.ndim:
        raise ShapeError(f"pattern '{lhs}' does not match rank {x.ndim}")
    known = dict(sizes)
    for grp, n in zip(groups, x.shape):
        unknown = [a for a in grp if a not in known]
        prod = int(np.prod([known[a] for a in grp if a in known])) if len(grp) > len(unknown) else 1
        if len(unknown) > 1:
            raise ShapeError(f"ambiguous axis group {grp}")
        if unknown:
            if n % prod:
                raise ShapeError(f"extent {n} not divisible by {prod}")
            known[unknown[0]] = n // prod
        elif prod != n:
            raise ShapeError(f"group {grp} expects {prod}, got {n}")
    out = einops.rearrange(x.data, pattern, **sizes)
    return _make(np.ascontiguousarray(out), (x,),
                 lambda g: (np.ascontiguousarray(einops.rearrange(g, f"{rhs} -> {lhs}", **known)),), "rearrange")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    with np.errstate(invalid="ignore", over="ignore"):
        out = a.data @ b.data
    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- spatial


def _batched(fn):
    """Lift a 4-D spatial op so it also accepts a single ``(C, H, W)`` map."""

    def wrapper(x, *args, **kwargs):
        x = as_tensor(x)
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ShapeError(f"{fn.__name__} expects CxHxW or NxCxHxW, got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _out_extent(n, k, stride, pad, what):
    if pad < 0:
        raise ShapeError("padding must be >= 0")
    if k > n + 2 * pad:
        raise ShapeError(f"{what} window {k} larger than padded extent {n + 2 * pad}")
    return (n + 2 * pad - k) // stride + 1


@_batched
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation; weight is ``(C_out, C_in/groups, k, k)``."""
    weight = as_tensor(weight)
    n, c, h, w = x.shape
    co, cg, kh, kw = weight.shape
    if c % groups or co % groups or cg * groups != c:
        raise ShapeError(f"conv2d channels {c} -> {co} incompatible with groups={groups} and kernel {weight.shape}")
    ho = _out_extent(h, kh, stride, padding, "conv")
    wo = _out_extent(w, kw, stride, padding, "conv")
    og = co // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: (groups, N*ho*wo, cg*kh*kw)
    cols = win.reshape(n, groups, cg, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * ho * wo, cg * kh * kw)
    wmat = weight.data.reshape(groups, og, cg * kh * kw).transpose(0, 2, 1)
    out = (cols @ wmat).reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, co, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, co, 1, 1)
        parents.append(bias)

    def bw(g):
        gm = g.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)
        gw = (cols.transpose(0, 2, 1) @ gm).transpose(0, 2, 1).reshape(weight.shape)
        gcols = (gm @ wmat.transpose(0, 2, 1)).reshape(groups, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
        gcols = gcols.reshape(n, c, ho, wo, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(np.ascontiguousarray(out, dtype=x.dtype), parents, bw, "conv2d")


def _windows(x, k, stride, pad, fill):
    n, c, h, w = x.shape
    ho = _out_extent(h, k, stride, pad, "pool")
    wo = _out_extent(w, k, stride, pad, "pool")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return xp, win.reshape(n, c, ho, wo, k * k), ho, wo


@_batched
def max_pool2d(x, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling with -inf padding; ties go to the first row-major index."""
    if window < 1:
        raise ShapeError("window must be >= 1")
    stride = stride or window
    xp, win, ho, wo = _windows(x, window, stride, padding, -np.inf)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], -1)[..., 0]
    h, w = x.shape[2:]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == idx)
        return (np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w]),)

    return _make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


@_batched
def avg_pool2d(x, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the window."""
    if window < 1:
        raise ShapeError("window must be >= 1")
    stride = stride or window
    xp, win, ho, wo = _windows(x, window, stride, padding, 0.0)
    out = win.mean(axis=-1)
    h, w = x.shape[2:]
    scale = 1.0 / (window * window)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(window):
            for j in range(window):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * scale
        return (np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w]),)

    return _make(np.ascontiguousarray(out, dtype=x.dtype), (x,), bw, "avg_pool2d")


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-1] * x.shape[-2] == 0:
        raise ShapeError(f"global_avg_pool needs a non-empty spatial extent, got {x.shape}")
    return mean(x, axis=(-2, -1), keepdims=True)


def global_max_pool(x) -> Tensor:
    x = as_tensor(x)
    flat = reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
    return reshape(amax(flat, axis=-1, keepdims=True), x.shape[:-2] + (1, 1))


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the align_corners=False bilinear weights of output i."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (align_corners=False); works both ways."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1 or x.ndim < 2:
        raise ShapeError(f"bad resize target {out_h}x{out_w} for {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = _interp_matrix(h, out_h, x.dtype)
    rx = _interp_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,), "bilinear_upsample")


resize = bilinear_upsample
