"""Differentiable ops over :class:`Tensor`.

Each op is a forward ``(*arrays, **attrs) -> (value, ctx)`` and a backward
``(ctx, grad_out) -> input grads`` registered under a name, so that
``forward_eval(name, ...)`` and the gradient checker can enumerate them.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, NumericsError, Tensor, forward_eval, register

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ------------------------------------------------------

def _add_fwd(a, b):
    _broadcast_check("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _broadcast_check("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _mul_fwd(a, b):
    _broadcast_check("mul", a, b)
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    _broadcast_check("div", a, b)
    return a / b, (a, b)


def _div_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _neg_fwd(a):
    return -a, None


def _neg_bwd(ctx, g):
    return (-g,)


register("add", _add_fwd, _add_bwd, 2)
register("sub", _sub_fwd, _sub_bwd, 2)
register("mul", _mul_fwd, _mul_bwd, 2)
register("div", _div_fwd, _div_bwd, 2)
register("neg", _neg_fwd, _neg_bwd, 1)


# -- linear algebra ----------------------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return np.matmul(a, b), (a, b)


def _matmul_bwd(ctx, g):
    a, b = ctx
    if b.ndim == 2 and a.ndim > 2:
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _linear_fwd(x, w, b):
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape} do not conform")
    x2 = x.reshape(-1, x.shape[-1])
    y = x2 @ w
    y += b
    return y.reshape(*x.shape[:-1], w.shape[1]), (x2, w, x.shape)


def _linear_bwd(ctx, g):
    x2, w, xshape = ctx
    g2 = g.reshape(-1, g.shape[-1])
    gx = (g2 @ w.T).reshape(xshape)
    gw = x2.T @ g2
    gb = g2.sum(axis=0)
    return gx, gw, gb


register("matmul", _matmul_fwd, _matmul_bwd, 2)
register("linear", _linear_fwd, _linear_bwd, 3)


# -- elementwise unary -------------------------------------------------------

def _exp_fwd(a):
    y = np.exp(a)
    return y, y


def _exp_bwd(y, g):
    return (g * y,)


def _log_fwd(a):
    if np.any(a <= 0):
        raise NumericsError("log: input must be positive")
    return np.log(a), a


def _log_bwd(a, g):
    return (g / a,)


def _tanh_fwd(a):
    y = np.tanh(a)
    return y, y


def _tanh_bwd(y, g):
    return (g * (1.0 - y * y),)


def _gelu_fwd(a):
    # tanh form of GELU; erf is ~30x slower in numpy.  In-place to limit temporaries.
    t = a * a
    t *= 0.044715
    t += 1.0
    t *= a
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= a
    y *= 0.5
    return y, (a, t)


def _gelu_bwd(ctx, g):
    a, t = ctx
    du = a * a
    du *= 3 * 0.044715 * _GELU_C
    du += _GELU_C
    s = t * t
    np.subtract(1.0, s, out=s)
    s *= a
    s *= du
    s += 1.0
    s += t
    s *= 0.5
    s *= g
    return (s,)


register("exp", _exp_fwd, _exp_bwd, 1)
register("log", _log_fwd, _log_bwd, 1)
register("tanh", _tanh_fwd, _tanh_bwd, 1)
register("gelu", _gelu_fwd, _gelu_bwd, 1)


# -- normalizations ----------------------------------------------------------

def _check_axis(op, a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def _softmax_fwd(a, axis=-1):
    _check_axis("softmax", a, axis)
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def _softmax_bwd(ctx, g):
    y, axis = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_fwd(a, axis=-1):
    _check_axis("log_softmax", a, axis)
    z = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    return y, (y, axis)


def _log_softmax_bwd(ctx, g):
    y, axis = ctx
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


def _l2n_fwd(a, axis=-1, eps=1e-12):
    _check_axis("l2_normalize", a, axis)
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a / norm
    return y, (y, norm, axis)


def _l2n_bwd(ctx, g):
    y, norm, axis = ctx
    return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)


def _layer_norm_fwd(x, gamma, beta, eps=1e-6):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gamma.shape} and bias {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def _layer_norm_bwd(ctx, g):
    xhat, rstd, gamma = ctx
    d = xhat.shape[-1]
    lead = tuple(range(g.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gx_hat = g * gamma
    gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
    return gx, ggamma, gbeta


register("softmax", _softmax_fwd, _softmax_bwd, 1)
register("log_softmax", _log_softmax_fwd, _log_softmax_bwd, 1)
register("l2_normalize", _l2n_fwd, _l2n_bwd, 1)
register("layer_norm", _layer_norm_fwd, _layer_norm_bwd, 3)


# -- reductions & shape ------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum_fwd(a, axis=None, keepdims=False):
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, _norm_axis(axis, a.ndim), keepdims)


def _sum_bwd(ctx, g):
    shape, axes, keepdims = ctx
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return a.mean(axis=axis, keepdims=keepdims), (a.shape, axes, keepdims, count)


def _mean_bwd(ctx, g):
    shape, axes, keepdims, count = ctx
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / count, shape).copy(),)


def _reshape_fwd(a, shape=()):
    try:
        y = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return y, a.shape


def _reshape_bwd(shape, g):
    return (g.reshape(shape),)


def _transpose_fwd(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(a_ % a.ndim for a_ in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.transpose(a, axes), axes


def _transpose_bwd(axes, g):
    return (np.transpose(g, np.argsort(axes)),)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _getitem_fwd(a, index=None):
    return a[index], (a.shape, a.dtype, index)


def _getitem_bwd(ctx, g):
    shape, dtype, index = ctx
    out = np.zeros(shape, dtype=g.dtype)
    if _is_basic_index(index):
        out[index] = g
    else:
        np.add.at(out, index, g)
    return (out,)


def _take_fwd(a, indices=None, axis=0):
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError(f"take: indices must be 1-D, got shape {idx.shape}")
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis of length {n}")
    return np.take(a, idx, axis=axis), (a.shape, idx, axis)


def _take_bwd(ctx, g):
    shape, idx, axis = ctx
    out = np.zeros(shape, dtype=g.dtype)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, idx, np.moveaxis(g, axis, 0))
    return (out,)


def _scatter_fwd(u, indices=None, length=0, axis=0):
    idx = np.asarray(indices)
    if idx.ndim != 1 or u.shape[axis] != idx.size:
        raise ShapeError(f"scatter: {idx.size} indices for updates of shape {u.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise ShapeError(f"scatter: index out of range for length {length}")
    shape = list(u.shape)
    shape[axis] = length
    out = np.zeros(shape, dtype=u.dtype)
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(u, axis, 0))
    return out, (idx, axis)


def _scatter_bwd(ctx, g):
    idx, axis = ctx
    return (np.take(g, idx, axis=axis),)


def _concat_fwd(*arrays, axis=0):
    try:
        y = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[a.shape for a in arrays]} do not conform on axis {axis}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return y, (bounds, axis)


def _concat_bwd(ctx, g):
    bounds, axis = ctx
    return tuple(np.split(g, bounds, axis=axis))


def _where_fwd(a, b, cond=None):
    cond = np.asarray(cond, dtype=bool)
    try:
        shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"where: condition {cond.shape} with {a.shape} and {b.shape}") from None
    return np.where(cond, a, b), (cond, a.shape, b.shape, shape)


def _where_bwd(ctx, g):
    cond, sa, sb, shape = ctx
    cond = np.broadcast_to(cond, shape)
    zero = np.zeros((), dtype=g.dtype)
    return _unbroadcast(np.where(cond, g, zero), sa), _unbroadcast(np.where(cond, zero, g), sb)


register("sum", _sum_fwd, _sum_bwd, 1)
register("mean", _mean_fwd, _mean_bwd, 1)
register("reshape", _reshape_fwd, _reshape_bwd, 1)
register("transpose", _transpose_fwd, _transpose_bwd, 1)
register("getitem", _getitem_fwd, _getitem_bwd, 1)
register("take", _take_fwd, _take_bwd, 1)
register("scatter", _scatter_fwd, _scatter_bwd, 1)
register("concat", _concat_fwd, _concat_bwd, None)
register("where", _where_fwd, _where_bwd, 2)


# -- losses and barriers -----------------------------------------------------

def _cross_entropy_fwd(logits, labels=None):
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n == 0:
        raise ShapeError("cross_entropy: no rows")
    if labels.min() < 0 or labels.max() >= c:
        raise NumericsError(f"cross_entropy: label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    return np.asarray(loss, dtype=logits.dtype), (e / s, labels)


def _cross_entropy_bwd(ctx, g):
    p, labels = ctx
    n = p.shape[0]
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (g / n),)


def _stop_gradient_fwd(a):
    return a.copy(), None


register("cross_entropy", _cross_entropy_fwd, _cross_entropy_bwd, 1)
register("stop_gradient", _stop_gradient_fwd, None, 1, differentiable=False)


# -- functional front-ends ---------------------------------------------------

def add(a, b) -> Tensor:
    return forward_eval("add", (a, b))


def mul(a, b) -> Tensor:
    return forward_eval("mul", (a, b))


def matmul(a, b) -> Tensor:
    return forward_eval("matmul", (a, b))


def linear(x, w, b) -> Tensor:
    return forward_eval("linear", (x, w, b))


def exp(x) -> Tensor:
    return forward_eval("exp", (x,))


def log(x) -> Tensor:
    return forward_eval("log", (x,))


def tanh(x) -> Tensor:
    return forward_eval("tanh", (x,))


def gelu(x) -> Tensor:
    return forward_eval("gelu", (x,))


def softmax(x, axis: int = -1) -> Tensor:
    return forward_eval("softmax", (x,), axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return forward_eval("log_softmax", (x,), axis=axis)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return forward_eval("l2_normalize", (x,), axis=axis, eps=eps)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    return forward_eval("layer_norm", (x, gamma, beta), eps=eps)


def reshape(x, shape) -> Tensor:
    return forward_eval("reshape", (x,), shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return forward_eval("transpose", (x,), axes=axes)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return forward_eval("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return forward_eval("mean", (x,), axis=axis, keepdims=keepdims)


def take(x, indices, axis: int = 0) -> Tensor:
    return forward_eval("take", (x,), indices=np.asarray(indices), axis=axis)


def scatter(updates, indices, length: int, axis: int = 0) -> Tensor:
    return forward_eval("scatter", (updates,), indices=np.asarray(indices), length=length, axis=axis)


def concat(tensors, axis: int = 0) -> Tensor:
    return forward_eval("concat", tuple(tensors), axis=axis)


def where(cond, a, b) -> Tensor:
    return forward_eval("where", (a, b), cond=cond)


def cross_entropy(logits, labels) -> Tensor:
    return forward_eval("cross_entropy", (logits,), labels=np.asarray(labels))


def stop_gradient(x) -> Tensor:
    return forward_eval("stop_gradient", (x,))
