"""The primitive catalog.

Every primitive is a pair ``forward(*arrays, **attrs) -> (out, ctx)`` and
``backward(ctx, grad_out, needs, **attrs) -> grads``. Forward rules preserve
the floating dtype of their operands, so the same graph runs in float32 for
training and in float64 for finite-difference checks.

Layouts: images and feature maps are NCHW, token sequences are (N, L, D).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, apply, primitive


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _cast(x, like):
    return np.asarray(x, dtype=like.dtype) if x.dtype != like.dtype else x


# --------------------------------------------------------------------------
# elementwise arithmetic


def _add_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None)


@primitive("add", _add_bwd)
def _add(a, b):
    _check_broadcast("add", a, b)
    return a + _cast(b, a), (a.shape, b.shape)


def _sub_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None)


@primitive("sub", _sub_bwd)
def _sub(a, b):
    _check_broadcast("sub", a, b)
    return a - _cast(b, a), (a.shape, b.shape)


def _mul_bwd(ctx, g, needs):
    a, b = ctx
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


@primitive("mul", _mul_bwd)
def _mul(a, b):
    _check_broadcast("mul", a, b)
    b = _cast(b, a)
    return a * b, (a, b)


def _scale_bwd(ctx, g, needs, factor):
    return (g * np.asarray(factor, dtype=g.dtype),)


@primitive("scale", _scale_bwd)
def _scale(a, factor):
    return a * np.asarray(factor, dtype=a.dtype), None


# --------------------------------------------------------------------------
# activations


def _sigmoid(x):
    # stable in both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def _silu_bwd(ctx, g, needs):
    x, s = ctx
    return (g * (s * (1 + x * (1 - s))),)


@primitive("silu", _silu_bwd)
def _silu(x):
    s = _sigmoid(x)
    return x * s, (x, s)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_bwd(ctx, g, needs):
    x, th = ctx
    c = x.dtype.type(_GELU_C)
    dinner = c * (1 + 3 * x.dtype.type(0.044715) * x * x)
    d = 0.5 * (1 + th) + 0.5 * x * (1 - th * th) * dinner
    return (g * d,)


@primitive("gelu", _gelu_bwd)
def _gelu(x):
    # tanh approximation
    c = x.dtype.type(_GELU_C)
    th = np.tanh(c * (x + x.dtype.type(0.044715) * (x * x * x)))
    return 0.5 * x * (1 + th), (x, th)


def _tanh_bwd(ctx, g, needs):
    (y,) = ctx
    return (g * (1 - y * y),)


@primitive("tanh", _tanh_bwd)
def _tanh(x):
    y = np.tanh(x)
    return y, (y,)


def _log_sigmoid_bwd(ctx, g, needs):
    (x,) = ctx
    return (g * _sigmoid(-x),)


@primitive("log_sigmoid", _log_sigmoid_bwd)
def _log_sigmoid(x):
    out = -(np.log1p(np.exp(-np.abs(x))) + np.maximum(-x, 0))
    return out.astype(x.dtype), (x,)


def _softmax_bwd(ctx, g, needs, axis=-1):
    (y,) = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@primitive("softmax", _softmax_bwd)
def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y,)


# --------------------------------------------------------------------------
# reductions


def _mse_bwd(ctx, g, needs, per_sample=False):
    d, n = ctx
    if per_sample:
        g = g.reshape((-1,) + (1,) * (d.ndim - 1))
    gd = g * (2.0 / n) * d
    gd = gd.astype(d.dtype)
    return (gd if needs[0] else None, -gd if needs[1] else None)


@primitive("mse", _mse_bwd)
def _mse(a, b, per_sample=False):
    if a.shape != b.shape:
        raise ShapeError(f"mse: operand shapes differ, {a.shape} vs {b.shape}")
    d = a - _cast(b, a)
    if per_sample:
        n = d[0].size
        return (d * d).reshape(d.shape[0], -1).mean(axis=1), (d, n)
    return np.asarray((d * d).mean(), dtype=d.dtype), (d, d.size)


def _mean_bwd(ctx, g, needs):
    shape = ctx
    n = int(np.prod(shape))
    return (np.full(shape, g.reshape(()) / n, dtype=g.dtype),)


@primitive("mean", _mean_bwd)
def _mean(x):
    return np.asarray(x.mean(), dtype=x.dtype), x.shape


# --------------------------------------------------------------------------
# dense / embedding / structural


def _dense_bwd(ctx, g, needs):
    x, w = ctx
    gx = g @ w.T if needs[0] else None
    g2 = g.reshape(-1, g.shape[-1])
    gw = x.reshape(-1, x.shape[-1]).T @ g2 if needs[1] else None
    gb = g2.sum(axis=0) if needs[2] else None
    return gx, gw, gb


@primitive("dense", _dense_bwd)
def _dense(x, w, b):
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w + b, (x, w)


def _embedding_bwd(ctx, g, needs, ids):
    shape = ctx
    gt = np.zeros(shape, dtype=g.dtype)
    np.add.at(gt, np.asarray(ids), g)
    return (gt,)


@primitive("embedding", _embedding_bwd)
def _embedding(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    return table[ids], table.shape


def _reshape_bwd(ctx, g, needs, shape):
    return (g.reshape(ctx),)


@primitive("reshape", _reshape_bwd)
def _reshape(x, shape):
    try:
        return x.reshape(shape), x.shape
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None


def _concat_bwd(ctx, g, needs, axis=0):
    splits = np.cumsum(ctx)[:-1]
    parts = np.split(g, splits, axis=axis)
    return tuple(p if n else None for p, n in zip(parts, needs))


@primitive("concat", _concat_bwd)
def _concat(*xs, axis=0):
    try:
        out = np.concatenate([_cast(x, xs[0]) for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    return out, [x.shape[axis] for x in xs]


def _patchify_np(x, p):
    n, c, h, w = x.shape
    x = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // p) * (w // p), c * p * p)


def _unpatchify_np(x, p, c, h, w):
    n = x.shape[0]
    x = x.reshape(n, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(n, c, h, w)


def _patchify_bwd(ctx, g, needs, patch):
    c, h, w = ctx
    return (_unpatchify_np(g, patch, c, h, w),)


@primitive("patchify", _patchify_bwd)
def _patchify(x, patch):
    if x.ndim != 4 or x.shape[2] % patch or x.shape[3] % patch:
        raise ShapeError(f"patchify: {x.shape} not divisible into {patch}x{patch} patches")
    return _patchify_np(x, patch), x.shape[1:]


def _unpatchify_bwd(ctx, g, needs, patch, channels, height, width):
    return (_patchify_np(g, patch),)


@primitive("unpatchify", _unpatchify_bwd)
def _unpatchify(x, patch, channels, height, width):
    expect = ((height // patch) * (width // patch), channels * patch * patch)
    if x.ndim != 3 or x.shape[1:] != expect:
        raise ShapeError(f"unpatchify: got {x.shape}, expected (N, {expect[0]}, {expect[1]})")
    return _unpatchify_np(x, patch, channels, height, width), None


# --------------------------------------------------------------------------
# convolutions (im2col / col2im)


def _im2col(xp, k, stride, ho, wo):
    # xp: padded (N, C, Hp, Wp) -> (N*Ho*Wo, C*k*k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols, shape_p, k, stride, ho, wo):
    # inverse scatter of _im2col into a padded buffer of shape_p
    n, c = shape_p[:2]
    out = np.zeros(shape_p, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_bwd(ctx, g, needs, stride=1, padding=0):
    cols, w, xshape = ctx
    n, o, ho, wo = g.shape
    k = w.shape[-1]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gx = gw = gb = None
    if needs[0]:
        gcols = gm @ w.reshape(o, -1)
        hp, wp = xshape[2] + 2 * padding, xshape[3] + 2 * padding
        gxp = _col2im(gcols, (n, xshape[1], hp, wp), k, stride, ho, wo)
        gx = gxp[:, :, padding:padding + xshape[2], padding:padding + xshape[3]]
    if needs[1]:
        gw = (gm.T @ cols).reshape(w.shape)
    if needs[2]:
        gb = gm.sum(axis=0)
    return gx, gw, gb


@primitive("conv2d", _conv_bwd)
def _conv2d(x, w, b, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}, b {b.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    k = w.shape[-1]
    n, _, h, wd = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.shape}")
    cols = _im2col(_pad(x, padding), k, stride, ho, wo)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, w, x.shape)


def _convt_bwd(ctx, g, needs, stride=2, padding=0):
    xm, w, xshape = ctx
    n, cin, h, wd = xshape
    cout, k = w.shape[1], w.shape[-1]
    gcols = _im2col(_pad(g, padding), k, stride, h, wd)  # (N*H*W, Cout*k*k)
    gx = gw = gb = None
    if needs[0]:
        gx = (gcols @ w.reshape(cin, -1).T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        gx = np.ascontiguousarray(gx)
    if needs[1]:
        gw = (xm.T @ gcols).reshape(w.shape)
    if needs[2]:
        gb = g.sum(axis=(0, 2, 3))
    return gx, gw, gb


@primitive("conv_transpose2d", _convt_bwd)
def _conv_transpose2d(x, w, b, stride=2, padding=0):
    # w: (C_in, C_out, k, k), matching the adjoint of conv2d
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"conv_transpose2d: x {x.shape}, w {w.shape}, b {b.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv_transpose2d: stride must be 1 or 2, got {stride}")
    n, cin, h, wd = x.shape
    cout, k = w.shape[1], w.shape[-1]
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wd - 1) * stride - 2 * padding + k
    xm = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = xm @ w.reshape(cin, -1)
    outp = _col2im(cols, (n, cout, ho + 2 * padding, wo + 2 * padding), k, stride, h, wd)
    out = outp[:, :, padding:padding + ho, padding:padding + wo] + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out), (xm, w, x.shape)


# --------------------------------------------------------------------------
# normalization


def _norm_bwd_core(xhat, inv, gxhat, axes):
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return inv * (gxhat - m1 - xhat * m2)


def _group_norm_bwd(ctx, g, needs, groups, eps=1e-5):
    xhat, inv, gamma, shape = ctx
    n, c = shape[:2]
    gg = g.reshape(n, groups, c // groups, -1)
    gam = gamma.reshape(1, groups, c // groups, 1)
    gx = ggam = gbeta = None
    if needs[0]:
        gx = _norm_bwd_core(xhat, inv, gg * gam, (2, 3)).reshape(shape)
    if needs[1]:
        ggam = (gg * xhat).sum(axis=(0, 3)).reshape(c)
    if needs[2]:
        gbeta = gg.sum(axis=(0, 3)).reshape(c)
    return gx, ggam, gbeta


@primitive("group_norm", _group_norm_bwd)
def _group_norm(x, gamma, beta, groups, eps=1e-5):
    if x.ndim != 4 or x.shape[1] % groups or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError(f"group_norm: x {x.shape}, groups {groups}, gamma {gamma.shape}")
    n, c = x.shape[:2]
    xg = x.reshape(n, groups, c // groups, -1)
    mu = xg.mean(axis=(2, 3), keepdims=True)
    var = xg.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xg - mu) * inv
    y = xhat * gamma.reshape(1, groups, c // groups, 1) + beta.reshape(1, groups, c // groups, 1)
    return y.reshape(x.shape), (xhat, inv, gamma, x.shape)


def _layer_norm_bwd(ctx, g, needs, eps=1e-5):
    xhat, inv, gamma = ctx
    gx = ggam = gbeta = None
    if needs[0]:
        gx = _norm_bwd_core(xhat, inv, g * gamma, -1)
    red = tuple(range(g.ndim - 1))
    if needs[1]:
        ggam = (g * xhat).sum(axis=red)
    if needs[2]:
        gbeta = g.sum(axis=red)
    return gx, ggam, gbeta


@primitive("layer_norm", _layer_norm_bwd)
def _layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


# --------------------------------------------------------------------------
# attention


def _attention_bwd(ctx, g, needs, heads):
    q, k, v, a, scale = ctx
    n, h, l, dh = q.shape
    go = g.reshape(n, l, h, dh).transpose(0, 2, 1, 3)
    ga = go @ v.transpose(0, 1, 3, 2)
    gv = a.transpose(0, 1, 3, 2) @ go
    gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
    gq = gs @ k
    gk = gs.transpose(0, 1, 3, 2) @ q
    out = np.concatenate([t.transpose(0, 2, 1, 3).reshape(n, l, h * dh) for t in (gq, gk, gv)], axis=-1)
    return (out,)


@primitive("attention", _attention_bwd)
def _attention(qkv, heads):
    """Bidirectional multi-head self-attention core: (N, L, 3D) -> (N, L, D)."""
    if qkv.ndim != 3 or qkv.shape[-1] % (3 * heads):
        raise ShapeError(f"attention: qkv {qkv.shape} not splittable into 3 x {heads} heads")
    n, l, d3 = qkv.shape
    d = d3 // 3
    dh = d // heads
    parts = qkv.reshape(n, l, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = parts[0], parts[1], parts[2]
    scale = qkv.dtype.type(1.0 / math.sqrt(dh))
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    a = e / e.sum(axis=-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(n, l, d)
    return o, (q, k, v, a, scale)


# --------------------------------------------------------------------------
# public functional surface


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def scale(a, factor: float):
    return apply("scale", a, factor=float(factor))


def silu(x):
    return apply("silu", x)


def gelu(x):
    return apply("gelu", x)


def tanh(x):
    return apply("tanh", x)


def log_sigmoid(x):
    return apply("log_sigmoid", x)


def softmax(x, axis: int = -1):
    return apply("softmax", x, axis=axis)


def mse(a, b, per_sample: bool = False):
    """Mean squared error; ``per_sample`` keeps the leading (batch) axis."""
    return apply("mse", a, b, per_sample=per_sample)


def mean(x):
    return apply("mean", x)


def dense(x, w, b):
    return apply("dense", x, w, b)


def embedding(table, ids):
    return apply("embedding", table, ids=np.asarray(ids, dtype=np.int64))


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def concat(xs, axis: int = 0):
    return apply("concat", *xs, axis=axis)


def patchify(x, patch: int):
    return apply("patchify", x, patch=patch)


def unpatchify(x, patch: int, channels: int, height: int, width: int):
    return apply("unpatchify", x, patch=patch, channels=channels, height=height, width=width)


def conv2d(x, w, b, stride: int = 1, padding: int = 0):
    return apply("conv2d", x, w, b, stride=stride, padding=padding)


def conv_transpose2d(x, w, b, stride: int = 2, padding: int = 0):
    return apply("conv_transpose2d", x, w, b, stride=stride, padding=padding)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5):
    return apply("group_norm", x, gamma, beta, groups=groups, eps=eps)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    return apply("layer_norm", x, gamma, beta, eps=eps)


def attention(qkv, heads: int):
    return apply("attention", qkv, heads=heads)
