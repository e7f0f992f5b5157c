"""Op catalog. Each op is a forward rule plus its vector-Jacobian product.

Forward rules receive raw arrays and return ``(out, saved)``; vjp rules receive the
upstream gradient, the saved payload and the op attributes, and return one gradient
(or ``None``) per input. Binary elementwise ops broadcast like numpy.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, apply, register_op

SOFTPLUS_THRESHOLD = 20.0


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _defop(name, fwd, vjp=None, **kw):
    opdef = register_op(name, fwd, vjp, **kw)

    def call(*inputs, **attrs) -> Tensor:
        return apply(opdef, inputs, attrs)

    call.__name__ = name
    call.opdef = opdef
    return call


# -- elementwise binary --------------------------------------------------------

def _add_fwd(a, b):
    return a + b, (a.shape, b.shape)


def _add_vjp(g, saved):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    return a - b, (a.shape, b.shape)


def _sub_vjp(g, saved):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _mul_fwd(a, b):
    return a * b, (a, b)


def _mul_vjp(g, saved):
    a, b = saved
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    out = a / b
    return out, (b, out, a.shape)


def _div_vjp(g, saved):
    b, out, sa = saved
    gb = -g * out / b
    return _unbroadcast(g / b, sa), _unbroadcast(gb, b.shape)


add = _defop("add", _add_fwd, _add_vjp)
sub = _defop("sub", _sub_fwd, _sub_vjp)
mul = _defop("mul", _mul_fwd, _mul_vjp)
div = _defop("div", _div_fwd, _div_vjp)


def _scale_fwd(x, *, c):
    return x * c, None


def _scale_vjp(g, saved, *, c):
    return (g * c,)


_scale = _defop("scale", _scale_fwd, _scale_vjp)


def scale(x, c: float) -> Tensor:
    return _scale(x, c=float(c))


# -- linear algebra ------------------------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _matmul_vjp(g, saved):
    a, b = saved
    return g @ b.T, a.T @ g


matmul = _defop("matmul", _matmul_fwd, _matmul_vjp)


def _parse_einsum(spec: str) -> tuple[str, str, str]:
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for sub_a, other in ((sa, sb), (sb, sa)):
        for ch in sub_a:
            if ch not in out and ch not in other:
                raise ValueError(f"einsum {spec!r}: index {ch!r} is summed in one operand only")
    return sa, sb, out


def _einsum_fwd(a, b, *, spec):
    sa, sb, so = _parse_einsum(spec)
    return np.einsum(f"{sa},{sb}->{so}", a, b, optimize=True), (a, b)


def _einsum_vjp(g, saved, *, spec):
    a, b = saved
    sa, sb, so = _parse_einsum(spec)
    ga = np.einsum(f"{so},{sb}->{sa}", g, b, optimize=True)
    gb = np.einsum(f"{so},{sa}->{sb}", g, a, optimize=True)
    return ga, gb


_einsum = _defop("einsum", _einsum_fwd, _einsum_vjp)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every operand index must survive into the output or the other operand."""
    return _einsum(a, b, spec=spec)


# -- reductions and shape ops --------------------------------------------------

def _sum_fwd(x, *, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims), x.shape


def _sum_vjp(g, shape, *, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(x, *, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims), x.shape


def _mean_vjp(g, shape, *, axis=None, keepdims=False):
    axes = range(len(shape)) if axis is None else np.atleast_1d(axis)
    n = int(np.prod([shape[a] for a in axes]))
    (gx,) = _sum_vjp(g, shape, axis=axis, keepdims=keepdims)
    return (gx / n,)


_sum = _defop("sum", _sum_fwd, _sum_vjp)
_mean = _defop("mean", _mean_fwd, _mean_vjp)


def _norm_axis(axis):
    return tuple(axis) if isinstance(axis, list) else axis


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return _sum(x, axis=_norm_axis(axis), keepdims=keepdims)


def mean(x, axis=None, keepdims=False) -> Tensor:
    return _mean(x, axis=_norm_axis(axis), keepdims=keepdims)


def _reshape_fwd(x, *, shape):
    return x.reshape(shape), x.shape


def _reshape_vjp(g, in_shape, *, shape):
    return (g.reshape(in_shape),)


_reshape = _defop("reshape", _reshape_fwd, _reshape_vjp)


def reshape(x, shape) -> Tensor:
    return _reshape(x, shape=tuple(shape))


def _transpose_fwd(x, *, axes=None):
    return np.transpose(x, axes), None


def _transpose_vjp(g, saved, *, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


_transpose = _defop("transpose", _transpose_fwd, _transpose_vjp)


def transpose(x, axes=None) -> Tensor:
    return _transpose(x, axes=None if axes is None else tuple(axes))


def _cumsum_fwd(x, *, axis):
    return np.cumsum(x, axis=axis), None


def _cumsum_vjp(g, saved, *, axis):
    return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)


_cumsum = _defop("cumsum", _cumsum_fwd, _cumsum_vjp)


def cumsum(x, axis: int) -> Tensor:
    return _cumsum(x, axis=axis)


def _take_fwd(x, *, index, axis):
    return np.take(x, index, axis=axis), x.shape


def _take_vjp(g, shape, *, index, axis):
    gx = np.zeros(shape, dtype=g.dtype)
    moved = np.moveaxis(gx, axis, 0)
    np.add.at(moved, index, np.moveaxis(g, axis, 0))
    return (gx,)


_take = _defop("take", _take_fwd, _take_vjp)


def take(x, index, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("take expects a 1-D index")
    return _take(x, index=index, axis=axis)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]


def _concat_vjp(g, sizes, *, axis):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


_concat = _defop("concat", _concat_fwd, _concat_vjp)


def concat(xs, axis: int = 0) -> Tensor:
    return _concat(*xs, axis=axis)


# -- nonlinearities ------------------------------------------------------------

def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x):
    out = np.where(x > SOFTPLUS_THRESHOLD, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, SOFTPLUS_THRESHOLD))))
    # exp underflows to 0 below about -745; keep the output strictly positive
    return np.maximum(out, np.finfo(x.dtype).tiny)


def _softplus_fwd(x):
    return _softplus_np(x), x


def _softplus_vjp(g, x):
    return (g * _sigmoid_np(x),)


softplus = _defop("softplus", _softplus_fwd, _softplus_vjp)


def _sigmoid_fwd(x):
    out = _sigmoid_np(x)
    return out, out


def _sigmoid_vjp(g, out):
    return (g * out * (1.0 - out),)


sigmoid = _defop("sigmoid", _sigmoid_fwd, _sigmoid_vjp)


def _relu_fwd(x):
    return np.maximum(x, 0.0), x > 0


def _relu_vjp(g, pos):
    return (g * pos,)


relu = _defop("relu", _relu_fwd, _relu_vjp)


def _exp_fwd(x):
    with np.errstate(over="ignore"):   # overflow is reported by the finite check instead
        out = np.exp(x)
    return out, out


exp = _defop("exp", _exp_fwd, lambda g, out: (g * out,))


def _softmax_fwd(x, *, mask=None):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=-1, keepdims=True)
    return out, out


def _softmax_vjp(g, out, *, mask=None):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


_softmax = _defop("softmax", _softmax_fwd, _softmax_vjp)


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, broadcastable) marks allowed entries."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax mask leaves a row with no allowed entries")
    return _softmax(x, mask=mask)


def _layer_norm_fwd(x, gamma, beta, *, eps):
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty channel axis")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine params must have shape ({x.shape[-1]},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def _layer_norm_vjp(g, saved, *, eps):
    xhat, rstd, gamma = saved
    lead = tuple(range(g.ndim - 1))
    dgamma = np.sum(g * xhat, axis=lead)
    dbeta = np.sum(g, axis=lead)
    gh = g * gamma
    dx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
    return dx, dgamma, dbeta


_layer_norm = _defop("layer_norm", _layer_norm_fwd, _layer_norm_vjp)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then ``* gamma + beta``. Omitted affine means identity."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    c = x.shape[-1]
    if gamma is None:
        gamma = Tensor(np.ones(c, dtype=x.dtype))
    if beta is None:
        beta = Tensor(np.zeros(c, dtype=x.dtype))
    return _layer_norm(x, gamma, beta, eps=eps)


def _mean_square_fwd(x):
    return np.asarray(np.mean(x * x)), x


def _mean_square_vjp(g, x):
    return (g * 2.0 * x / x.size,)


mean_square = _defop("mean_square", _mean_square_fwd, _mean_square_vjp)


# -- depthwise 3-D convolution ---------------------------------------------------

def _conv_pads(kernel: tuple[int, int, int], temporal: str):
    kt, kh, kw = kernel
    if temporal == "causal":
        pt = (kt - 1, 0)
    elif temporal == "same":
        pt = ((kt - 1) // 2, kt // 2)
    elif temporal == "valid":
        pt = (0, 0)
    else:
        raise ValueError(f"unknown temporal padding {temporal!r}")
    return pt, ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)


def _dwconv_fwd(x, w, *, temporal="causal"):
    if x.ndim != 4 or w.ndim != 4 or w.shape[3] != x.shape[3]:
        raise ShapeError(f"depthwise_conv3d expects x[T,H,W,C], w[kt,kh,kw,C]; got {x.shape}, {w.shape}")
    kt, kh, kw, _ = w.shape
    pads = _conv_pads((kt, kh, kw), temporal)
    xp = np.pad(x, (*pads, (0, 0)))
    T = xp.shape[0] - kt + 1
    H = xp.shape[1] - kh + 1
    W = xp.shape[2] - kw + 1
    if T < 1 or H < 1 or W < 1:
        raise ShapeError(f"kernel {w.shape[:3]} larger than padded extent {xp.shape[:3]}")
    out = np.zeros((T, H, W, x.shape[3]), dtype=np.result_type(x, w))
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                out += xp[a:a + T, b:b + H, c:c + W] * w[a, b, c]
    return out, (xp, w, pads)


def _dwconv_vjp(g, saved, *, temporal="causal"):
    xp, w, pads = saved
    kt, kh, kw, _ = w.shape
    T, H, W, _ = g.shape
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                win = xp[a:a + T, b:b + H, c:c + W]
                gw[a, b, c] = np.sum(g * win, axis=(0, 1, 2))
                gxp[a:a + T, b:b + H, c:c + W] += g * w[a, b, c]
    (t0, t1), (h0, h1), (w0, w1) = pads
    gx = gxp[t0:gxp.shape[0] - t1, h0:gxp.shape[1] - h1, w0:gxp.shape[2] - w1]
    return gx, gw


_dwconv = _defop("depthwise_conv3d", _dwconv_fwd, _dwconv_vjp)


def depthwise_conv3d(x, w, temporal: str = "causal") -> Tensor:
    """Per-channel 3-D convolution over ``x[T,H,W,C]`` with ``w[kt,kh,kw,C]``.

    Spatial axes use same-padding. ``temporal`` is ``"causal"`` (left pad kt-1),
    ``"same"`` or ``"valid"`` (no temporal padding; used with a ring buffer of past frames).
    """
    return _dwconv(x, w, temporal=temporal)


# -- rotations ------------------------------------------------------------------

def _rotate_pairs_fwd(x, *, cos, sin):
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out, None


def _rotate_pairs_vjp(g, saved, *, cos, sin):
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = np.empty_like(g)
    gx[..., 0::2] = ge * cos + go * sin
    gx[..., 1::2] = -ge * sin + go * cos
    return (gx,)


_rotate_pairs = _defop("rotate_pairs", _rotate_pairs_fwd, _rotate_pairs_vjp)


def rotate_pairs(x, angles: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs ``(2i, 2i+1)`` by ``angles[..., i]``."""
    angles = np.asarray(angles, dtype=np.float64)
    return _rotate_pairs(x, cos=np.cos(angles), sin=np.sin(angles))


# -- straight-through -------------------------------------------------------------

def _ste_fwd(soft, *, hard):
    return np.broadcast_to(np.asarray(hard, dtype=soft.dtype), soft.shape).copy(), None


def _ste_vjp(g, saved, *, hard):
    return (g,)


# Forward is the hard value; the gradient is the soft path's (not the true derivative).
_ste = _defop("straight_through", _ste_fwd, _ste_vjp, checkable=False)


def straight_through(soft, hard) -> Tensor:
    return _ste(soft, hard=np.asarray(hard))


# -- composites (no registry entry of their own) ----------------------------------

def silu(x) -> Tensor:
    return mul(x, sigmoid(x))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x[..., in]`` and ``weight[out, in]``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), transpose(weight))
    if bias is not None:
        y = add(y, bias)
    return reshape(y, (*lead, y.shape[-1]))


def mse(a, b) -> Tensor:
    return mean_square(sub(a, b))
