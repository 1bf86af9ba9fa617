"""Differentiable kernels over (n, c, h, w) tensors.

All arithmetic runs on 64-bit intermediates; results are stored in the dtype
of the first tensor operand. Elementwise binary ops take either two tensors of
identical shape or a tensor and a constant (scalar or array) that broadcasts
onto the tensor's shape.
"""

from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result

F64 = np.float64


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(F64, copy=False)


def _require_4d(t: Tensor, op: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (n, c, h, w) tensor, got shape {t.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _constant(value, like: Tensor, op: str) -> np.ndarray:
    const = np.asarray(value, dtype=F64)
    try:
        shape = np.broadcast_shapes(like.shape, const.shape)
    except ValueError:
        shape = None
    if shape != like.shape:
        raise ShapeError(f"{op}: constant of shape {const.shape} does not broadcast onto {like.shape}")
    return const


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        return make_result("add", _f64(a) + _f64(b), (a, b), lambda g: (g, g))
    c = _constant(b, a, "add")
    return make_result("add", _f64(a) + c, (a,), lambda g: (g,))


def subtract(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "subtract")
        return make_result("subtract", _f64(a) - _f64(b), (a, b), lambda g: (g, -g))
    c = _constant(b, a, "subtract")
    return make_result("subtract", _f64(a) - c, (a,), lambda g: (g,))


def multiply(a: Tensor, b) -> Tensor:
    ad = _f64(a)
    if isinstance(b, Tensor):
        _same_shape(a, b, "multiply")
        bd = _f64(b)
        return make_result("multiply", ad * bd, (a, b), lambda g: (g * bd, g * ad))
    c = _constant(b, a, "multiply")
    return make_result("multiply", ad * c, (a,), lambda g: (np.broadcast_to(g * c, a.shape),))


def divide(a: Tensor, b) -> Tensor:
    ad = _f64(a)
    if isinstance(b, Tensor):
        _same_shape(a, b, "divide")
        bd = _f64(b)
        out = ad / bd
        return make_result("divide", out, (a, b), lambda g: (g / bd, -g * out / bd))
    c = _constant(b, a, "divide")
    return make_result("divide", ad / c, (a,), lambda g: (np.broadcast_to(g / c, a.shape),))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_result("scale", _f64(a) * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    ad = _f64(a)
    on = ad > 0
    return make_result("relu", np.where(on, ad, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a: Tensor) -> Tensor:
    ad = _f64(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    ad = _f64(a)
    out = np.logaddexp(0.0, ad)
    slope = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return make_result("softplus", out, (a,), lambda g: (g * slope,))


def absolute(a: Tensor) -> Tensor:
    ad = _f64(a)
    return make_result("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def square(a: Tensor) -> Tensor:
    ad = _f64(a)
    return make_result("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(_f64(a))
    return make_result("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    return make_result("cast", a.data.astype(dtype), (a,), lambda g: (g,), dtype=dtype)


# -- reductions and indexing ----------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return make_result("sum", np.sum(_f64(a)), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result("mean", np.mean(_f64(a)), (a,),
                       lambda g: (np.full(shape, float(g) / n),))


def sum_channel(a: Tensor) -> Tensor:
    _require_4d(a, "sum_channel")
    shape = a.shape
    return make_result("sum_channel", _f64(a).sum(axis=1, keepdims=True), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def masked_mean(a: Tensor, mask) -> Tensor:
    """Mean of ``a`` over entries where ``mask`` is true; 0 when the mask is empty."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    count = int(m.sum())
    weight = m / count if count else np.zeros(a.shape)
    value = float((_f64(a) * weight).sum())
    return make_result("masked_mean", np.asarray(value), (a,), lambda g: (float(g) * weight,))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape = a.shape
    basic = _is_basic_index(idx)

    def grad(g):
        full = np.zeros(shape, dtype=F64)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result("index", np.array(out, copy=True), (a,), grad)


def concat_channel(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_channel: nothing to concatenate")
    for t in tensors:
        _require_4d(t, "concat_channel")
        if t.shape[0] != tensors[0].shape[0] or t.shape[2:] != tensors[0].shape[2:]:
            raise ShapeError(
                f"concat_channel: {t.shape} incompatible with {tensors[0].shape} outside the channel axis")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([_f64(t) for t in tensors], axis=1)
    return make_result("concat_channel", out, tensors,
                       lambda g: tuple(np.split(g, splits, axis=1)))


# -- channel-wise normalizers ---------------------------------------------

def softmax_channel(a: Tensor) -> Tensor:
    _require_4d(a, "softmax_channel")
    if a.shape[1] < 1:
        raise ShapeError("softmax_channel: need at least one channel")
    ad = _f64(a)
    e = np.exp(ad - ad.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_result("softmax_channel", out, (a,), grad)


def layer_norm_channel(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each pixel's channel vector, then apply a per-channel affine."""
    _require_4d(a, "layer_norm_channel")
    if eps <= 0:
        raise ValueError("layer_norm_channel: eps must be positive")
    c = a.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm_channel: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    ad = _f64(a)
    mu = ad.mean(axis=1, keepdims=True)
    centered = ad - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = _f64(gamma).reshape(1, c, 1, 1)
    out = gd * xhat + _f64(beta).reshape(1, c, 1, 1)

    def grad(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result("layer_norm_channel", out, (a, gamma, beta), grad)


# -- convolutions -----------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, computed via im2col."""
    _require_4d(x, "conv2d")
    _require_4d(weight, "conv2d weight")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects in_c={ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0 (got {stride}, {padding})")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(_f64(x), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = _f64(weight).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += _f64(bias)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            if kh == kw == 1 and stride == 1 and padding == 0:
                gx = (g2 @ wmat).reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            else:
                gcols = np.ascontiguousarray(
                    (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
                gxp = np.zeros((n, c, hp, wp))
                ye, xe = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, :, a:a + ye:stride, b:b + xe:stride] += gcols[a, b]
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result("conv2d", out, inputs, grad)


def depthwise_conv2d(x: Tensor, weight: Tensor, padding: int = 0,
                     bias: Tensor | None = None) -> Tensor:
    """Per-channel convolution: output channel i sees only input channel i."""
    _require_4d(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(
            f"depthwise_conv2d: weight must be ({c}, 1, kh, kw) for {c} input channels, got {weight.shape}")
    if padding < 0:
        raise ValueError("depthwise_conv2d: padding must be >= 0")
    kh, kw = weight.shape[2:]
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} larger than padded input")
    xp = np.pad(_f64(x), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = _f64(weight)[:, 0]
    out = np.zeros((n, c, ho, wo))
    for a in range(kh):
        for b in range(kw):
            out += wd[:, a, b][None, :, None, None] * xp[:, :, a:a + ho, b:b + wo]
    if bias is not None:
        out += _f64(bias).reshape(1, c, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad(g):
        gw = np.zeros((c, 1, kh, kw))
        gxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                gw[:, 0, a, b] = (g * xp[:, :, a:a + ho, b:b + wo]).sum(axis=(0, 2, 3))
                gxp[:, :, a:a + ho, b:b + wo] += wd[:, a, b][None, :, None, None] * g
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result("depthwise_conv2d", out, inputs, grad)


# -- resampling -------------------------------------------------------------

def _upsample_matrix(size: int) -> np.ndarray:
    """Linear x2 interpolation with half-pixel centers and edge clamping."""
    mat = np.zeros((2 * size, size))
    for o in range(2 * size):
        src = builtins.max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = builtins.min(i0 + 1, size - 1)
        frac = src - i0
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    return mat


def bilinear_upsample_x2(a: Tensor) -> Tensor:
    _require_4d(a, "bilinear_upsample_x2")
    uh, uw = _upsample_matrix(a.shape[2]), _upsample_matrix(a.shape[3])
    out = uh @ _f64(a) @ uw.T
    return make_result("bilinear_upsample_x2", out, (a,), lambda g: (uh.T @ g @ uw,))


def avgpool_x2(a: Tensor) -> Tensor:
    _require_4d(a, "avgpool_x2")
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool_x2: spatial dims must be even, got {h}x{w}")
    out = _f64(a).reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_result("avgpool_x2", out, (a,), grad)
