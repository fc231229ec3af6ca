"""Dense ndarray primitives.

A feature map ("SpatialMap") is an array of shape ``(H, W, C)`` or, batched,
``(B, H, W, C)``. Its token view is ``(..., N, C)`` with ``N = H * W`` in
row-major raster order: token ``i`` sits at row ``i // W``, column ``i % W``.
Every primitive returns finite values or raises :class:`NonFiniteError`.
"""
import math
import os

import numpy as np
from scipy.special import erf

from . import _kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.dtype(_DTYPES[os.environ.get("LAFORMER_DTYPE", "float64")])


def default_dtype():
    return _default_dtype


def set_default_dtype(name):
    global _default_dtype
    _default_dtype = np.dtype(_DTYPES[np.dtype(name).name])


def check_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op}: non-finite values in result")
    return x


def _spatial(x, op):
    if x.ndim not in (3, 4):
        raise ShapeError(f"{op}: expected (H, W, C) or (B, H, W, C), got shape {x.shape}")


def to_tokens(x):
    """(..., H, W, C) -> (..., H*W, C) in raster order."""
    return x.reshape(*x.shape[:-3], x.shape[-3] * x.shape[-2], x.shape[-1])


def to_spatial(t, H, W):
    if t.shape[-2] != H * W:
        raise ShapeError(f"token count {t.shape[-2]} != {H}x{W}")
    return t.reshape(*t.shape[:-2], H, W, t.shape[-1])


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return check_finite(np.matmul(a, b), "matmul")


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise each token over its channels (last axis)."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine params must be ({x.shape[-1]},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return check_finite(xc / np.sqrt(var + eps) * gamma + beta, "layer_norm")


def conv_pointwise(x, w, bias=None):
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv_pointwise: {x.shape[-1]} input channels vs weight {w.shape}")
    y = x @ w
    if bias is not None:
        y = y + bias
    return check_finite(y, "conv_pointwise")


def conv_depthwise(x, k, bias=None):
    """Per-channel 2-D cross-correlation with zero padding of (K-1)//2."""
    _spatial(x, "conv_depthwise")
    K = k.shape[0]
    if K % 2 == 0:
        raise ShapeError(f"conv_depthwise: kernel size must be odd, got {K}")
    if k.shape != (K, K, x.shape[-1]):
        raise ShapeError(f"conv_depthwise: kernel {k.shape} does not match {x.shape[-1]} channels")
    batched = x if x.ndim == 4 else x[None]
    y = _kernels.depthwise_conv2d(batched, k)
    if x.ndim == 3:
        y = y[0]
    if bias is not None:
        y = y + bias
    return check_finite(y, "conv_depthwise")


def im2col(x, K):
    """(B, H, W, C) -> (B, H, W, K*K*C) zero-padded patches, (i, j, c) ordering."""
    p = K // 2
    _, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return np.concatenate(
        [xp[:, i:i + H, j:j + W, :] for i in range(K) for j in range(K)], axis=-1)


def col2im(cols, K, C):
    p = K // 2
    B, H, W, _ = cols.shape
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=cols.dtype)
    idx = 0
    for i in range(K):
        for j in range(K):
            xp[:, i:i + H, j:j + W, :] += cols[..., idx * C:(idx + 1) * C]
            idx += 1
    return xp[:, p:p + H, p:p + W, :]


def conv2d(x, w, bias=None):
    """Dense KxK convolution, weight shape (K, K, Cin, Cout), same padding."""
    _spatial(x, "conv2d")
    K, _, cin, cout = w.shape
    if x.shape[-1] != cin or K % 2 == 0:
        raise ShapeError(f"conv2d: weight {w.shape} vs input {x.shape}")
    batched = x if x.ndim == 4 else x[None]
    y = im2col(batched, K) @ w.reshape(K * K * cin, cout)
    if x.ndim == 3:
        y = y[0]
    if bias is not None:
        y = y + bias
    return check_finite(y, "conv2d")


def pixel_unshuffle(x, r):
    """(.., H, W, C) -> (.., H/r, W/r, C*r*r); output channel = c*r*r + dy*r + dx."""
    _spatial(x, "pixel_unshuffle")
    *lead, H, W, C = x.shape
    if H % r or W % r:
        raise ShapeError(f"pixel_unshuffle: {H}x{W} not divisible by {r}")
    n = len(lead)
    y = x.reshape(*lead, H // r, r, W // r, r, C)
    y = y.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return np.ascontiguousarray(y).reshape(*lead, H // r, W // r, C * r * r)


def pixel_shuffle(x, r):
    _spatial(x, "pixel_shuffle")
    *lead, H, W, C = x.shape
    if C % (r * r):
        raise ShapeError(f"pixel_shuffle: {C} channels not divisible by {r * r}")
    n = len(lead)
    c = C // (r * r)
    y = x.reshape(*lead, H, W, c, r, r)
    y = y.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return np.ascontiguousarray(y).reshape(*lead, H * r, W * r, c)


def global_avg_pool(x):
    _spatial(x, "global_avg_pool")
    return x.mean(axis=(-3, -2))


def relu(x):
    return np.maximum(x, 0.0)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def one_plus_elu(x):
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def sigmoid(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


ACTIVATIONS = {
    "relu": relu,
    "elu": elu,
    "one_plus_elu": one_plus_elu,
    "sigmoid": sigmoid,
    "gelu": gelu,
}
