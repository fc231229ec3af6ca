"""numba @njit kernels. Same contracts as numpy_kernels; imported only when numba is available."""
import math

import numpy as np
from numba import njit

from .numpy_kernels import softmax_attention  # BLAS-bound; a scalar loop would only be slower


@njit(cache=True)
def _dwconv_fwd(x, k, out):
    B, H, W, C = x.shape
    K = k.shape[0]
    p = K // 2
    for b in range(B):
        for h in range(H):
            for w in range(W):
                for c in range(C):
                    out[b, h, w, c] = 0.0
                for i in range(K):
                    hh = h + i - p
                    if hh < 0 or hh >= H:
                        continue
                    for j in range(K):
                        ww = w + j - p
                        if ww < 0 or ww >= W:
                            continue
                        for c in range(C):
                            out[b, h, w, c] += x[b, hh, ww, c] * k[i, j, c]


@njit(cache=True)
def _dwconv_grad_kernel(x, g, gk):
    B, H, W, C = x.shape
    K = gk.shape[0]
    p = K // 2
    for i in range(K):
        for j in range(K):
            for c in range(C):
                gk[i, j, c] = 0.0
    for b in range(B):
        for h in range(H):
            for i in range(K):
                hh = h + i - p
                if hh < 0 or hh >= H:
                    continue
                for w in range(W):
                    for j in range(K):
                        ww = w + j - p
                        if ww < 0 or ww >= W:
                            continue
                        for c in range(C):
                            gk[i, j, c] += x[b, hh, ww, c] * g[b, h, w, c]


def depthwise_conv2d(x, k):
    out = np.empty_like(x)
    _dwconv_fwd(x, k, out)
    return out


def depthwise_conv2d_grad_kernel(x, g, K):
    gk = np.empty((K, K, x.shape[3]), dtype=x.dtype)
    _dwconv_grad_kernel(x, g, gk)
    return gk


@njit(cache=True, inline="always")
def _psi(x, kind):
    if kind == 0:
        return x + 1.0 if x > 0.0 else math.exp(x)
    return x if x > 0.0 else 0.0


@njit(cache=True)
def _linear_attention(q, k, v, psi_kind, eps, normalize, out, kv, ksum, feat):
    n, c = q.shape
    d = v.shape[1]
    for a in range(c):
        ksum[a] = 0.0
        for b in range(d):
            kv[a, b] = 0.0
    for t in range(n):
        for a in range(c):
            f = _psi(k[t, a], psi_kind)
            ksum[a] += f
            for b in range(d):
                kv[a, b] += f * v[t, b]
    clamped = 0
    for t in range(n):
        den = 0.0
        for a in range(c):
            feat[a] = _psi(q[t, a], psi_kind)
            den += feat[a] * ksum[a]
        for b in range(d):
            s = 0.0
            for a in range(c):
                s += feat[a] * kv[a, b]
            out[t, b] = s
        if normalize:
            if den < eps:
                den = eps
                clamped += 1
            for b in range(d):
                out[t, b] /= den
    return clamped


def linear_attention(q, k, v, psi_kind, eps, normalize, out, kv, ksum):
    feat = np.empty(q.shape[1], dtype=q.dtype)
    return int(_linear_attention(q, k, v, psi_kind, q.dtype.type(eps), normalize, out, kv, ksum, feat))


@njit(cache=True)
def _jacobi(u, tol, max_sweeps):
    m, n = u.shape
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    a = u[i, p]
                    b = u[i, q]
                    alpha += a * a
                    beta += b * b
                    gamma += a * b
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + math.hypot(1.0, zeta))
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                for i in range(m):
                    a = u[i, p]
                    b = u[i, q]
                    u[i, p] = cs * a - sn * b
                    u[i, q] = sn * a + cs * b
        if not rotated:
            break
    sv = np.empty(n)
    for j in range(n):
        s = 0.0
        for i in range(m):
            s += u[i, j] * u[i, j]
        sv[j] = math.sqrt(s)
    return sv


def jacobi_singular_values(a, tol, max_sweeps):
    u = np.array(a, dtype=np.float64, order="F")
    return np.sort(_jacobi(u, tol, max_sweeps))[::-1]
