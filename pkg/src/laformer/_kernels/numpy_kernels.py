"""Pure-numpy kernels. Always importable; the numba module mirrors these signatures."""
import numpy as np

LINEAR_CHUNK = 1024
SOFTMAX_CHUNK = 256


def depthwise_conv2d(x, k):
    # x: (B, H, W, C), k: (K, K, C); zero "same" padding
    K = k.shape[0]
    p = K // 2
    _, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros_like(x)
    for i in range(K):
        for j in range(K):
            out += xp[:, i:i + H, j:j + W, :] * k[i, j]
    return out


def depthwise_conv2d_grad_kernel(x, g, K):
    p = K // 2
    _, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    gk = np.empty((K, K, C), dtype=x.dtype)
    for i in range(K):
        for j in range(K):
            gk[i, j] = np.einsum("bhwc,bhwc->c", xp[:, i:i + H, j:j + W, :], g)
    return gk


def psi_features(x, kind, out=None):
    if kind == 0:  # 1 + elu
        out = np.exp(np.minimum(x, 0.0), out=out)
        pos = x > 0
        out[pos] = x[pos] + 1.0
        return out
    return np.maximum(x, 0.0, out=out)


def linear_attention(q, k, v, psi_kind, eps, normalize, out, kv, ksum, chunk=LINEAR_CHUNK):
    """Streaming psi(Q) (psi(K)^T V); auxiliary storage is chunk*c + c*d + c.

    Returns the number of rows whose denominator had to be clamped to ``eps``.
    """
    n = q.shape[0]
    kv[...] = 0.0
    ksum[...] = 0.0
    feat = np.empty((min(chunk, n), q.shape[1]), dtype=q.dtype)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        f = psi_features(k[s:e], psi_kind, out=feat[: e - s])
        kv += f.T @ v[s:e]
        ksum += f.sum(axis=0)
    clamped = 0
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        f = psi_features(q[s:e], psi_kind, out=feat[: e - s])
        np.matmul(f, kv, out=out[s:e])
        if normalize:
            den = f @ ksum
            low = den < eps
            if low.any():
                clamped += int(low.sum())
                den[low] = eps
            out[s:e] /= den[:, None]
    return clamped


def softmax_attention(q, k, v, out, chunk=SOFTMAX_CHUNK):
    # row-chunked: never holds more than chunk x N logits
    n, c = q.shape
    d = v.shape[1]
    qs = q * np.asarray(1.0 / np.sqrt(c), dtype=q.dtype)
    v1 = np.empty((n, d + 1), dtype=v.dtype)
    v1[:, :d] = v
    v1[:, d] = 1.0
    logits = np.empty((min(chunk, n), n), dtype=q.dtype)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        a = logits[: e - s]
        np.matmul(qs[s:e], k.T, out=a)
        a -= a.max(axis=1, keepdims=True)
        np.exp(a, out=a)
        r = a @ v1
        out[s:e] = r[:, :d] / r[:, d:]
    return out


def _next_round(top, bot):
    # circle-method tournament schedule; top[0] stays put
    new_top = np.concatenate([top[:1], bot[:1], top[1:-1]])
    new_bot = np.concatenate([bot[1:], top[-1:]])
    return new_top, new_bot


def jacobi_singular_values(a, tol, max_sweeps):
    """One-sided Jacobi with a parallel (round-robin) pair ordering, vectorised per round."""
    u = np.array(a, dtype=np.float64, order="F")
    m, n0 = u.shape
    n = n0
    if n % 2:
        u = np.asfortranarray(np.hstack([u, np.zeros((m, 1))]))
        n += 1
    top = np.arange(0, n, 2)
    bot = np.arange(1, n, 2)
    for _ in range(max_sweeps):
        rotated = False
        for _ in range(n - 1):
            up = u[:, top]
            uq = u[:, bot]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            mask = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if mask.any():
                rotated = True
                g = np.where(mask, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(mask, c, 1.0)
                s = np.where(mask, s, 0.0)
                u[:, top] = c * up - s * uq
                u[:, bot] = s * up + c * uq
            top, bot = _next_round(top, bot)
        if not rotated:
            break
    sv = np.sqrt(np.einsum("ij,ij->j", u, u))
    return np.sort(sv)[::-1][:n0]
