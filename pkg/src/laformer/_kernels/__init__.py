"""Hot-loop kernels with two interchangeable backends.

``LAFORMER_BACKEND=numpy`` forces the pure-numpy path; the default is ``numba``
when it imports, otherwise numpy. Kernels declare every auxiliary buffer they
allocate through :func:`track_allocations`, which is how the O(N)-memory
contract of linear attention is checked.
"""
import contextlib
import itertools
import os
import warnings

import numpy as np

from . import numpy_kernels

try:
    from . import numba_kernels
except ImportError:  # pragma: no cover - numba missing
    numba_kernels = None

BACKENDS = ("numba", "numpy")
PSI_KINDS = {"one_plus_elu": 0, "relu": 1}

_modules = {"numpy": numpy_kernels, "numba": numba_kernels}


def _initial_backend():
    name = os.environ.get("LAFORMER_BACKEND", "numba").strip().lower()
    if name not in BACKENDS:
        raise ValueError(f"LAFORMER_BACKEND must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and numba_kernels is None:
        warnings.warn("numba unavailable, falling back to numpy kernels")
        name = "numpy"
    return name


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")
    if name == "numba" and numba_kernels is None:
        raise RuntimeError("numba backend requested but numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def available_backends():
    return tuple(b for b in BACKENDS if _modules[b] is not None)


def _impl():
    return _modules[_backend]


class AllocationTracker:
    """Collects (label, shape, nbytes, call) for auxiliary buffers declared by kernels."""

    def __init__(self):
        self.records = []

    def record(self, label, shape, dtype, call=0):
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        self.records.append((label, tuple(int(s) for s in shape), nbytes, call))

    @property
    def peak_bytes(self):
        # buffers of one kernel call live together; calls do not overlap
        per_call = {}
        for _, _, nbytes, call in self.records:
            per_call[call] = per_call.get(call, 0) + nbytes
        return max(per_call.values(), default=0)

    def has_square_buffer(self, n):
        return any(len(s) >= 2 and s[-1] >= n and s[-2] >= n for _, s, _, _ in self.records)


_trackers = []
_calls = itertools.count()


@contextlib.contextmanager
def track_allocations():
    tracker = AllocationTracker()
    _trackers.append(tracker)
    try:
        yield tracker
    finally:
        _trackers.remove(tracker)


def _declare(buffers):
    """Record the auxiliary buffers one kernel call holds at once."""
    call = next(_calls)
    for t in _trackers:
        for label, shape, dtype in buffers:
            t.record(label, shape, dtype, call)


def depthwise_conv2d(x, k):
    if k.shape[0] % 2 == 0 or k.shape[0] != k.shape[1]:
        raise ValueError(f"depthwise kernel must be square with odd size, got {k.shape[:2]}")
    return _impl().depthwise_conv2d(np.ascontiguousarray(x), np.ascontiguousarray(k))


def depthwise_conv2d_grad_kernel(x, g, K):
    return _impl().depthwise_conv2d_grad_kernel(np.ascontiguousarray(x), np.ascontiguousarray(g), K)


def linear_attention(q, k, v, psi="one_plus_elu", eps=1e-6, normalize=True):
    """Single-head streaming linear attention on (N, c) token matrices.

    Returns ``(out, clamped_rows)``. Never allocates an N x N buffer.
    """
    kind = PSI_KINDS[psi]
    q, k, v = (np.ascontiguousarray(a) for a in (q, k, v))
    n, c = q.shape
    d = v.shape[1]
    out = np.empty((n, d), dtype=v.dtype)
    kv = np.empty((c, d), dtype=v.dtype)
    ksum = np.empty(c, dtype=v.dtype)
    bufs = [("kv", kv.shape, kv.dtype), ("ksum", ksum.shape, ksum.dtype)]
    if _backend == "numpy":
        m = min(numpy_kernels.LINEAR_CHUNK, n)
        _declare(bufs + [("psi_chunk", (m, c), q.dtype), ("den_chunk", (m,), v.dtype),
                         ("kv_partial", (c, d), v.dtype)])
        clamped = numpy_kernels.linear_attention(q, k, v, kind, eps, normalize, out, kv, ksum)
    else:
        _declare(bufs + [("psi_row", (c,), q.dtype)])
        clamped = numba_kernels.linear_attention(q, k, v, kind, eps, normalize, out, kv, ksum)
    return out, clamped


def softmax_attention(q, k, v, chunk=None):
    q, k, v = (np.ascontiguousarray(a) for a in (q, k, v))
    n = q.shape[0]
    chunk = chunk or numpy_kernels.SOFTMAX_CHUNK
    out = np.empty((n, v.shape[1]), dtype=v.dtype)
    _declare([("logits_chunk", (min(chunk, n), n), q.dtype),
              ("v_aug", (n, v.shape[1] + 1), v.dtype)])
    return _impl().softmax_attention(q, k, v, out, chunk=chunk)


def jacobi_singular_values(a, tol=1e-15, max_sweeps=60):
    """Singular values (descending) via one-sided Jacobi on the thin side.

    Tall inputs are first reduced to their n x n triangular QR factor, which
    has the same singular values; the Gram matrix is never formed.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if a.shape[0] < a.shape[1]:
        a = a.T
    if a.shape[1] == 0:
        return np.zeros(0)
    if a.shape[0] > a.shape[1]:
        a = np.linalg.qr(a, mode="r")
    return _impl().jacobi_singular_values(a, tol, max_sweeps)
