"""Softmax attention, linear attention, RELA, channel attention and the CAB.

All functions accept ndarrays or :class:`~laformer.diff.Node` objects and
return the same kind. When no input requires a gradient the work goes
through the streaming kernels (no N x N buffer for linear attention);
otherwise a differentiable graph is built from the primitive ops. Both routes
report identical op counts to :func:`laformer.diff.count_ops`.
"""
import dataclasses
import math
from typing import Optional

import numpy as np

from . import _kernels
from . import diff as D
from . import tensor as T
from .diff import Node, node_or_array

DENOM_EPS = 1e-6
PSI_CHOICES = ("one_plus_elu", "relu")
MECHANISMS = ("rela", "linear", "softmax")


class ZeroDenominatorError(ArithmeticError):
    pass


@dataclasses.dataclass
class Diagnostics:
    clamped_rows: int = 0


diagnostics = Diagnostics()


@dataclasses.dataclass
class AttentionParams:
    w_q: Node
    w_k: Node
    w_v: Node
    dwc: Optional[Node] = None
    b_q: Optional[Node] = None
    b_k: Optional[Node] = None
    b_v: Optional[Node] = None
    heads: int = 1
    psi: str = "one_plus_elu"
    mechanism: str = "rela"

    def __post_init__(self):
        C = np.shape(_val(self.w_q))[1]
        if C % self.heads:
            raise ValueError(f"channels {C} not divisible by heads {self.heads}")
        if self.psi not in PSI_CHOICES:
            raise ValueError(f"psi must be one of {PSI_CHOICES}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if self.dwc is not None and np.shape(_val(self.dwc))[0] % 2 == 0:
            raise ValueError("RELA depthwise kernel size must be odd")


@dataclasses.dataclass
class CABParams:
    w_p1: Node
    w_d: Node
    ca_w1: Node
    ca_w2: Node
    w_p2: Node
    b_p1: Optional[Node] = None
    b_d: Optional[Node] = None
    b_p2: Optional[Node] = None

    def __post_init__(self):
        ch = np.shape(_val(self.w_p1))[1]
        hidden = np.shape(_val(self.ca_w1))[1]
        if hidden == 0 or ch % hidden:
            raise ValueError(f"CA reduction must divide {ch} channels")


def _val(x):
    return x.value if isinstance(x, Node) else x


def _needs_grad(*xs):
    return D.grad_enabled() and any(isinstance(x, Node) and x.requires_grad for x in xs)


def _wrap_like(out, *inputs):
    return Node(out) if any(isinstance(x, Node) for x in inputs) else out


# ------------------------------------------------------------------ op costs

def linear_attention_cost(N, C, heads=1, normalize=True):
    """(macs, extra_flops) of one linear attention call on N tokens of width C."""
    c = C // heads
    macs = 2 * N * C * c
    flops = 2 * N * C
    if normalize:
        macs += N * C
        flops += N * C + N * heads + N * C
    return macs, flops


def softmax_attention_cost(N, C, heads=1):
    return 2 * N * N * C, 4 * N * N * heads


# ------------------------------------------------------------ head splitting

def _split_heads(t, heads):
    if heads == 1:
        return t
    *lead, N, C = t.shape
    n = len(lead)
    t = D.reshape(t, (*lead, N, heads, C // heads))
    return D.transpose(t, (*range(n), n + 1, n, n + 2))


def _merge_heads(t, heads):
    if heads == 1:
        return t
    *lead, h, N, c = t.shape
    n = len(lead)
    t = D.transpose(t, (*range(n), n + 1, n, n + 2))
    return D.reshape(t, (*lead, N, h * c))


def _per_head(kernel, q, k, v, heads):
    """Run a 2-D (N, c) kernel over every leading index and head."""
    *lead, N, C = q.shape
    c = C // heads
    q2, k2, v2 = (a.reshape(-1, N, a.shape[-1]) for a in (q, k, v))
    dv = v.shape[-1] // heads
    out = np.empty((q2.shape[0], N, v.shape[-1]), dtype=v.dtype)
    for b in range(q2.shape[0]):
        for h in range(heads):
            out[b, :, h * dv:(h + 1) * dv] = kernel(
                q2[b, :, h * c:(h + 1) * c], k2[b, :, h * c:(h + 1) * c], v2[b, :, h * dv:(h + 1) * dv])
    return out.reshape(*lead, N, v.shape[-1])


def _check_tokens(q, k, v, heads):
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise T.ShapeError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} disagree")
    if q.shape[-1] % heads or v.shape[-1] % heads:
        raise T.ShapeError(f"attention: channels not divisible by {heads} heads")


# ----------------------------------------------------------------- mechanisms

def softmax_attention(q, k, v, heads=1):
    """exp(QK^T/sqrt(c))-weighted average of V, c the per-head width."""
    _check_tokens(q, k, v, heads)
    N, C = q.shape[-2], q.shape[-1]
    if _needs_grad(q, k, v):
        qh, kh, vh = (_split_heads(D.as_node(a), heads) for a in (q, k, v))
        s = D.scale(D.matmul(qh, D.swap_last(kh)), 1.0 / math.sqrt(C // heads))
        return _merge_heads(D.matmul(D.softmax(s), vh), heads)
    lead = int(np.prod(q.shape[:-2], dtype=np.int64))
    macs, flops = softmax_attention_cost(N, C, heads)
    D._tally("softmax_attention", macs * lead, flops * lead)
    out = _per_head(_kernels.softmax_attention, _val(q), _val(k), _val(v), heads)
    T.check_finite(out, "softmax_attention")
    return _wrap_like(out, q, k, v)


@node_or_array
def linear_attention_explicit(q, k, v, psi="one_plus_elu", heads=1, normalize=True):
    """O(N^2) reference: materialises the N x N map psi(Q) psi(K)^T.

    Raises ZeroDenominatorError instead of patching a zero row sum.
    """
    q, k, v = _val(q), _val(k), _val(v)
    _check_tokens(q, k, v, heads)
    phi = T.ACTIVATIONS[psi]
    c = q.shape[-1] // heads
    dv = v.shape[-1] // heads
    out = np.empty(v.shape, dtype=np.result_type(q, v))
    for h in range(heads):
        fq = phi(q[..., h * c:(h + 1) * c])
        fk = phi(k[..., h * c:(h + 1) * c])
        m = fq @ np.swapaxes(fk, -1, -2)
        if normalize:
            den = m.sum(axis=-1, keepdims=True)
            if np.any(den <= 0):
                raise ZeroDenominatorError("linear attention row with zero total weight")
            m = m / den
        out[..., h * dv:(h + 1) * dv] = m @ v[..., h * dv:(h + 1) * dv]
    return T.check_finite(out, "linear_attention_explicit")


def linear_attention(q, k, v, psi="one_plus_elu", heads=1, normalize=True, eps=DENOM_EPS):
    """psi(Q) (psi(K)^T V), optionally divided by psi(Q) sum_j psi(K_j)^T.

    Denominators below ``eps`` are clamped and counted in ``diagnostics``.
    """
    _check_tokens(q, k, v, heads)
    N, C = q.shape[-2], q.shape[-1]
    if _needs_grad(q, k, v):
        phi = D.ACTIVATIONS[psi]
        qh, kh, vh = (_split_heads(D.as_node(a), heads) for a in (q, k, v))
        fq, fk = phi(qh), phi(kh)
        kv = D.matmul(D.swap_last(fk), vh)
        y = D.matmul(fq, kv)
        if normalize:
            den = D.matmul(fq, D.swap_last(D.sum(fk, axis=-2, keepdims=True)))
            diagnostics.clamped_rows += int((den.value < eps).sum())
            y = D.div(y, D.clamp_min(den, eps))
        return _merge_heads(y, heads)
    lead = int(np.prod(q.shape[:-2], dtype=np.int64))
    macs, flops = linear_attention_cost(N, C, heads, normalize)
    D._tally("linear_attention", macs * lead, flops * lead)

    def kernel(a, b, c):
        out, clamped = _kernels.linear_attention(a, b, c, psi, eps, normalize)
        diagnostics.clamped_rows += clamped
        return out

    out = _per_head(kernel, _val(q), _val(k), _val(v), heads)
    T.check_finite(out, "linear_attention")
    return _wrap_like(out, q, k, v)


def _project(t, w, b):
    return D.conv_pointwise(t, w, b)


@node_or_array
def attention_branch(x, p, normalize=True, parts=None):
    """Token mixer of a DA block on a spatial map, chosen by ``p.mechanism``.

    ``rela``: linear attention plus a depthwise convolution of V; ``linear``:
    the attention term alone; ``softmax``: global softmax attention. If
    ``parts`` is a dict it receives the separate attention and local terms.
    """
    x = D.as_node(x)
    H, W = x.shape[-3], x.shape[-2]
    t = D.to_tokens(x)
    q = _project(t, p.w_q, p.b_q)
    k = _project(t, p.w_k, p.b_k)
    v = _project(t, p.w_v, p.b_v)
    if p.mechanism == "softmax":
        attn = softmax_attention(q, k, v, heads=p.heads)
    else:
        attn = linear_attention(q, k, v, psi=p.psi, heads=p.heads, normalize=normalize)
    y = D.to_spatial(attn, H, W)
    if parts is not None:
        parts["attention"] = y.value
    if p.mechanism == "rela":
        if p.dwc is None:
            raise ValueError("rela mechanism needs a depthwise kernel")
        local = D.conv_depthwise(D.to_spatial(v, H, W), p.dwc)
        if parts is not None:
            parts["local"] = local.value
        y = D.add(y, local)
    return y


@node_or_array
def rela(x, p, normalize=True):
    """Rank-enhanced linear attention: attention(Q, K, V) + depthwise(V).

    ``normalize=False`` drops the row normalisation (the literal un-normalised
    form). With ``p.dwc`` absent this is vanilla linear attention.
    """
    mech = "rela" if p.dwc is not None else "linear"
    if p.mechanism != mech:
        p = dataclasses.replace(p, mechanism=mech)
    return attention_branch(x, p, normalize=normalize)


def attention_branch_cost(N, cin, C, heads, mechanism, kernel, normalize=True, bias=False):
    macs = 3 * N * cin * C
    flops = 3 * N * C if bias else 0
    if mechanism == "softmax":
        m, f = softmax_attention_cost(N, C, heads)
    else:
        m, f = linear_attention_cost(N, C, heads, normalize)
    macs, flops = macs + m, flops + f
    if mechanism == "rela":
        macs += N * C * kernel * kernel
        flops += N * C
    return macs, flops


@node_or_array
def channel_attention(x, w1, w2):
    """Squeeze-excite: x * sigmoid(relu(pool(x) w1) w2), one scale per channel."""
    x = D.as_node(x)
    C = x.shape[-1]
    if D.as_node(w1).shape[0] != C or D.as_node(w2).shape[1] != C:
        raise T.ShapeError("channel_attention: weight shapes do not match channels")
    s = D.global_avg_pool(x)
    s = D.reshape(s, (*s.shape[:-1], 1, C))
    s = D.relu(D.matmul(s, w1))
    s = D.sigmoid(D.matmul(s, w2))
    s = D.reshape(s, (*s.shape[:-2], 1, 1, C))
    return D.mul(x, s)


def channel_attention_cost(N, C, hidden):
    return 2 * C * hidden, N * C + hidden + C + N * C


@node_or_array
def cab(x, p):
    """Pointwise -> 3x3 depthwise -> GELU -> channel attention -> pointwise."""
    h = D.conv_pointwise(x, p.w_p1, p.b_p1)
    h = D.conv_depthwise(h, p.w_d, p.b_d)
    h = D.gelu(h)
    h = channel_attention(h, p.ca_w1, p.ca_w2)
    return D.conv_pointwise(h, p.w_p2, p.b_p2)


def cab_cost(N, C, ch, hidden, kernel=3, bias=False):
    macs = N * C * ch + N * ch * kernel * kernel + N * ch * C
    flops = N * ch  # gelu
    if bias:
        flops += 2 * N * ch + N * C
    m, f = channel_attention_cost(N, ch, hidden)
    return macs + m, flops + f
