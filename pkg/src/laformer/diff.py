"""Reverse-mode differentiation over the tensor primitives.

Ops build a graph of :class:`Node` objects. :func:`backward` linearises that
graph into a tape (reverse topological order) and replays it once,
accumulating gradients additively across fan-out. Nodes that do not require
gradients record nothing, so the same layer code serves inference and
training.
"""
import contextlib
import dataclasses
import functools
import math
from collections import Counter

import numpy as np

from . import _kernels
from . import tensor as T
from .tensor import NonFiniteError, ShapeError


class Node:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = ()
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x):
    return x if isinstance(x, Node) else Node(np.asarray(x))


def parameter(value, name=None):
    return Node(np.asarray(value), requires_grad=True, name=name)


# ---------------------------------------------------------------- op counting

@dataclasses.dataclass
class OpCounter:
    macs: int = 0
    extra_flops: int = 0
    by_op: Counter = dataclasses.field(default_factory=Counter)

    @property
    def flops(self):
        return 2 * self.macs + self.extra_flops


_counters = []
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Ops inside record no graph; results never require gradients."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def count_ops():
    """Tally multiply-accumulates and elementwise flops of every op executed inside."""
    c = OpCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def _tally(op, macs=0, flops=0):
    for c in _counters:
        c.macs += int(macs)
        c.extra_flops += int(flops)
        c.by_op[op] += int(macs) * 2 + int(flops)


# per-element flop convention for non-MAC ops; the analytic counters mirror it
ELEMENT_FLOPS = {"layer_norm": 5, "softmax": 3}


def _make(value, op, links, macs=0, flops=None):
    T.check_finite(value, op)
    _tally(op, macs, value.size * ELEMENT_FLOPS.get(op, 1) if flops is None else flops)
    links = [(p, f) for p, f in links if p.requires_grad] if _grad_enabled else []
    node = Node(value, requires_grad=bool(links))
    if links:
        node.parents = tuple(links)
    return node


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------------------- backward

def _tape(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Propagate d(loss)/d(node) into ``.grad`` of every reachable node."""
    loss = as_node(loss)
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _tape(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g


# ------------------------------------------------------------------ basic ops

def add(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value + b.value, "add",
                 [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value - b.value, "sub",
                 [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))])


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value * b.value, "mul",
                 [(a, lambda g: _unbroadcast(g * b.value, a.shape)),
                  (b, lambda g: _unbroadcast(g * a.value, b.shape))])


def div(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return _make(out, "div",
                 [(a, lambda g: _unbroadcast(g / b.value, a.shape)),
                  (b, lambda g: _unbroadcast(-g * out / b.value, b.shape))])


def neg(a):
    a = as_node(a)
    return _make(-a.value, "neg", [(a, lambda g: -g)])


def scale(a, s):
    a = as_node(a)
    return _make(a.value * s, "scale", [(a, lambda g: g * s)])


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    out = T.matmul(a.value, b.value)
    macs = out.size * a.shape[-1]
    return _make(out, "matmul",
                 [(a, lambda g: _unbroadcast(g @ _swap(b.value), a.shape)),
                  (b, lambda g: _unbroadcast(_swap(a.value) @ g, b.shape))],
                 macs=macs, flops=0)


def transpose(a, axes):
    a = as_node(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), "transpose",
                 [(a, lambda g: np.transpose(g, inv))], flops=0)


def swap_last(a):
    axes = list(range(as_node(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape):
    a = as_node(a)
    return _make(a.value.reshape(shape), "reshape", [(a, lambda g: g.reshape(a.shape))], flops=0)


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def piece(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _make(np.concatenate([n.value for n in nodes], axis=axis), "concat",
                 [(n, piece(i)) for i, n in enumerate(nodes)], flops=0)


def take_channels(a, start, stop):
    """Slice ``[..., start:stop]`` of the last axis."""
    a = as_node(a)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return full

    return _make(a.value[..., start:stop], "take_channels", [(a, vjp)], flops=0)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _make(np.asarray(out), "sum", [(a, vjp)], flops=a.value.size)


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.value.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, a.shape).copy()

    return _make(np.asarray(out), "mean", [(a, vjp)], flops=a.value.size)


def abs(a):  # noqa: A001
    """|a|; the subgradient at 0 is taken as 0."""
    a = as_node(a)
    return _make(np.abs(a.value), "abs", [(a, lambda g: g * np.sign(a.value))])


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, "exp", [(a, lambda g: g * out)])


def clamp_min(a, lo):
    a = as_node(a)
    keep = a.value >= lo
    return _make(np.where(keep, a.value, lo), "clamp_min", [(a, lambda g: g * keep)])


# ---------------------------------------------------------------- activations

def relu(a):
    a = as_node(a)
    return _make(T.relu(a.value), "relu", [(a, lambda g: g * (a.value > 0))])


def elu(a):
    a = as_node(a)
    return _make(T.elu(a.value), "elu",
                 [(a, lambda g: g * np.where(a.value > 0, 1.0, np.exp(np.minimum(a.value, 0.0))))])


def one_plus_elu(a):
    a = as_node(a)
    out = T.one_plus_elu(a.value)
    return _make(out, "one_plus_elu", [(a, lambda g: g * np.where(a.value > 0, 1.0, out))])


def sigmoid(a):
    a = as_node(a)
    out = T.sigmoid(a.value)
    return _make(out, "sigmoid", [(a, lambda g: g * out * (1.0 - out))])


def gelu(a):
    a = as_node(a)
    x = a.value
    cdf = 0.5 * (1.0 + T.erf(x / math.sqrt(2.0)))

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
        return g * (cdf + x * pdf)

    return _make(x * cdf, "gelu", [(a, vjp)])


ACTIVATIONS = {"relu": relu, "elu": elu, "one_plus_elu": one_plus_elu,
               "sigmoid": sigmoid, "gelu": gelu}


def softmax(a, axis=-1):
    a = as_node(a)
    out = T.softmax(a.value, axis=axis)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _make(out, "softmax", [(a, vjp)])


# -------------------------------------------------------------- layer kernels

def layer_norm(x, gamma, beta, eps=1e-6):
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine params must be ({x.shape[-1]},)")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.value + beta.value
    lead = tuple(range(x.ndim - 1))

    def dx(g):
        gh = g * gamma.value
        return rstd * (gh - gh.mean(axis=-1, keepdims=True)
                       - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    return _make(out, "layer_norm",
                 [(x, dx),
                  (gamma, lambda g: (g * xhat).sum(axis=lead)),
                  (beta, lambda g: g.sum(axis=lead))])


def _bias_links(bias, out, name):
    if bias is None:
        return [], 0
    bias = as_node(bias)
    if bias.shape != (out.shape[-1],):
        raise ShapeError(f"{name}: bias shape {bias.shape} vs {out.shape[-1]} channels")
    lead = tuple(range(out.ndim - 1))
    return [(bias, lambda g: g.sum(axis=lead))], out.size


def conv_pointwise(x, w, bias=None):
    x, w = as_node(x), as_node(w)
    out = T.conv_pointwise(x.value, w.value, None if bias is None else as_node(bias).value)
    cin, cout = w.shape

    def dw(g):
        return x.value.reshape(-1, cin).T @ g.reshape(-1, cout)

    links, bflops = _bias_links(bias, out, "conv_pointwise")
    return _make(out, "conv_pointwise",
                 [(x, lambda g: g @ w.value.T), (w, dw)] + links,
                 macs=out.size * cin, flops=bflops)


def conv_depthwise(x, k, bias=None):
    x, k = as_node(x), as_node(k)
    out = T.conv_depthwise(x.value, k.value, None if bias is None else as_node(bias).value)
    K = k.shape[0]

    def dx(g):
        return T.conv_depthwise(g, k.value[::-1, ::-1].copy())

    def dk(g):
        xb = x.value if x.ndim == 4 else x.value[None]
        gb = g if g.ndim == 4 else g[None]
        return _kernels.depthwise_conv2d_grad_kernel(xb, gb, K)

    links, bflops = _bias_links(bias, out, "conv_depthwise")
    return _make(out, "conv_depthwise", [(x, dx), (k, dk)] + links,
                 macs=out.size * K * K, flops=bflops)


def conv2d(x, w, bias=None):
    x, w = as_node(x), as_node(w)
    out = T.conv2d(x.value, w.value, None if bias is None else as_node(bias).value)
    K, _, cin, cout = w.shape
    wm = w.value.reshape(K * K * cin, cout)

    def batched(a):
        return a if a.ndim == 4 else a[None]

    def dx(g):
        gx = T.col2im(batched(g) @ wm.T, K, cin)
        return gx if x.ndim == 4 else gx[0]

    def dw(g):
        cols = T.im2col(batched(x.value), K)
        return (cols.reshape(-1, K * K * cin).T @ g.reshape(-1, cout)).reshape(w.shape)

    links, bflops = _bias_links(bias, out, "conv2d")
    return _make(out, "conv2d", [(x, dx), (w, dw)] + links,
                 macs=out.size * K * K * cin, flops=bflops)


def pixel_unshuffle(x, r):
    x = as_node(x)
    return _make(T.pixel_unshuffle(x.value, r), "pixel_unshuffle",
                 [(x, lambda g: T.pixel_shuffle(g, r))], flops=0)


def pixel_shuffle(x, r):
    x = as_node(x)
    return _make(T.pixel_shuffle(x.value, r), "pixel_shuffle",
                 [(x, lambda g: T.pixel_unshuffle(g, r))], flops=0)


def global_avg_pool(x):
    x = as_node(x)
    H, W = x.shape[-3], x.shape[-2]

    def vjp(g):
        return np.broadcast_to(g[..., None, None, :] / (H * W), x.shape).copy()

    return _make(T.global_avg_pool(x.value), "global_avg_pool", [(x, vjp)], flops=x.value.size)


def to_tokens(x):
    x = as_node(x)
    return reshape(x, T.to_tokens(x.value).shape)


def to_spatial(t, H, W):
    t = as_node(t)
    return reshape(t, T.to_spatial(t.value, H, W).shape)


# ------------------------------------------------------------------- helpers

def contains_node(obj):
    if isinstance(obj, Node):
        return True
    if isinstance(obj, (list, tuple)):
        return any(contains_node(o) for o in obj)
    if isinstance(obj, dict):
        return any(contains_node(o) for o in obj.values())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return any(contains_node(getattr(obj, f.name)) for f in dataclasses.fields(obj))
    return False


def node_or_array(fn):
    """Unwrap the result to an ndarray unless it needs a gradient or a data argument was a Node.

    Parameters inside dataclass arguments do not count as data arguments, so
    ``rela(array, params)`` under :func:`no_grad` returns an array.
    """
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if not isinstance(out, Node) or out.requires_grad:
            return out
        if any(isinstance(a, Node) for a in (*args, *kwargs.values())):
            return out
        return out.value
    return wrapper


def named_parameters(obj, prefix=""):
    """Yield ``(dotted_name, Node)`` for every Node inside nested dataclasses/lists."""
    if isinstance(obj, Node):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, o in enumerate(obj):
            yield from named_parameters(o, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


# ------------------------------------------------------------------ gradcheck

@dataclasses.dataclass
class ParamCheck:
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    sampled: int


@dataclasses.dataclass
class GradReport:
    params: dict
    h: float
    samples: int

    @property
    def max_rel_error(self):
        return max((p.max_rel_error for p in self.params.values()), default=0.0)

    @property
    def worst(self):
        name = max(self.params, key=lambda k: self.params[k].max_rel_error)
        return name, self.params[name]

    def to_dict(self):
        return {
            "h": self.h,
            "samples_per_param": self.samples,
            "max_rel_error": self.max_rel_error,
            "params": {k: {"max_rel_error": v.max_rel_error, "worst_index": list(v.worst_index),
                           "analytic": v.analytic, "numeric": v.numeric, "sampled": v.sampled}
                       for k, v in self.params.items()},
        }


def relative_error(a, f):
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def gradcheck(f, inputs, h=1e-5, samples=64, seed=0, kink_distance=None):
    """Compare analytic gradients of scalar ``f`` against central differences.

    ``inputs`` is an array or a dict of arrays; ``f`` receives Nodes in the same
    structure. ``kink_distance(name, array)`` may return, per element, the
    distance to the nearest non-differentiable point; elements closer than 10h
    are never sampled.
    """
    single = not isinstance(inputs, dict)
    arrays = {"x": inputs} if single else inputs
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    def call(nodes):
        return as_node(f(nodes["x"] if single else nodes))

    nodes = {k: parameter(v, name=k) for k, v in arrays.items()}
    out = call(nodes)
    if out.value.size != 1:
        raise ShapeError("gradcheck: f must return a scalar")
    backward(out)

    def evaluate():
        v = float(call({k: Node(a) for k, a in arrays.items()}).value)
        if not math.isfinite(v):
            raise NonFiniteError("gradcheck: non-finite function value")
        return v

    rng = np.random.default_rng(seed)
    report = {}
    for name, arr in arrays.items():
        grad = nodes[name].grad
        grad = np.zeros_like(arr) if grad is None else grad
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"gradcheck: non-finite analytic gradient for {name!r}")
        eligible = np.arange(arr.size)
        if kink_distance is not None:
            dist = np.asarray(kink_distance(name, arr)).reshape(-1)
            eligible = eligible[dist >= 10 * h]
        if eligible.size == 0:
            continue
        pick = rng.choice(eligible, size=min(samples, eligible.size), replace=False)
        worst = ParamCheck(0.0, (), 0.0, 0.0, len(pick))
        flat = arr.reshape(-1)
        for i in pick:
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            a = float(grad.reshape(-1)[i])
            err = float(relative_error(a, fd))
            if err >= worst.max_rel_error:
                worst = ParamCheck(err, tuple(int(j) for j in np.unravel_index(i, arr.shape)),
                                   a, fd, len(pick))
        report[name] = worst
    return GradReport(report, h, samples)


def rebind(obj, nodes, prefix=""):
    """Copy of ``obj`` with each Node replaced by ``nodes[dotted_name]`` (if present)."""
    if isinstance(obj, Node):
        return nodes.get(prefix, obj)
    if isinstance(obj, list):
        return [rebind(o, nodes, f"{prefix}.{i}" if prefix else str(i)) for i, o in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(rebind(o, nodes, f"{prefix}.{i}" if prefix else str(i)) for i, o in enumerate(obj))
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        changes = {f.name: rebind(getattr(obj, f.name), nodes,
                                  f"{prefix}.{f.name}" if prefix else f.name)
                   for f in dataclasses.fields(obj)}
        return dataclasses.replace(obj, **changes)
    return obj
