"""Named gradient-check targets shared by the CLI and the test-suite.

Each target reduces an op's output to a scalar through fixed random weights,
so every input element gets an O(1) gradient.
"""
import dataclasses
from typing import Callable

import numpy as np

from . import diff as D
from .attention import cab, channel_attention, linear_attention, rela, softmax_attention
from .blocks import cgffn, da_block, make_attention, make_cab, make_cgffn, make_da_block
from .init import NamedInit

PRIMITIVE_TOL = 1e-5
BLOCK_TOL = 1e-4


@dataclasses.dataclass
class GradTarget:
    name: str
    family: str  # "primitive" or "block"
    build: Callable  # seed -> (f, inputs, kink_distance or None)

    @property
    def tol(self):
        return PRIMITIVE_TOL if self.family == "primitive" else BLOCK_TOL


TARGETS = {}


def _target(family, name=None):
    def register(fn):
        n = name or fn.__name__.lstrip("_")
        TARGETS[n] = GradTarget(n, family, fn)
        return fn
    return register


def _weigh(out, seed):
    """sum(out * R) for a fixed Gaussian R of out's shape."""
    out = D.as_node(out)
    r = np.random.default_rng([seed, 99]).standard_normal(out.shape)
    return D.sum(D.mul(out, r))


def _rng(seed):
    return np.random.default_rng(seed)


def _abs_kink(names):
    def dist(name, arr):
        return np.abs(arr) if name in names else np.full(arr.shape, np.inf)
    return dist


def _elementwise(op, kink=False, shift=0.0):
    def build(seed):
        x = _rng(seed).standard_normal((3, 5)) + shift
        return (lambda n: _weigh(op(n), seed)), x, (_abs_kink({"x"}) if kink else None)
    return build


for _name, _op, _kink in [("exp", D.exp, False), ("relu", D.relu, True), ("elu", D.elu, True),
                          ("one_plus_elu", D.one_plus_elu, True), ("sigmoid", D.sigmoid, False),
                          ("gelu", D.gelu, False), ("abs", D.abs, True), ("neg", D.neg, False),
                          ("softmax", D.softmax, False)]:
    TARGETS[_name] = GradTarget(_name, "primitive", _elementwise(_op, _kink))


@_target("primitive")
def _add(seed):
    r = _rng(seed)
    return (lambda n: _weigh(D.add(n["a"], n["b"]), seed)), \
        {"a": r.standard_normal((2, 3, 4)), "b": r.standard_normal((4,))}, None


@_target("primitive")
def _sub(seed):
    r = _rng(seed)
    return (lambda n: _weigh(D.sub(n["a"], n["b"]), seed)), \
        {"a": r.standard_normal((3, 4)), "b": r.standard_normal((3, 1))}, None


@_target("primitive")
def _mul(seed):
    r = _rng(seed)
    return (lambda n: _weigh(D.mul(n["a"], n["b"]), seed)), \
        {"a": r.standard_normal((2, 3, 4)), "b": r.standard_normal((3, 4))}, None


@_target("primitive")
def _div(seed):
    r = _rng(seed)
    b = 1.5 + r.random((3, 4))
    return (lambda n: _weigh(D.div(n["a"], n["b"]), seed)), \
        {"a": r.standard_normal((3, 4)), "b": b}, None


@_target("primitive")
def _matmul(seed):
    r = _rng(seed)
    return (lambda n: _weigh(D.matmul(n["a"], n["b"]), seed)), \
        {"a": r.standard_normal((2, 4, 5)), "b": r.standard_normal((5, 3))}, None


@_target("primitive")
def _clamp_min(seed):
    x = _rng(seed).standard_normal((4, 5))
    return (lambda n: _weigh(D.clamp_min(n, 0.3), seed)), x, \
        (lambda name, a: np.abs(a - 0.3))


@_target("primitive")
def _reductions(seed):
    x = _rng(seed).standard_normal((3, 4, 5))

    def f(n):
        s = D.sum(D.mul(D.sum(n, axis=1), np.arange(15.0).reshape(3, 5) - 7))
        return D.add(s, D.mul(D.mean(D.mul(n, n)), 3.0))
    return f, x, None


@_target("primitive")
def _reshape_transpose(seed):
    x = _rng(seed).standard_normal((2, 3, 4))
    return (lambda n: _weigh(D.transpose(D.reshape(n, (6, 4)), (1, 0)), seed)), x, None


@_target("primitive")
def _concat_split(seed):
    r = _rng(seed)

    def f(n):
        c = D.concat([n["a"], n["b"]], axis=-1)
        return _weigh(D.mul(D.take_channels(c, 1, 4), D.take_channels(c, 3, 6)), seed)
    return f, {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3))}, None


@_target("primitive")
def _layer_norm(seed):
    r = _rng(seed)
    return (lambda n: _weigh(D.layer_norm(n["x"], n["gamma"], n["beta"]), seed)), \
        {"x": r.standard_normal((3, 3, 6)), "gamma": 1 + 0.3 * r.standard_normal(6),
         "beta": r.standard_normal(6)}, None


@_target("primitive")
def _conv_pointwise(seed):
    r = _rng(seed)
    return (lambda n: _weigh(D.conv_pointwise(n["x"], n["w"], n["b"]), seed)), \
        {"x": r.standard_normal((4, 4, 3)), "w": r.standard_normal((3, 5)),
         "b": r.standard_normal(5)}, None


@_target("primitive")
def _conv_depthwise(seed):
    r = _rng(seed)
    return (lambda n: _weigh(D.conv_depthwise(n["x"], n["k"], n["b"]), seed)), \
        {"x": r.standard_normal((2, 5, 6, 3)), "k": r.standard_normal((3, 3, 3)),
         "b": r.standard_normal(3)}, None


@_target("primitive")
def _conv2d(seed):
    r = _rng(seed)
    return (lambda n: _weigh(D.conv2d(n["x"], n["w"], n["b"]), seed)), \
        {"x": r.standard_normal((5, 4, 3)), "w": r.standard_normal((3, 3, 3, 2)),
         "b": r.standard_normal(2)}, None


@_target("primitive")
def _pixel_shuffle(seed):
    x = _rng(seed).standard_normal((2, 3, 8))
    return (lambda n: _weigh(D.pixel_shuffle(n, 2), seed)), x, None


@_target("primitive")
def _pixel_unshuffle(seed):
    x = _rng(seed).standard_normal((4, 6, 2))
    return (lambda n: _weigh(D.pixel_unshuffle(n, 2), seed)), x, None


@_target("primitive")
def _global_avg_pool(seed):
    x = _rng(seed).standard_normal((2, 3, 4, 5))
    return (lambda n: _weigh(D.global_avg_pool(n), seed)), x, None


@_target("primitive")
def _linear_attention(seed):
    r = _rng(seed)
    qkv = {k: r.standard_normal((12, 4)) for k in "qkv"}
    return (lambda n: _weigh(linear_attention(n["q"], n["k"], n["v"]), seed)), qkv, None


@_target("primitive")
def _linear_attention_relu(seed):
    r = _rng(seed)
    qkv = {k: r.standard_normal((12, 4)) for k in "qkv"}
    return (lambda n: _weigh(linear_attention(n["q"], n["k"], n["v"], psi="relu", heads=2), seed)), \
        qkv, _abs_kink({"q", "k"})


@_target("primitive")
def _softmax_attention(seed):
    r = _rng(seed)
    qkv = {k: r.standard_normal((10, 4)) for k in "qkv"}
    return (lambda n: _weigh(softmax_attention(n["q"], n["k"], n["v"], heads=2), seed)), qkv, None


# Blocks use larger weights than the training init so that every parameter
# carries a gradient well above finite-difference noise.

def _block_inputs(seed, params, x):
    inputs = {"x": x}
    inputs.update({f"p.{k}": v.value for k, v in D.named_parameters(params)})
    return inputs


def _block(op_fn, params, x, seed):
    def f(n):
        p = D.rebind(params, {k[2:]: v for k, v in n.items() if k.startswith("p.")})
        return _weigh(op_fn(n["x"], p), seed)
    return f, _block_inputs(seed, params, x), None


@_target("block")
def _channel_attention(seed):
    r = _rng(seed)
    inputs = {"x": r.standard_normal((4, 4, 8)), "w1": 0.5 * r.standard_normal((8, 2)),
              "w2": 0.5 * r.standard_normal((2, 8))}
    return (lambda n: _weigh(channel_attention(n["x"], n["w1"], n["w2"]), seed)), inputs, None


@_target("block")
def _cab(seed):
    p = make_cab(NamedInit(seed, std=0.3), "cab", 8, bias=True)
    return _block(cab, p, _rng(seed).standard_normal((4, 4, 8)), seed)


@_target("block")
def _cgffn(seed):
    p = make_cgffn(NamedInit(seed, std=0.3), "ffn", 4, bias=True)
    return _block(cgffn, p, _rng(seed).standard_normal((4, 4, 4)), seed)


@_target("block")
def _rela(seed):
    p = make_attention(NamedInit(seed, std=0.3), "attn", 8, heads=2, bias=True)
    return _block(rela, p, _rng(seed).standard_normal((4, 4, 8)), seed)


@_target("block")
def _da_block(seed):
    p = make_da_block(NamedInit(seed, std=0.3), "block", 8, heads=2)
    return _block(da_block, p, _rng(seed).standard_normal((4, 4, 8)), seed)


def check(name, seed=0, h=1e-5, samples=32):
    """Run one target; returns ``(report, tol, passed)``."""
    t = TARGETS[name]
    f, inputs, kink = t.build(seed)
    rep = D.gradcheck(f, inputs, h=h, samples=samples, seed=seed, kink_distance=kink)
    return rep, t.tol, rep.max_rel_error <= t.tol
