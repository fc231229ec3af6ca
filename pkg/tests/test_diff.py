import numpy as np
import pytest

from laformer import diff as D
from laformer import gradtargets as G
from laformer import model as M
from laformer.tensor import NonFiniteError, ShapeError


def test_grad_of_sum_is_ones(rng):
    x = D.parameter(rng.standard_normal((3, 4)))
    D.backward(D.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_grad_of_square(rng):
    v = rng.standard_normal((5,))
    x = D.parameter(v)
    D.backward(D.sum(D.mul(x, x)))
    assert np.array_equal(x.grad, 2 * v)


def test_fan_out_accumulates_exactly(rng):
    v = rng.standard_normal((4, 3))
    a = D.parameter(v)
    D.backward(D.sum(D.gelu(a)))
    b = D.parameter(v)
    g = D.gelu(b)
    D.backward(D.sum(D.add(g, g)))
    assert np.array_equal(b.grad, 2 * a.grad)


def test_shared_subgraph_visited_once(rng):
    # diamond: y = (x*2) used by two branches; each node processed once
    x = D.parameter(rng.standard_normal(3))
    y = D.scale(x, 2.0)
    z = D.add(D.mul(y, y), y)
    D.backward(D.sum(z))
    assert np.allclose(x.grad, 2 * (2 * y.value + 1))
    assert y.grad.shape == y.shape


def test_grad_shapes_match_values(rng):
    m = M.build(M.preset("test"))
    out = M.forward(m, rng.random((1, 8, 8, 3)))
    D.backward(D.mean(out))
    for name, p in m.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name


def test_non_scalar_loss_rejected(rng):
    x = D.parameter(rng.standard_normal(3))
    with pytest.raises(ShapeError):
        D.backward(D.mul(x, 2.0))


def test_no_grad_records_nothing(rng):
    x = D.parameter(rng.standard_normal(3))
    with D.no_grad():
        y = D.exp(x)
    assert not y.requires_grad and y.parents == ()


def test_abs_subgradient_zero():
    x = D.parameter(np.array([0.0, -2.0, 3.0]))
    D.backward(D.sum(D.abs(x)))
    assert np.array_equal(x.grad, [0.0, -1.0, 1.0])


def test_gradcheck_half_squared_norm(rng):
    rep = D.gradcheck(lambda x: D.scale(D.sum(D.mul(x, x)), 0.5), rng.standard_normal((4, 5)))
    assert rep.max_rel_error <= 1e-7


def test_gradcheck_gelu(rng):
    rep = D.gradcheck(lambda x: D.sum(D.gelu(x)), rng.standard_normal((6, 6)))
    assert rep.max_rel_error <= 1e-6


def test_gradcheck_detects_wrong_gradient(rng):
    def bad_square(a):
        a = D.as_node(a)
        return D._make(a.value ** 2, "bad", [(a, lambda g: g * a.value)])  # missing factor 2
    rep = D.gradcheck(lambda x: D.sum(bad_square(x)), rng.standard_normal(8) + 3)
    assert rep.max_rel_error > 0.3


def test_gradcheck_kink_sampling_skips_near_zero():
    x = np.array([1e-7, -2e-6, 0.5, -0.7])
    rep = D.gradcheck(lambda n: D.sum(D.relu(n)), x, samples=4,
                      kink_distance=lambda name, a: np.abs(a))
    assert rep.params["x"].sampled == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_non_finite_raises():
    with pytest.raises(NonFiniteError):
        D.gradcheck(lambda x: D.sum(D.div(1.0, x)), np.array([1e-300, 1.0]), h=1e-5)


def test_relative_error_definition():
    assert D.relative_error(1.0, 1.0) == 0
    assert D.relative_error(0.0, 0.0) == 0
    assert D.relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert D.relative_error(1e-12, 0.0) == pytest.approx(1e-4)


@pytest.mark.parametrize("name", [n for n, t in G.TARGETS.items() if t.family == "primitive"])
def test_every_primitive_gradient(name):
    rep, tol, ok = G.check(name, samples=64)
    assert ok, (name, rep.to_dict())


@pytest.mark.parametrize("name", [n for n, t in G.TARGETS.items() if t.family == "block"])
def test_block_gradients(name):
    rep, tol, ok = G.check(name, samples=64)
    assert ok, (name, rep.to_dict())


def test_da_block_with_l1_loss_gradcheck(rng):
    from laformer.blocks import da_block, make_da_block
    from laformer.init import NamedInit
    p = make_da_block(NamedInit(3, std=0.3), "b", 8, heads=2)
    x = rng.standard_normal((4, 4, 8))
    target = rng.standard_normal((4, 4, 8))
    names = [n for n, _ in D.named_parameters(p)]
    inputs = {"x": x, **{n: v.value for n, v in D.named_parameters(p)}}

    def f(nodes):
        q = D.rebind(p, {n: nodes[n] for n in names})
        return D.mean(D.abs(D.sub(da_block(nodes["x"], q), target)))

    # residuals against a random target are O(1), far from the L1 kink at 0
    rep = D.gradcheck(f, inputs, samples=64)
    assert rep.max_rel_error <= 1e-4


def test_op_counter_matches_analytic_model_count(rng):
    m = M.build(M.preset("test"))
    img = rng.random((16, 16, 3))
    with D.no_grad(), D.count_ops() as c:
        M.forward(m, img)
    assert (c.macs, c.flops) == M.count_flops(m, 16, 16)
    with D.count_ops() as c2:
        M.forward(m, img)
    assert (c2.macs, c2.flops) == (c.macs, c.flops)
