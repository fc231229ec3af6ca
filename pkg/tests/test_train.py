import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from laformer import diff as D
from laformer import model as M
from laformer import train as T
from laformer.tensor import ShapeError


# ------------------------------------------------------------------ metrics

def test_l1_trivial():
    assert T.l1_loss(np.ones((2, 3)), np.ones((2, 3))) == 0.0
    assert T.l1_loss(np.zeros(4), np.full(4, 0.5)) == 0.5


def test_l1_loop_oracle(rng):
    a, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 4, 5))
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += abs(x - y)
    assert abs(T.l1_loss(a, b) - total / a.size) <= 1e-14
    with pytest.raises(ShapeError):
        T.l1_loss(a, b[:2])


def test_l1_gradient_is_sign_over_n(rng):
    a = D.parameter(rng.standard_normal(6))
    b = rng.standard_normal(6)
    D.backward(T.l1_loss(a, b))
    assert np.array_equal(a.grad, np.sign(a.value - b) / 6)


def test_psnr_values(rng):
    x = rng.random((4, 4, 3))
    assert T.psnr(x, x) == 99.0
    assert T.psnr(np.zeros(10), np.full(10, 0.1)) == pytest.approx(20.0, abs=1e-12)
    y = x + rng.normal(0, 0.05, x.shape)
    mse = sum((p - q) ** 2 for p, q in zip(x.ravel(), y.ravel())) / x.size
    assert T.psnr(x, y) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)
    assert T.psnr(x, x + 1e-12) == 99.0  # capped
    with pytest.raises(ShapeError):
        T.psnr(x, x[:2])


def test_cosine_lr():
    assert T.cosine_lr(0, 2000) == 3e-4
    assert T.cosine_lr(2000, 2000) == 1e-6
    assert abs(T.cosine_lr(1000, 2000) - (3e-4 + 1e-6) / 2) <= 1e-12
    with pytest.raises(ValueError):
        T.cosine_lr(2001, 2000)
    with pytest.raises(ValueError):
        T.cosine_lr(-1, 2000)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5000), st.data())
def test_cosine_lr_monotone_and_bounded(total, data):
    s = data.draw(st.integers(0, total - 1))
    a, b = T.cosine_lr(s, total), T.cosine_lr(s + 1, total)
    assert 1e-6 <= b <= a <= 3e-4


# ------------------------------------------------------------------ optimiser

def _state(params, wd=0.0):
    return T.OptimState.for_params(params, weight_decay=wd)


def test_adamw_zero_grads_no_wd_keeps_params(rng):
    p = {"w": rng.standard_normal((3, 3))}
    before = p["w"].copy()
    st_ = _state(p)
    for _ in range(3):
        T.adamw_step(p, {"w": np.zeros((3, 3))}, st_, lr=1e-2)
    assert np.array_equal(p["w"], before)


def test_adamw_first_step_is_signed_lr(rng):
    p = {"w": rng.standard_normal(10)}
    before = p["w"].copy()
    g = rng.standard_normal(10)
    T.adamw_step(p, {"w": g}, _state(p), lr=1e-3)
    assert np.allclose(p["w"] - before, -1e-3 * np.sign(g), rtol=1e-6)


def test_adamw_matches_reference(rng):
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    p = {"w": p0.copy()}
    st_ = _state(p, wd=0.05)
    for g in grads:
        T.adamw_step(p, {"w": g}, st_, lr=0.01)
    for i in range(5):
        ref = O.adamw_reference(p0[i], [g[i] for g in grads], lr=0.01, wd=0.05)[-1]
        assert abs(p["w"][i] - ref) <= 1e-14
    assert st_.step == 3


def test_adamw_minimises_half_squared_norm(rng):
    p = {"w": rng.standard_normal(8)}
    st_ = _state(p, wd=1e-4)
    start = 0.5 * np.sum(p["w"] ** 2)
    for _ in range(200):
        T.adamw_step(p, {"w": p["w"].copy()}, st_, lr=0.05)
    assert 0.5 * np.sum(p["w"] ** 2) < 1e-2 * start


def test_adamw_single_step_toward_zero():
    p = {"w": np.array([1.0])}
    T.adamw_step(p, {"w": p["w"].copy()}, _state(p, wd=1e-4), lr=1e-3)  # grad of 0.5 p^2 is p
    assert 0.0 < p["w"][0] < 1.0


def test_adamw_refuses_non_finite(rng):
    p = {"a": rng.standard_normal(3), "b": rng.standard_normal(3)}
    before = {k: v.copy() for k, v in p.items()}
    st_ = _state(p)
    assert T.adamw_step(p, {"a": np.ones(3), "b": np.array([1.0, np.inf, 0.0])}, st_, lr=1.0) is False
    assert st_.refused == 1 and st_.step == 0
    for k in p:
        assert np.array_equal(p[k], before[k]) and not st_.m[k].any()


def test_adamw_shape_mismatch(rng):
    p = {"a": rng.standard_normal(3)}
    with pytest.raises(ShapeError):
        T.adamw_step(p, {"a": np.ones(4)}, _state(p), lr=1.0)


# ------------------------------------------------------------------ data

def test_task_deterministic_and_in_range():
    a, b = T.ToyTask(seed=3), T.ToyTask(seed=3)
    assert np.array_equal(a.clean(5), b.clean(5))
    for i in range(10):
        c = a.clean(i)
        assert c.shape == (48, 48, 3) and c.min() >= 0 and c.max() <= 1
    xa, ya = a.train_batch(7, 4)
    xb, yb = b.train_batch(7, 4)
    assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    assert xa.shape == (4, 32, 32, 3)
    assert not np.array_equal(a.clean(0), T.ToyTask(seed=4).clean(0))


def test_noise_statistics():
    task = T.ToyTask(sigma=0.1)
    x, y = task.val_set()
    r = x - y
    assert abs(r.std() - 0.1) < 0.005 and abs(r.mean()) < 0.005
    assert x.min() < 0 or x.max() > 1  # not clipped


def test_blur_task_is_deterministic():
    task = T.ToyTask(degradation="box_blur", blur_k=3)
    x1, _ = task.train_batch(0, 2)
    x2, _ = T.ToyTask(degradation="box_blur", blur_k=3).train_batch(0, 2)
    assert np.array_equal(x1, x2)


def test_box_blur_reference(rng):
    img = rng.random((6, 7, 2))
    out = T.box_blur(img, 3)
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="symmetric")
    ref = np.zeros_like(img)
    for y in range(6):
        for x in range(7):
            ref[y, x] = pad[y:y + 3, x:x + 3].mean(axis=(0, 1))
    assert np.allclose(out, ref, atol=1e-14)


def test_augment_pairs_match(rng):
    clean = rng.random((12, 12, 3))
    degraded = clean * 2.0
    for _ in range(20):
        c, d = T.augment(clean, degraded, rng, 8)
        assert c.shape == (8, 8, 3) and np.array_equal(d, 2.0 * c)


def test_dihedral_group():
    img = np.arange(2 * 3 * 1.0).reshape(2, 3, 1)
    outs = {T.dihedral(img, k).tobytes() + bytes(T.dihedral(img, k).shape) for k in range(8)}
    assert len(outs) == 8


def test_task_validation():
    with pytest.raises(ValueError):
        T.ToyTask(degradation="jpeg")
    with pytest.raises(ValueError):
        T.ToyTask(patch=64, image_size=48)


# ------------------------------------------------------------------ loop

def _small_task():
    return T.ToyTask(patch=16, image_size=24, n_train=8, n_val=4)


def test_zero_steps_empty_log():
    m, log = T.train_toy(M.preset("test"), steps=0)
    assert log.rows == [] and m.step == 0


def test_short_run_deterministic_and_logged(tmp_path):
    kw = dict(task=_small_task(), steps=6, batch_size=2, log_every=3)
    m1, l1 = T.train_toy(M.preset("test"), **kw)
    m2, l2 = T.train_toy(M.preset("test"), **kw)
    assert [r["step"] for r in l1.rows] == [0, 3, 6]
    table = lambda log: np.array([[r[k] for k in T.TrainLog.FIELDS] for r in log.rows])  # noqa: E731
    assert np.array_equal(table(l1), table(l2), equal_nan=True)
    for (_, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        assert np.array_equal(p.value, q.value)
    assert m1.step == 6 and l1.rows[-1]["lr"] == 1e-6
    l1.write_csv(tmp_path / "m.csv")
    assert open(tmp_path / "m.csv").readline().strip() == ",".join(T.TrainLog.FIELDS)


def test_training_reduces_loss():
    m, log = T.train_toy(M.preset("test"), task=_small_task(), steps=40, batch_size=4,
                         lr_max=2e-3, log_every=40)
    assert log.rows[-1]["val_l1"] < log.rows[0]["val_l1"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    with pytest.raises(T.DivergenceError):
        T.train_toy(M.preset("test"), task=_small_task(), steps=30, batch_size=2, lr_max=1e8)
