"""Toy-scale restoration training: procedural data, L1 loss, AdamW, cosine decay."""
import csv
import dataclasses
import math
import time
from typing import Dict, List

import numpy as np
from scipy.ndimage import uniform_filter

from . import diff as D
from . import model as M
from .diff import node_or_array
from .tensor import NonFiniteError, ShapeError

PSNR_SENTINEL = 99.0


class DivergenceError(FloatingPointError):
    pass


# ------------------------------------------------------------------ metrics

@node_or_array
def l1_loss(pred, target):
    """Mean absolute error."""
    if np.shape(D.as_node(pred).value) != np.shape(D.as_node(target).value):
        raise ShapeError(f"l1_loss: shapes {D.as_node(pred).shape} and {D.as_node(target).shape} differ")
    return D.mean(D.abs(D.sub(pred, target)))


def psnr(pred, target, peak=1.0):
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"psnr: shapes {pred.shape} and {target.shape} differ")
    mse = np.mean((pred - target) ** 2)
    if mse == 0:
        return PSNR_SENTINEL
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_SENTINEL))


def cosine_lr(step, total, lr_max=3e-4, lr_min=1e-6):
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step == 0:
        return lr_max
    if step == total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


# ------------------------------------------------------------------ optimiser

@dataclasses.dataclass
class OptimState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    refused: int = 0

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adamw_step(params, grads, state, lr, wd=None):
    """One AdamW update of ``params`` (name -> array, modified in place).

    Returns False, without touching anything but ``state.refused``, when a
    gradient is non-finite.
    """
    wd = state.weight_decay if wd is None else wd
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"adamw_step: shape mismatch for {k!r}")
        if not np.isfinite(g).all():
            state.refused += 1
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if wd:
            p *= 1.0 - lr * wd
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


# ------------------------------------------------------------------ data

def gaussian_noise(img, sigma, rng):
    return img + sigma * rng.standard_normal(img.shape)


def box_blur(img, k):
    size = (k, k, 1) if img.ndim == 3 else (1, k, k, 1)
    return uniform_filter(img, size=size, mode="reflect")


def dihedral(img, code):
    """One of the 8 rotations/flips of the spatial axes (-3, -2)."""
    out = np.rot90(img, code % 4, axes=(-3, -2))
    return out[..., ::-1, :] if code >= 4 else out


def augment(clean, degraded, rng, patch):
    """Identical random crop + dihedral transform for both images."""
    H, W = clean.shape[:2]
    y = rng.integers(0, H - patch + 1)
    x = rng.integers(0, W - patch + 1)
    code = int(rng.integers(0, 8))
    crop = (slice(y, y + patch), slice(x, x + patch))
    return dihedral(clean[crop], code), dihedral(degraded[crop], code)


def procedural_image(rng, size):
    """Convex mixture of a colour gradient, a checkerboard and filtered noise."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    c0, c1 = rng.random(3), rng.random(3)
    gradient = c0 + ramp[..., None] * (c1 - c0)

    period = int(rng.integers(4, 13))
    oy, ox = rng.integers(0, period, 2)
    cells = ((np.arange(size)[:, None] + oy) // period + (np.arange(size)[None] + ox) // period) % 2
    a, b = rng.random(3), rng.random(3)
    checker = np.where(cells[..., None] == 1, a, b)

    k = int(rng.choice([3, 5, 7]))
    noise = box_blur(rng.standard_normal((size, size, 3)), k)
    noise = (noise - noise.min()) / max(np.ptp(noise), 1e-12)

    w = rng.dirichlet([1.0, 1.0, 1.0])
    return w[0] * gradient + w[1] * checker + w[2] * noise


@dataclasses.dataclass
class ToyTask:
    """Seeded procedural dataset; image ``i`` depends only on ``(seed, i)``."""
    degradation: str = "gaussian_noise"
    sigma: float = 0.1
    blur_k: int = 3
    patch: int = 32
    image_size: int = 48
    n_train: int = 128
    n_val: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.degradation not in ("gaussian_noise", "box_blur"):
            raise ValueError("degradation must be gaussian_noise or box_blur")
        if self.patch > self.image_size:
            raise ValueError("patch larger than image")
        self._cache = {}

    def clean(self, index):
        if index not in self._cache:
            rng = np.random.default_rng([self.seed, 0, index])
            self._cache[index] = procedural_image(rng, self.image_size)
        return self._cache[index]

    def degrade(self, img, rng):
        if self.degradation == "gaussian_noise":
            return gaussian_noise(img, self.sigma, rng)
        return box_blur(img, self.blur_k)

    def train_batch(self, step, batch_size):
        """(degraded, clean) batch for ``step``; fresh noise and augmentation each step."""
        rng = np.random.default_rng([self.seed, 1, step])
        xs, ys = [], []
        for _ in range(batch_size):
            clean = self.clean(int(rng.integers(0, self.n_train)))
            c, d = augment(clean, self.degrade(clean, rng), rng, self.patch)
            ys.append(c)
            xs.append(d)
        return np.stack(xs), np.stack(ys)

    def val_set(self):
        """Fixed centre crops of held-out images with fixed degradations."""
        if "val" not in self._cache:
            o = (self.image_size - self.patch) // 2
            xs, ys = [], []
            for i in range(self.n_val):
                clean = self.clean(self.n_train + i)[o:o + self.patch, o:o + self.patch]
                xs.append(self.degrade(clean, np.random.default_rng([self.seed, 2, i])))
                ys.append(clean)
            self._cache["val"] = (np.stack(xs), np.stack(ys))
        return self._cache["val"]

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


# ------------------------------------------------------------------ loop

@dataclasses.dataclass
class TrainLog:
    rows: List[dict] = dataclasses.field(default_factory=list)
    input_val_l1: float = float("nan")
    input_val_psnr: float = float("nan")
    refused_steps: int = 0
    seconds: float = 0.0

    FIELDS = ("step", "lr", "train_l1", "val_l1", "val_psnr")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for r in self.rows:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in self.FIELDS[1:]])

    def metrics(self):
        return [{k: r[k] for k in self.FIELDS} for r in self.rows]


def evaluate(model, task, batch=16):
    x, y = task.val_set()
    with D.no_grad():
        pred = np.concatenate([M.forward(model, x[i:i + batch]) for i in range(0, len(x), batch)])
    return float(np.mean(np.abs(pred - y))), psnr(pred, y)


def train_toy(config, task=None, steps=2000, seed=0, batch_size=8, lr_max=3e-4, lr_min=1e-6,
              weight_decay=1e-4, log_every=100, on_log=None):
    """Train a freshly built model; returns ``(model, TrainLog)``.

    Rows (step, lr, train_l1, val_l1, val_psnr) are logged at step 0 and every
    ``log_every`` steps through ``steps``; ``train_l1`` averages the steps
    since the previous row.
    """
    task = task or ToyTask(seed=seed)
    model = M.build(config, seed=seed)
    log = TrainLog()
    if steps == 0:
        return model, log
    xv, yv = task.val_set()
    log.input_val_l1 = float(np.mean(np.abs(xv - yv)))
    log.input_val_psnr = psnr(xv, yv)
    named = model.named_parameters()
    params = {k: p.value for k, p in named}
    state = OptimState.for_params(params, weight_decay=weight_decay)
    t0 = time.perf_counter()

    def record(step, lr, train_l1):
        vl1, vpsnr = evaluate(model, task)
        row = {"step": step, "lr": lr, "train_l1": train_l1, "val_l1": vl1, "val_psnr": vpsnr}
        log.rows.append(row)
        if on_log:
            on_log(row)

    record(0, cosine_lr(0, steps, lr_max, lr_min), float("nan"))
    window = []
    for step in range(steps):
        lr = cosine_lr(step, steps, lr_max, lr_min)
        x, y = task.train_batch(step, batch_size)
        for _, p in named:
            p.grad = None
        try:
            loss = l1_loss(M.forward(model, x), y)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite activation at step {step} (lr={lr:.3g}): {exc}") from exc
        if not math.isfinite(float(loss.value)):
            raise DivergenceError(f"loss became {float(loss.value)} at step {step} (lr={lr:.3g})")
        D.backward(loss)
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.value) for k, p in named}
        if not adamw_step(params, grads, state, lr):
            bad = next(k for k, g in grads.items() if not np.isfinite(g).all())
            log.refused_steps = state.refused
            if state.refused > 10:
                raise DivergenceError(f"repeated non-finite gradients (last in {bad!r}) at step {step}")
        window.append(float(loss.value))
        done = step + 1
        if done % log_every == 0 or done == steps:
            record(done, cosine_lr(done, steps, lr_max, lr_min), float(np.mean(window)))
            window = []
    model.step = steps
    log.refused_steps = state.refused
    log.seconds = time.perf_counter() - t0
    return model, log
