"""Wall-clock scaling of attention kernels and log-log exponent fits."""
import contextlib
import csv
import dataclasses
import json
import time
from typing import List, Optional

import numpy as np

from . import _kernels
from .attention import linear_attention_cost, softmax_attention_cost

DEFAULT_SIZES = (1024, 2048, 4096, 8192, 16384, 32768, 65536)
BENCH_MECHANISMS = ("linear", "softmax")
BOOTSTRAP_RESAMPLES = 1000


class BenchError(ValueError):
    pass


# ------------------------------------------------------------------ fitting

@dataclasses.dataclass
class Fit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float

    def to_dict(self):
        return dataclasses.asdict(self)


def _slope_intercept(x, y):
    xm = x.mean()
    dx = x - xm
    slope = (dx @ (y - y.mean())) / (dx @ dx)
    return slope, y.mean() - slope * xm


def fit_exponent(points, resamples=BOOTSTRAP_RESAMPLES, seed=0):
    """Least squares on (log N, log t) with a 95% percentile bootstrap interval."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
        raise BenchError("fit_exponent needs at least 4 (N, t) points")
    if not np.all(pts > 0) or not np.isfinite(pts).all():
        raise BenchError("fit_exponent needs positive, finite N and t")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(x) == 0:
        raise BenchError("fit_exponent needs at least two distinct N")
    slope, intercept = _slope_intercept(x, y)
    rng = np.random.default_rng(seed)
    boot = []
    while len(boot) < resamples:
        idx = rng.integers(0, len(x), len(x))
        if np.ptp(x[idx]) == 0:
            continue  # degenerate resample: every draw hit the same N
        boot.append(_slope_intercept(x[idx], y[idx])[0])
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return Fit(float(slope), float(intercept), float(lo), float(hi))


# ------------------------------------------------------------------ timing

@dataclasses.dataclass
class BenchPoint:
    N: int
    t_median_ns: float
    macs: int
    aux_bytes: int
    capped: bool = False


@dataclasses.dataclass
class BenchResult:
    mechanism: str
    C: int
    points: List[BenchPoint]
    reps: int
    warmup: int
    fit: Optional[Fit]
    workers: int = 1
    backend: str = ""
    dtype: str = ""

    CSV_FIELDS = ("mechanism", "N", "C", "t_median_ns", "macs", "aux_bytes")

    @property
    def sizes(self):
        return [p.N for p in self.points]

    def timed(self):
        return [(p.N, p.t_median_ns) for p in self.points if not p.capped]

    def to_dict(self):
        return {"mechanism": self.mechanism, "C": self.C, "reps": self.reps,
                "warmup": self.warmup, "workers": self.workers, "backend": self.backend,
                "dtype": self.dtype, "fit": self.fit.to_dict() if self.fit else None,
                "points": [dataclasses.asdict(p) for p in self.points]}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_FIELDS)
            for p in self.points:
                t = "capped" if p.capped else f"{p.t_median_ns:.0f}"
                w.writerow([self.mechanism, p.N, self.C, t, p.macs, p.aux_bytes])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_dat(self, path):
        """gnuplot-friendly columns: N, seconds, macs."""
        with open(path, "w") as fh:
            fh.write(f"# {self.mechanism} C={self.C} backend={self.backend}\n")
            fh.write("# N seconds macs\n")
            for p in self.points:
                if not p.capped:
                    fh.write(f"{p.N} {p.t_median_ns * 1e-9:.9e} {p.macs}\n")


def perf_timer(fn, N):
    t0 = time.perf_counter_ns()
    fn()
    return (time.perf_counter_ns() - t0) * 1e-9


@contextlib.contextmanager
def thread_limit(workers):
    """Pin BLAS to ``workers`` threads when threadpoolctl is available."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=workers):
        yield


def analytic_macs(mechanism, N, C):
    if mechanism == "linear":
        return linear_attention_cost(N, C)[0]
    if mechanism == "softmax":
        return softmax_attention_cost(N, C)[0]
    raise BenchError(f"unknown mechanism {mechanism!r}; choose from {BENCH_MECHANISMS}")


def _kernel(mechanism):
    if mechanism == "linear":
        return lambda q, k, v: _kernels.linear_attention(q, k, v)
    return lambda q, k, v: _kernels.softmax_attention(q, k, v)


def bench_attention(mechanism, sizes=DEFAULT_SIZES, C=48, reps=5, warmup=2, seed=0,
                    dtype="float32", timer=perf_timer, workers=1):
    """Median-of-``reps`` time of one single-head attention call per N.

    Inputs are drawn once per N from ``seed``. ``timer(fn, N)`` returns
    seconds; inject a synthetic one to test the fit. A MemoryError at some N
    is recorded as a capped point and ends the sweep.
    """
    if mechanism not in BENCH_MECHANISMS:
        raise BenchError(f"unknown mechanism {mechanism!r}; choose from {BENCH_MECHANISMS}")
    sizes = [int(n) for n in sizes]
    if reps < 5 or warmup < 2:
        raise BenchError("need reps >= 5 and warmup >= 2")
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise BenchError("sizes must be positive and strictly increasing")
    if sizes[-1] < 10 * sizes[0]:
        raise BenchError("sizes must span at least one decade")
    run = _kernel(mechanism)
    points = []
    with thread_limit(workers):
        for N in sizes:
            macs = analytic_macs(mechanism, N, C)
            try:
                rng = np.random.default_rng([seed, N])
                q, k, v = (rng.standard_normal((N, C)).astype(dtype) for _ in range(3))
                with _kernels.track_allocations() as tracker:
                    fn = lambda: run(q, k, v)  # noqa: E731
                    for _ in range(warmup):
                        timer(fn, N)
                    times = [timer(fn, N) for _ in range(reps)]
            except MemoryError:
                points.append(BenchPoint(N, float("nan"), macs, 0, capped=True))
                break
            t = float(np.median(times))
            if not t > 0:
                raise BenchError(f"non-positive timing at N={N}")
            points.append(BenchPoint(N, t * 1e9, macs, tracker.peak_bytes))
    timed = [(p.N, p.t_median_ns) for p in points if not p.capped]
    fit = fit_exponent(timed) if len(timed) >= 4 else None
    return BenchResult(mechanism, C, points, reps, warmup, fit, workers,
                       _kernels.get_backend(), str(np.dtype(dtype)))


def compare_backends(sizes=DEFAULT_SIZES, C=48, reps=5, warmup=2, seed=0, dtype="float32"):
    """Linear attention timings under each available kernel backend."""
    out = {}
    for name in _kernels.available_backends():
        with _kernels.use_backend(name):
            out[name] = bench_attention("linear", sizes, C, reps, warmup, seed, dtype)
    return out
