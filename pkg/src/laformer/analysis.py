"""Numerical rank of token feature matrices and per-block rank profiles."""
import csv
import dataclasses
import json
from typing import List

import numpy as np

from . import _kernels
from . import model as M
from .attention import attention_branch
from .blocks import make_attention
from .diff import no_grad
from .init import NamedInit
from .tensor import ACTIVATIONS, NonFiniteError

DEFAULT_REL_TOL = 1e-6
HOOKS = ("attention_output", "block_output")


def spectrum(m):
    """Descending singular values of a 2-D matrix (one-sided Jacobi)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"spectrum expects a matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise NonFiniteError("spectrum: matrix has non-finite entries")
    return _kernels.jacobi_singular_values(m)


def numerical_rank(m, rel_tol=DEFAULT_REL_TOL):
    """Number of singular values above ``rel_tol * sigma_1``."""
    if not rel_tol > 0:
        raise ValueError("rel_tol must be positive")
    return rank_from_spectrum(spectrum(m), rel_tol)


def rank_from_spectrum(s, rel_tol=DEFAULT_REL_TOL):
    if len(s) == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def attention_map(q, k, psi="one_plus_elu"):
    """The implicit N x N map psi(Q) psi(K)^T of linear attention (analysis only)."""
    f = ACTIVATIONS[psi]
    return f(np.asarray(q)) @ f(np.asarray(k)).T


@dataclasses.dataclass
class RankEntry:
    block: int
    N: int
    C: int
    rank: int
    ceiling: int
    sigma_max: float
    sigma_min: float
    spectrum: np.ndarray = dataclasses.field(repr=False, default=None)


@dataclasses.dataclass
class RankReport:
    entries: List[RankEntry]
    threshold: float
    hook: str
    mechanism: str = ""

    CSV_FIELDS = ("block", "N", "C", "rank", "ceiling", "sigma_max", "sigma_min")

    @property
    def ranks(self):
        return [e.rank for e in self.entries]

    def violations(self):
        return [e for e in self.entries if not 0 <= e.rank <= e.ceiling]

    def to_dict(self, with_spectra=False):
        rows = []
        for e in self.entries:
            row = {f: getattr(e, f) for f in self.CSV_FIELDS}
            if with_spectra:
                row["spectrum"] = [float(x) for x in e.spectrum]
            rows.append(row)
        return {"mechanism": self.mechanism, "hook": self.hook,
                "threshold": self.threshold, "blocks": rows}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_FIELDS)
            for e in self.entries:
                w.writerow([e.block, e.N, e.C, e.rank, e.ceiling,
                            repr(float(e.sigma_max)), repr(float(e.sigma_min))])

    def write_json(self, path, with_spectra=True):
        with open(path, "w") as fh:
            json.dump(self.to_dict(with_spectra), fh, indent=2)


def _entry(block, m, rel_tol):
    s = spectrum(m)
    N, C = m.shape
    return RankEntry(block=block, N=N, C=C, rank=rank_from_spectrum(s, rel_tol),
                     ceiling=min(N, C), sigma_max=float(s[0]) if len(s) else 0.0,
                     sigma_min=float(s[-1]) if len(s) else 0.0, spectrum=s)


def rank_profile(model, img, hook="attention_output", rel_tol=DEFAULT_REL_TOL):
    """Numerical rank of one tensor per DA block during a single forward pass.

    ``attention_output`` is the token mixer's output before the residual add;
    ``block_output`` is the block's final output. Batched input profiles the
    first image only.
    """
    if hook not in HOOKS:
        raise ValueError(f"hook must be one of {HOOKS}")
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    taps = []
    with no_grad():
        M.forward(model, img, taps=taps)
    entries = []
    for i, t in enumerate(taps):
        m = t[hook]
        entries.append(_entry(i, m.reshape(-1, m.shape[-1]), rel_tol))
    return RankReport(entries, rel_tol, hook, model.config.mechanism)


def paired_attention_ranks(seed, N=256, C=48, rel_tol=1e-8, kernel=5, psi="one_plus_elu"):
    """Rank of a linear vs a RELA attention output on identical weights and input.

    Both branches share Q/K/V projections (name-keyed init) and one random
    sqrt(N) x sqrt(N) x C input. Returns ``(linear_rank, rela_rank, ceiling)``.
    """
    side = int(round(np.sqrt(N)))
    if side * side != N:
        raise ValueError("N must be a perfect square")
    init = NamedInit(seed)
    x = np.random.default_rng([seed, 1]).standard_normal((side, side, C))
    ranks = []
    for mech in ("linear", "rela"):
        p = make_attention(init, "attn", C, psi=psi, mechanism=mech, kernel=kernel)
        with no_grad():
            y = attention_branch(x, p)
        ranks.append(numerical_rank(y.reshape(N, C), rel_tol))
    return ranks[0], ranks[1], min(N, C)


def map_rank_bound_holds(q, k, psi="one_plus_elu", rel_tol=DEFAULT_REL_TOL):
    """True when numerical_rank(psi(Q) psi(K)^T) <= min(N, C)."""
    r = numerical_rank(attention_map(q, k, psi), rel_tol)
    return r <= min(q.shape), r

