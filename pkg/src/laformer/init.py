"""Deterministic, name-keyed parameter initialisation.

Each parameter draws from its own stream seeded by ``(seed, crc32(name))`` so
two models that differ only by an optional sub-module (e.g. the RELA
depthwise kernel) share every common weight bit for bit.
"""
import zlib

import numpy as np

from .diff import parameter
from .tensor import default_dtype


class NamedInit:
    def __init__(self, seed=0, std=0.02, dtype=None):
        self.seed = int(seed)
        self.std = std
        self.dtype = np.dtype(dtype or default_dtype())

    def rng(self, name):
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def __call__(self, name, shape, kind="trunc_normal"):
        shape = tuple(int(s) for s in shape)
        if kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        elif kind == "normal":
            value = self.rng(name).normal(0.0, self.std, size=shape)
        elif kind == "trunc_normal":
            value = truncated_normal(self.rng(name), shape, self.std)
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        return parameter(value.astype(self.dtype), name=name)


def truncated_normal(rng, shape, std, bound=2.0):
    """Normal(0, std) resampled until every draw lies within +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out
