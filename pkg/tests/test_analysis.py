import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laformer import _kernels
from laformer import analysis as A
from laformer import model as M
from laformer.tensor import NonFiniteError


def test_identity_full_rank():
    assert A.numerical_rank(np.eye(8)) == 8
    assert np.allclose(A.spectrum(np.eye(8)), 1.0, atol=1e-15)


def test_outer_product_rank_one(rng):
    u, v = rng.standard_normal(20), rng.standard_normal(7)
    assert A.numerical_rank(np.outer(u, v)) == 1


def test_diagonal_spectrum():
    s = A.spectrum(np.diag([1.0, 3.0, 2.0]))
    assert np.allclose(s, [3, 2, 1], atol=1e-14)
    assert A.numerical_rank(np.diag([1.0, 3.0, 2e-7])) == 2
    assert A.numerical_rank(np.diag([1.0, 3.0, 2e-7]), rel_tol=1e-8) == 3


def test_orthogonal_all_ones(rng):
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    assert np.allclose(A.spectrum(q), 1.0, atol=1e-12)


def test_zero_matrix_rank_zero():
    assert A.numerical_rank(np.zeros((5, 3))) == 0


@pytest.mark.parametrize("shape", [(64, 16), (16, 64), (33, 33)])
def test_matches_gram_eigen_oracle(shape, rng):
    m = rng.standard_normal(shape)
    s = A.spectrum(m)
    g = m.T @ m if shape[0] >= shape[1] else m @ m.T
    ref = np.sqrt(np.clip(np.linalg.eigvalsh(g), 0, None))[::-1]
    assert s.shape == (min(shape),)
    assert np.allclose(s, ref, rtol=1e-10, atol=1e-10)
    assert abs(np.sum(s ** 2) - np.sum(m ** 2)) <= 1e-8 * np.sum(m ** 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_frobenius_identity_and_permutation_invariance(n, c, seed):
    r = np.random.default_rng(seed)
    m = r.standard_normal((n, c))
    s = A.spectrum(m)
    assert np.all(np.diff(s) <= 0)
    assert abs(np.sum(s ** 2) - np.sum(m ** 2)) <= 1e-8 * max(1.0, np.sum(m ** 2))
    sp = A.spectrum(m[r.permutation(n)])
    assert np.max(np.abs(sp - s)) <= 1e-10 * max(1.0, s[0])


def test_non_finite_rejected():
    m = np.ones((4, 4))
    m[1, 2] = np.nan
    with pytest.raises(NonFiniteError):
        A.spectrum(m)
    with pytest.raises(ValueError):
        A.spectrum(np.ones(4))
    with pytest.raises(ValueError):
        A.numerical_rank(np.eye(3), rel_tol=0)


def test_backend_parity(rng):
    m = rng.standard_normal((40, 12))
    out = {}
    for name in _kernels.available_backends():
        with _kernels.use_backend(name):
            out[name] = A.spectrum(m)
    ref = out["numpy"]
    for s in out.values():
        assert np.allclose(s, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("C", [8, 16, 48])
@pytest.mark.parametrize("psi", ["one_plus_elu", "relu"])
def test_attention_map_rank_bound(C, psi, rng):
    N = 256
    q, k = rng.standard_normal((N, C)), rng.standard_normal((N, C))
    ok, r = A.map_rank_bound_holds(q, k, psi)
    assert ok and r <= C


def test_rank_profile_entries_and_ceilings(rng):
    m = M.build(M.preset("test", mechanism="linear"))
    rep = A.rank_profile(m, rng.random((16, 16, 3)))
    assert len(rep.entries) == sum(m.config.blocks_per_level)
    assert [e.N for e in rep.entries] == [256, 64, 256]
    assert [e.C for e in rep.entries] == [16, 32, 16]
    assert all(e.ceiling == min(e.N, e.C) for e in rep.entries)
    assert rep.violations() == []
    rep2 = A.rank_profile(m, rng.random((16, 16, 3)), hook="block_output")
    assert rep2.hook == "block_output" and rep2.violations() == []
    with pytest.raises(ValueError):
        A.rank_profile(m, rng.random((16, 16, 3)), hook="nope")


def test_rank_profile_same_blocks_across_mechanisms(rng):
    img = rng.random((16, 16, 3))
    reps = {mech: A.rank_profile(M.build(M.preset("test", mechanism=mech)), img)
            for mech in M.MECHANISMS}
    shapes = {mech: [(e.block, e.N, e.C) for e in r.entries] for mech, r in reps.items()}
    assert len({tuple(v) for v in shapes.values()}) == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_paired_rela_at_least_linear(seed):
    lin, rela, ceiling = A.paired_attention_ranks(seed)
    assert ceiling == 48 and rela >= lin and rela <= ceiling


def test_paired_rejects_non_square_N():
    with pytest.raises(ValueError):
        A.paired_attention_ranks(0, N=250)


def test_report_outputs(tmp_path, rng):
    rep = A.rank_profile(M.build(M.preset("test")), rng.random((8, 8, 3)))
    rep.write_csv(tmp_path / "r.csv")
    rep.write_json(tmp_path / "r.json")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [int(r["rank"]) for r in rows] == rep.ranks
    assert set(rows[0]) == set(A.RankReport.CSV_FIELDS)
    d = json.load(open(tmp_path / "r.json"))
    assert d["threshold"] == 1e-6
    assert len(d["blocks"][0]["spectrum"]) == min(int(rows[0]["N"]), int(rows[0]["C"]))
