import csv
import json
import os

import numpy as np
import pytest

from laformer import cli
from laformer import gradtargets as G
from laformer import model as M
from laformer.images import read_image, to_uint8, write_image

FAST_BENCH = ["--sizes", "128..2048", "--C", "8"]


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _cfg(out):
    return json.load(open(os.path.join(out, "effective_config.json")))


def test_parse_sizes():
    assert cli.parse_sizes("1024..8192") == [1024, 2048, 4096, 8192]
    assert cli.parse_sizes("3,5,7") == [3, 5, 7]
    assert cli.parse_sizes([1, "2"]) == [1, 2]
    with pytest.raises(cli.UsageError):
        cli.parse_sizes("8..2")
    with pytest.raises(cli.UsageError):
        cli.parse_sizes("a,b")


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        _run("bench", "--mechanism", "cosine", "--out", tmp_path)
    assert e.value.code == 2
    assert _run("bench", "--set", "nonsense=1", "--out", tmp_path) == 2
    assert _run("bench", "--set", "reps=2", *FAST_BENCH, "--out", tmp_path) == 2
    assert _run("grad-check", "--target", "no_such_op", "--out", tmp_path) == 2
    assert _run("infer", "--out", tmp_path) == 2
    (tmp_path / "bad.json").write_text("[1, 2]")
    assert _run("bench", "--config", tmp_path / "bad.json", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "nonsense" in err and "no_such_op" in err


def test_bench_outputs_and_replay(tmp_path):
    out1 = tmp_path / "a"
    assert _run("bench", *FAST_BENCH, "--mechanism", "both", "--out", out1) == 0
    rows = list(csv.DictReader(open(out1 / "bench_linear.csv")))
    assert [int(r["N"]) for r in rows] == [128, 256, 512, 1024, 2048]
    assert {r["mechanism"] for r in rows} == {"linear"}
    assert (out1 / "bench_softmax.csv").exists() and (out1 / "bench_linear.dat").exists()
    summary = json.load(open(out1 / "bench_summary.json"))
    assert set(summary) == {"linear", "softmax"}
    # replaying the effective config reproduces the configuration
    out2 = tmp_path / "b"
    assert _run("bench", "--config", out1 / "effective_config.json", "--out", out2) == 0
    c1, c2 = _cfg(out1), _cfg(out2)
    c1.pop("out"), c2.pop("out")
    assert c1 == c2
    a = list(csv.DictReader(open(out1 / "bench_linear.csv")))
    b = list(csv.DictReader(open(out2 / "bench_linear.csv")))
    assert [(r["N"], r["macs"], r["aux_bytes"]) for r in a] == [(r["N"], r["macs"], r["aux_bytes"]) for r in b]


def test_bench_expect_slope_failure(tmp_path):
    assert _run("bench", *FAST_BENCH, "--set", "expect_slope=[5,6]", "--out", tmp_path) == 1


def test_config_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"reps": 7, "warmup": 3, "C": 4}))
    assert _run("bench", *FAST_BENCH, "--config", tmp_path / "c.json", "--reps", 6,
                "--set", "warmup=4", "--out", tmp_path) == 0
    c = _cfg(tmp_path)
    assert (c["reps"], c["warmup"], c["C"]) == (6, 4, 8)


def test_output_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert _run("grad-check", "--target", "relu") == 0
    assert (tmp_path / "env" / "grad_check.json").exists()


def test_rank_profile(tmp_path):
    assert _run("rank-profile", "--set", "model.base_channels=16", "--out", tmp_path) == 0
    blocks = {}
    for mech in ("softmax", "linear", "rela"):
        rows = list(csv.DictReader(open(tmp_path / f"rank_{mech}.csv")))
        blocks[mech] = [(r["block"], r["N"], r["C"], r["ceiling"]) for r in rows]
        assert all(int(r["rank"]) <= int(r["ceiling"]) for r in rows)
    assert blocks["softmax"] == blocks["linear"] == blocks["rela"]
    assert json.load(open(tmp_path / "rank_summary.json"))["bound_violations"] == 0


def test_grad_check_single_and_blocks(tmp_path):
    assert _run("grad-check", "--target", "rela", "--out", tmp_path) == 0
    rep = json.load(open(tmp_path / "grad_check.json"))
    assert rep["rela"]["passed"] and rep["rela"]["tolerance"] == 1e-4
    assert _run("grad-check", "--target", "primitives", "--out", tmp_path) == 0
    rep = json.load(open(tmp_path / "grad_check.json"))
    assert len(rep) == sum(t.family == "primitive" for t in G.TARGETS.values())


def test_rerun_from_effective_config_is_identical(tmp_path):
    assert _run("grad-check", "--target", "blocks", "--seed", 3, "--out", tmp_path / "a") == 0
    assert _run("grad-check", "--config", tmp_path / "a" / "effective_config.json",
                "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "grad_check.json").read_text()
    assert a == (tmp_path / "b" / "grad_check.json").read_text()
    assert _cfg(tmp_path / "b")["seed"] == 3


def test_grad_check_failure_exits_1(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(G, "PRIMITIVE_TOL", 1e-30)
    assert _run("grad-check", "--target", "gelu", "--out", tmp_path) == 1
    assert "worst element" in capsys.readouterr().err


def test_train_toy_and_infer(tmp_path):
    out = tmp_path / "train"
    assert _run("train-toy", "--steps", 3, "--set", "batch_size=2", "--set", "log_every=3",
                "--set", "task.n_train=4", "--set", "task.n_val=2", "--out", out) == 0
    assert (out / "checkpoint.laft").exists()
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [int(r["step"]) for r in rows] == [0, 3]
    img = np.random.default_rng(0).random((12, 12, 3))
    write_image(tmp_path / "in.ppm", img)
    assert _run("infer", "--checkpoint", out / "checkpoint.laft", "--input", tmp_path / "in.ppm",
                "--output", "r.ppm", "--out", tmp_path) == 0
    assert read_image(tmp_path / "r.ppm").shape == (12, 12, 3)


def _identity_checkpoint(path, **overrides):
    m = M.build(M.preset("test", **overrides))
    m.out_w.value[:] = 0
    M.save(m, path)
    return path


def test_infer_identity_is_pixel_exact(tmp_path):
    ck = _identity_checkpoint(tmp_path / "id.laft")
    img = np.random.default_rng(1).random((16, 20, 3))
    write_image(tmp_path / "in.ppm", img)
    assert _run("infer", "--checkpoint", ck, "--input", tmp_path / "in.ppm", "--output", "o.ppm",
                "--out", tmp_path) == 0
    assert np.array_equal(to_uint8(read_image(tmp_path / "o.ppm")), to_uint8(img))


@pytest.mark.parametrize("levels,side,padded", [(2, 31, 32), (3, 30, 32), (2, 30, 30)])
def test_infer_pads_and_crops(tmp_path, capsys, levels, side, padded):
    bpl = [1] * (2 * levels - 1)
    ck = _identity_checkpoint(tmp_path / "id.laft", levels=levels, blocks_per_level=bpl)
    img = np.random.default_rng(2).random((side, side, 3))
    write_image(tmp_path / "in.ppm", img)
    assert _run("infer", "--checkpoint", ck, "--input", tmp_path / "in.ppm", "--output", "o.ppm",
                "--out", tmp_path) == 0
    assert f"padded to {padded}x{padded}" in capsys.readouterr().out
    out = read_image(tmp_path / "o.ppm")
    assert out.shape == (side, side, 3)
    assert np.array_equal(to_uint8(out), to_uint8(img))


def test_reflect_pad():
    img = np.arange(5 * 3 * 1.0).reshape(5, 3, 1)
    p, hw = cli.reflect_pad(img, 4)
    assert p.shape == (8, 4, 1) and hw == (5, 3)
    assert np.array_equal(p[:5, :3], img)
    assert np.array_equal(p[5, :3], img[3]) and np.array_equal(p[:5, 3], img[:, 1])


def test_infer_bad_inputs(tmp_path):
    (tmp_path / "junk.laft").write_bytes(b"not a checkpoint")
    write_image(tmp_path / "in.ppm", np.zeros((8, 8, 3)))
    assert _run("infer", "--checkpoint", tmp_path / "junk.laft", "--input", tmp_path / "in.ppm",
                "--out", tmp_path) == 1
    ck = _identity_checkpoint(tmp_path / "id.laft")
    (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\n\x00")
    assert _run("infer", "--checkpoint", ck, "--input", tmp_path / "bad.ppm", "--out", tmp_path) == 1
