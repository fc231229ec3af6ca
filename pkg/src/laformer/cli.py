"""Command-line entry point: ``laformer {bench,rank-profile,grad-check,train-toy,infer}``.

Every run resolves one flat-ish JSON config (defaults < --config file <
flags < --set key=value), writes it to ``<out>/effective_config.json`` and can
be replayed with ``--config <out>/effective_config.json``. Exit codes: 0
success, 1 check or runtime failure, 2 usage error.
"""
import argparse
import copy
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OUTPUT_ENV = "LAFORMER_OUTPUT_DIR"

DEFAULTS = {
    "bench": {
        "mechanism": "linear", "sizes": [1024, 2048, 4096, 8192, 16384, 32768, 65536],
        "C": 48, "reps": 5, "warmup": 2, "seed": 0, "dtype": "float32", "workers": 1,
        "backend": None, "compare_backends": False, "expect_slope": None,
    },
    "rank-profile": {
        "mechanisms": ["softmax", "linear", "rela"], "preset": "test",
        "model": {"base_channels": 48}, "image_size": 16, "input": None,
        "hook": "attention_output", "rel_tol": 1e-6, "seed": 0,
    },
    "grad-check": {"target": "all", "seed": 0, "h": 1e-5, "samples": 32},
    "train-toy": {
        "preset": "test", "model": {}, "steps": 2000, "seed": 0, "batch_size": 8,
        "lr_max": 3e-4, "lr_min": 1e-6, "weight_decay": 1e-4, "log_every": 100,
        "task": {"degradation": "gaussian_noise", "sigma": 0.1, "blur_k": 3, "patch": 32,
                 "image_size": 48, "n_train": 128, "n_val": 16},
    },
    "infer": {"checkpoint": None, "input": None, "output": "restored.png", "seed": 0},
}


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ config

def parse_sizes(value):
    """``"1024..65536"`` (doubling), ``"1,2,3"`` or a list -> list of ints."""
    try:
        if isinstance(value, (list, tuple)):
            return [int(v) for v in value]
        if isinstance(value, str) and ".." in value:
            lo, hi = (int(v) for v in value.split(".."))
            if lo < 1 or hi < lo:
                raise ValueError("empty range")
            sizes = []
            while lo <= hi:
                sizes.append(lo)
                lo *= 2
            return sizes
        if isinstance(value, str):
            return [int(v) for v in value.split(",") if v]
    except ValueError as exc:
        raise UsageError(f"bad sizes {value!r}: {exc}") from exc
    raise UsageError(f"bad sizes {value!r}")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(cfg, updates, where):
    for key, value in updates.items():
        if key not in cfg:
            raise UsageError(f"unknown config key {key!r} in {where}")
        if isinstance(cfg[key], dict) and isinstance(value, dict) and key != "model":
            _merge(cfg[key], value, where)
        else:
            cfg[key] = value


def _set(cfg, assignment):
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node and node is not cfg.get("model"):
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(text)


def resolve_config(command, args):
    cfg = copy.deepcopy(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        if loaded.pop("command", command) != command:
            raise UsageError("config file is for a different subcommand")
        out = loaded.pop("out", None)
        if out and not args.out:
            args.out = out
        _merge(cfg, loaded, args.config)
    for key in cfg:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            cfg[key] = flag
    for assignment in args.set or []:
        _set(cfg, assignment)
    return cfg


def output_dir(args):
    out = args.out or os.environ.get(OUTPUT_ENV) or "laformer_out"
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _model_config(cfg):
    from . import model as M
    if cfg["preset"] not in M.PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; choose from {sorted(M.PRESETS)}")
    try:
        return M.preset(cfg["preset"], **cfg["model"])
    except (M.ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


# ------------------------------------------------------------------ commands

def cmd_bench(cfg, out):
    from . import _kernels
    from . import bench as B
    if cfg["mechanism"] not in B.BENCH_MECHANISMS + ("both",):
        raise UsageError(f"invalid mechanism {cfg['mechanism']!r}; choose from "
                         f"{', '.join(B.BENCH_MECHANISMS + ('both',))}")
    cfg["sizes"] = parse_sizes(cfg["sizes"])
    if cfg["backend"] is not None and cfg["backend"] not in _kernels.available_backends():
        raise UsageError(f"backend {cfg['backend']!r} not available")
    mechs = B.BENCH_MECHANISMS if cfg["mechanism"] == "both" else (cfg["mechanism"],)
    backend = cfg["backend"] or _kernels.get_backend()
    summary = {}
    try:
        with _kernels.use_backend(backend):
            for mech in mechs:
                r = B.bench_attention(mech, cfg["sizes"], C=cfg["C"], reps=cfg["reps"],
                                      warmup=cfg["warmup"], seed=cfg["seed"], dtype=cfg["dtype"],
                                      workers=cfg["workers"])
                r.write_csv(os.path.join(out, f"bench_{mech}.csv"))
                r.write_json(os.path.join(out, f"bench_{mech}.json"))
                r.write_dat(os.path.join(out, f"bench_{mech}.dat"))
                summary[mech] = r.fit.to_dict() if r.fit else None
                print(f"{mech}: slope {r.fit.slope:.3f} [{r.fit.ci_low:.3f}, {r.fit.ci_high:.3f}]"
                      if r.fit else f"{mech}: too few points for a fit")
        if cfg["compare_backends"]:
            cmp = B.compare_backends(cfg["sizes"], cfg["C"], cfg["reps"], cfg["warmup"],
                                     cfg["seed"], cfg["dtype"])
            summary["backends"] = {k: v.to_dict() for k, v in cmp.items()}
            for k, v in cmp.items():
                print(f"backend {k}: linear slope {v.fit.slope:.3f}")
    except B.BenchError as exc:
        raise UsageError(str(exc)) from exc
    _write_json(os.path.join(out, "bench_summary.json"), summary)
    if cfg["expect_slope"] is not None:
        lo, hi = cfg["expect_slope"]
        bad = [m for m in mechs if summary[m] is None or not lo <= summary[m]["slope"] <= hi]
        if bad:
            print(f"slope outside [{lo}, {hi}] for {bad}", file=sys.stderr)
            return EXIT_FAIL
    return EXIT_OK


def cmd_rank_profile(cfg, out):
    from . import analysis as A
    from . import model as M
    from .images import read_image
    base = _model_config(cfg)
    for mech in cfg["mechanisms"]:
        if mech not in ("softmax", "linear", "rela"):
            raise UsageError(f"invalid mechanism {mech!r}")
    if cfg["hook"] not in A.HOOKS:
        raise UsageError(f"hook must be one of {A.HOOKS}")
    if cfg["input"]:
        img = read_image(cfg["input"])
    else:
        s = cfg["image_size"]
        img = np.random.default_rng([cfg["seed"], 7]).random((s, s, base.in_channels))
    reports = {}
    for mech in cfg["mechanisms"]:
        model = M.build(M.ModelConfig.from_dict({**base.to_dict(), "mechanism": mech}),
                        seed=cfg["seed"])
        rep = A.rank_profile(model, img, hook=cfg["hook"], rel_tol=cfg["rel_tol"])
        rep.write_csv(os.path.join(out, f"rank_{mech}.csv"))
        rep.write_json(os.path.join(out, f"rank_{mech}.json"))
        reports[mech] = rep
        print(f"{mech}: ranks {rep.ranks} ceilings {[e.ceiling for e in rep.entries]}")
    checks = {"bound_violations": sum(len(r.violations()) for r in reports.values())}
    if "linear" in reports and "rela" in reports:
        checks["rela_ge_linear"] = all(a >= b for a, b in zip(reports["rela"].ranks,
                                                              reports["linear"].ranks))
    _write_json(os.path.join(out, "rank_summary.json"), checks)
    ok = checks["bound_violations"] == 0 and checks.get("rela_ge_linear", True)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_grad_check(cfg, out):
    from . import gradtargets as G
    t = cfg["target"]
    if t == "all":
        names = list(G.TARGETS)
    elif t in ("primitives", "blocks"):
        fam = t[:-1] if t == "blocks" else "primitive"
        names = [n for n, v in G.TARGETS.items() if v.family == fam]
    elif t in G.TARGETS:
        names = [t]
    else:
        raise UsageError(f"unknown target {t!r}; choose all, primitives, blocks or one of "
                         f"{', '.join(G.TARGETS)}")
    report, failed = {}, []
    for name in names:
        rep, tol, ok = G.check(name, seed=cfg["seed"], h=cfg["h"], samples=cfg["samples"])
        entry = rep.to_dict()
        entry.update(tolerance=tol, passed=ok, family=G.TARGETS[name].family)
        report[name] = entry
        status = "ok  " if ok else "FAIL"
        print(f"{status} {name:24s} max rel err {rep.max_rel_error:.3e} (tol {tol:g})")
        if not ok:
            pname, worst = rep.worst
            failed.append(name)
            print(f"     worst element {pname}{list(worst.worst_index)}: analytic {worst.analytic!r}"
                  f" numeric {worst.numeric!r}", file=sys.stderr)
    _write_json(os.path.join(out, "grad_check.json"), report)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_train_toy(cfg, out):
    from . import model as M
    from . import train as T
    mcfg = _model_config(cfg)
    try:
        task = T.ToyTask(seed=cfg["seed"], **cfg["task"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad task config: {exc}") from exc

    def show(row):
        print(f"step {row['step']:5d} lr {row['lr']:.3e} train_l1 {row['train_l1']:.5f} "
              f"val_l1 {row['val_l1']:.5f} val_psnr {row['val_psnr']:.2f}", flush=True)

    try:
        model, log = T.train_toy(mcfg, task, steps=cfg["steps"], seed=cfg["seed"],
                                 batch_size=cfg["batch_size"], lr_max=cfg["lr_max"],
                                 lr_min=cfg["lr_min"], weight_decay=cfg["weight_decay"],
                                 log_every=cfg["log_every"], on_log=show)
    except T.DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    M.save(model, os.path.join(out, "checkpoint.laft"))
    log.write_csv(os.path.join(out, "metrics.csv"))
    summary = {"input_val_l1": log.input_val_l1, "input_val_psnr": log.input_val_psnr,
               "refused_steps": log.refused_steps, "params": M.count_params(model)}
    if log.rows:
        summary.update(final_val_l1=log.rows[-1]["val_l1"], final_val_psnr=log.rows[-1]["val_psnr"],
                       initial_val_l1=log.rows[0]["val_l1"])
        print(f"noisy input psnr {log.input_val_psnr:.2f} dB -> restored {log.rows[-1]['val_psnr']:.2f} dB")
    _write_json(os.path.join(out, "train_summary.json"), summary)
    return EXIT_OK


def reflect_pad(img, multiple):
    """Reflect-pad (H, W, C) up to multiples of ``multiple``; returns (padded, (H, W))."""
    H, W = img.shape[:2]
    ph, pw = -H % multiple, -W % multiple
    if ph >= H or pw >= W:
        raise ValueError(f"image {H}x{W} too small to reflect-pad to a multiple of {multiple}")
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect"), (H, W)


def cmd_infer(cfg, out):
    from . import model as M
    from .diff import no_grad
    from .images import ImageError, read_image, write_image
    from .serialization import CheckpointError
    if not cfg["checkpoint"] or not cfg["input"]:
        raise UsageError("infer needs --checkpoint and --input")
    try:
        model = M.load(cfg["checkpoint"])
    except (OSError, CheckpointError) as exc:
        print(f"bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_FAIL
    try:
        img = read_image(cfg["input"])
    except ImageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    padded, (H, W) = reflect_pad(img, 2 ** (model.config.levels - 1))
    with no_grad():
        restored = M.forward(model, padded)[:H, :W]
    path = cfg["output"]
    if not os.path.isabs(path):
        path = os.path.join(out, path)
    written = write_image(path, restored)
    print(f"wrote {written} ({W}x{H}, padded to {padded.shape[1]}x{padded.shape[0]})")
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "rank-profile": cmd_rank_profile, "grad-check": cmd_grad_check,
            "train-toy": cmd_train_toy, "infer": cmd_infer}


def build_parser():
    from .bench import BENCH_MECHANISMS
    p = argparse.ArgumentParser(prog="laformer", description="Linear-attention image restoration toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (e.g. a previous effective_config.json)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; VALUE is parsed as JSON when possible")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./laformer_out)")
        sp.add_argument("--seed", type=int)
        return sp

    b = common(sub.add_parser("bench", help="attention wall-clock scaling"))
    b.add_argument("--mechanism", choices=BENCH_MECHANISMS + ("both",))
    b.add_argument("--sizes", help="e.g. 1024..65536 (doubling) or 1024,4096,16384")
    b.add_argument("--C", type=int)
    b.add_argument("--reps", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--backend", choices=("numba", "numpy"))
    b.add_argument("--compare-backends", dest="compare_backends", action="store_const", const=True)

    r = common(sub.add_parser("rank-profile", help="per-block numerical rank"))
    r.add_argument("--hook", choices=("attention_output", "block_output"))
    r.add_argument("--input", help="image to profile (default: seeded random image)")
    r.add_argument("--rel-tol", dest="rel_tol", type=float)

    g = common(sub.add_parser("grad-check", help="finite-difference gradient check"))
    g.add_argument("--target", help="op name, 'primitives', 'blocks' or 'all'")

    t = common(sub.add_parser("train-toy", help="train on a procedural restoration task"))
    t.add_argument("--steps", type=int)
    t.add_argument("--preset")

    i = common(sub.add_parser("infer", help="restore one image with a checkpoint"))
    i.add_argument("--checkpoint")
    i.add_argument("--input")
    i.add_argument("--output")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        out = output_dir(args)
        if args.command == "bench":
            cfg["sizes"] = parse_sizes(cfg["sizes"])
        _write_json(os.path.join(out, "effective_config.json"),
                    {"command": args.command, "out": out, **cfg})
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"laformer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
