"""LAformer U-Net: patch embedding, DA-block encoder/decoder, global residual."""
import dataclasses
import json
from typing import List

import numpy as np

from . import diff as D
from .blocks import (DABlockParams, FFN_VARIANTS, cgffn_param_count, da_block, da_block_cost,
                     make_da_block)
from .attention import MECHANISMS, PSI_CHOICES
from .diff import Node, node_or_array
from .init import NamedInit
from .serialization import CheckpointError, load_tensors, save_tensors


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ModelConfig:
    base_channels: int = 16
    levels: int = 2
    blocks_per_level: List[int] = dataclasses.field(default_factory=lambda: [1, 1, 1])
    ffn_expansion: int = 2
    ca_reduction: int = 4
    heads: int = 1
    psi: str = "one_plus_elu"
    rela_kernel: int = 5
    normalize_rela: bool = True
    skip_mode: str = "concat_reduce"
    seed: int = 0
    mechanism: str = "rela"
    use_cab: bool = True
    ffn_variant: str = "cgffn"
    ffn_kernel: int = 3
    cab_kernel: int = 3
    bias: bool = False
    in_channels: int = 3

    def validate(self):
        L = self.levels
        if L < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.blocks_per_level) != 2 * L - 1:
            raise ConfigError(f"blocks_per_level needs {2 * L - 1} entries for {L} levels")
        if any(b < 1 for b in self.blocks_per_level):
            raise ConfigError("every level needs at least one block")
        C = self.base_channels
        if C < 1 or C % self.heads:
            raise ConfigError(f"base_channels {C} must be positive and divisible by heads {self.heads}")
        if L > 1 and C % 2:
            raise ConfigError("base_channels must be even when levels > 1 (pixel shuffle)")
        if C % self.ca_reduction:
            raise ConfigError(f"ca_reduction {self.ca_reduction} must divide {C}")
        for k in (self.rela_kernel, self.ffn_kernel, self.cab_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError("kernel sizes must be odd")
        if self.psi not in PSI_CHOICES:
            raise ConfigError(f"psi must be one of {PSI_CHOICES}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ConfigError(f"ffn_variant must be one of {FFN_VARIANTS}")
        if self.skip_mode != "concat_reduce":
            raise ConfigError("only skip_mode 'concat_reduce' is implemented")
        return self

    def channels(self, level):
        return self.base_channels * 2 ** level

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: (list(v) if k == "blocks_per_level" else v) for k, v in d.items()}).validate()


PRESETS = {
    "test": dict(base_channels=16, levels=2, blocks_per_level=[1, 1, 1]),
    "demo": dict(base_channels=32, levels=4, blocks_per_level=[2, 3, 3, 4, 3, 3, 2]),
}


def preset(name, **overrides):
    return ModelConfig.from_dict({**PRESETS[name], **overrides})


@dataclasses.dataclass
class EncoderLevel:
    blocks: List[DABlockParams]
    down: Node
    down_b: Node = None


@dataclasses.dataclass
class DecoderLevel:
    up: Node
    fuse: Node
    blocks: List[DABlockParams]
    up_b: Node = None
    fuse_b: Node = None


@dataclasses.dataclass
class LAformer:
    config: ModelConfig
    embed_w: Node
    embed_b: Node
    encoder: List[EncoderLevel]
    bottleneck: List[DABlockParams]
    decoder: List[DecoderLevel]
    out_w: Node
    out_b: Node
    step: int = 0

    def named_parameters(self):
        return [(n, p) for n, p in D.named_parameters(self)]

    def parameters(self):
        return dict(self.named_parameters())


def _block_kwargs(cfg):
    return dict(heads=cfg.heads, psi=cfg.psi, mechanism=cfg.mechanism,
                rela_kernel=cfg.rela_kernel, use_cab=cfg.use_cab,
                ca_reduction=cfg.ca_reduction, expansion=cfg.ffn_expansion,
                ffn_variant=cfg.ffn_variant, ffn_kernel=cfg.ffn_kernel,
                cab_kernel=cfg.cab_kernel, bias=cfg.bias)


def build(config, seed=None, dtype=None):
    """Deterministic initialisation from ``seed`` (defaults to ``config.seed``)."""
    cfg = config.validate()
    init = NamedInit(cfg.seed if seed is None else seed, dtype=dtype)
    L, C = cfg.levels, cfg.base_channels
    kw = _block_kwargs(cfg)
    bpl = cfg.blocks_per_level

    def blocks(prefix, n, ch):
        return [make_da_block(init, f"{prefix}.{i}", ch, **kw) for i in range(n)]

    def bias(name, n):
        return init(name, (n,), "zeros") if cfg.bias else None

    encoder = []
    for l in range(L - 1):
        ch = cfg.channels(l)
        encoder.append(EncoderLevel(
            blocks=blocks(f"encoder.{l}.blocks", bpl[l], ch),
            down=init(f"encoder.{l}.down", (4 * ch, 2 * ch)),
            down_b=bias(f"encoder.{l}.down_b", 2 * ch)))
    decoder = []
    for l in range(L - 1):
        ch = cfg.channels(l)
        decoder.append(DecoderLevel(
            up=init(f"decoder.{l}.up", (ch // 2, ch)),
            fuse=init(f"decoder.{l}.fuse", (2 * ch, ch)),
            blocks=blocks(f"decoder.{l}.blocks", bpl[2 * L - 2 - l], ch),
            up_b=bias(f"decoder.{l}.up_b", ch),
            fuse_b=bias(f"decoder.{l}.fuse_b", ch)))
    return LAformer(
        config=cfg,
        embed_w=init("embed_w", (3, 3, cfg.in_channels, C)),
        embed_b=init("embed_b", (C,), "zeros"),
        encoder=encoder,
        bottleneck=blocks("bottleneck", bpl[L - 1], cfg.channels(L - 1)),
        decoder=decoder,
        out_w=init("out_w", (3, 3, C, cfg.in_channels)),
        out_b=init("out_b", (cfg.in_channels,), "zeros"))


def check_input(model, shape):
    cfg = model.config
    f = 2 ** (cfg.levels - 1)
    H, W, C = shape[-3:]
    if H % f or W % f:
        raise ValueError(f"image {H}x{W} must be divisible by {f} for {cfg.levels} levels")
    if C != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {C}")


@node_or_array
def forward(model, img, taps=None):
    """Restore ``img`` ((H, W, 3) or (B, H, W, 3)). ``taps`` (a list) gets one dict per DA block."""
    cfg = model.config
    img = D.as_node(img)
    check_input(model, img.shape)
    norm = cfg.normalize_rela

    def run(x, blocks):
        for blk in blocks:
            t = {} if taps is not None else None
            x = da_block(x, blk, normalize=norm, taps=t)
            if t is not None:
                taps.append(t)
        return x

    x = D.conv2d(img, model.embed_w, model.embed_b)
    skips = []
    for lvl in model.encoder:
        x = run(x, lvl.blocks)
        skips.append(x)
        x = D.conv_pointwise(D.pixel_unshuffle(x, 2), lvl.down, lvl.down_b)
    x = run(x, model.bottleneck)
    for l in reversed(range(cfg.levels - 1)):
        lvl = model.decoder[l]
        x = D.conv_pointwise(D.pixel_shuffle(x, 2), lvl.up, lvl.up_b)
        x = D.conv_pointwise(D.concat([x, skips[l]], axis=-1), lvl.fuse, lvl.fuse_b)
        x = run(x, lvl.blocks)
    return D.add(D.conv2d(x, model.out_w, model.out_b), img)


def count_params(model):
    return int(sum(p.value.size for _, p in model.named_parameters()))


def analytic_param_count(config):
    """Closed-form parameter count from the config alone (no weights built)."""
    cfg = config.validate()
    L, C, cin, b = cfg.levels, cfg.base_channels, cfg.in_channels, int(cfg.bias)

    def block(c):
        n = 4 * c                                                   # two LayerNorms
        n += 3 * c * c + b * 3 * c
        if cfg.mechanism == "rela":
            n += cfg.rela_kernel ** 2 * c
        if cfg.use_cab:
            k2 = cfg.cab_kernel ** 2
            n += 2 * c * c + k2 * c + 2 * c * (c // cfg.ca_reduction) + b * 3 * c
        return n + cgffn_param_count(c, cfg.ffn_expansion, cfg.ffn_variant, cfg.ffn_kernel, cfg.bias)

    bpl = cfg.blocks_per_level
    n = 9 * cin * C + C + 9 * C * cin + cin
    for l in range(L - 1):
        c = cfg.channels(l)
        n += bpl[l] * block(c) + 4 * c * 2 * c + b * 2 * c
        n += bpl[2 * L - 2 - l] * block(c) + (c // 2) * c + 2 * c * c + b * 2 * c
    return n + bpl[L - 1] * block(cfg.channels(L - 1))


def count_flops(model_or_config, H, W):
    """Analytic (macs, flops) of one forward pass on an H x W image.

    flops = 2 * macs + elementwise work, with the per-element convention of
    :data:`laformer.diff.ELEMENT_FLOPS`.
    """
    cfg = getattr(model_or_config, "config", model_or_config)
    L, cin = cfg.levels, cfg.in_channels
    kw = _block_kwargs(cfg)
    kw.pop("psi")
    kw["normalize"] = cfg.normalize_rela
    b = 1 if cfg.bias else 0
    N = H * W
    macs = N * 9 * cin * cfg.base_channels
    extra = N * cfg.base_channels

    def blocks(n_blocks, n, ch):
        m, f = da_block_cost(n, ch, **kw)
        return n_blocks * m, n_blocks * f

    for l in range(L - 1):
        n, ch = N // 4 ** l, cfg.channels(l)
        m, f = blocks(cfg.blocks_per_level[l], n, ch)
        macs += m + (n // 4) * 4 * ch * 2 * ch
        extra += f + b * (n // 4) * 2 * ch
    m, f = blocks(cfg.blocks_per_level[L - 1], N // 4 ** (L - 1), cfg.channels(L - 1))
    macs, extra = macs + m, extra + f
    for l in range(L - 1):
        n, ch = N // 4 ** l, cfg.channels(l)
        m, f = blocks(cfg.blocks_per_level[2 * L - 2 - l], n, ch)
        macs += m + n * (ch // 2) * ch + n * 2 * ch * ch
        extra += f + b * 2 * n * ch
    macs += N * 9 * cfg.base_channels * cin
    extra += 2 * N * cin
    return macs, 2 * macs + extra


# ---------------------------------------------------------------- checkpoints

def save(model, path):
    tensors = {name: p.value for name, p in model.named_parameters()}
    meta = {"kind": "laformer-checkpoint", "config": model.config.to_dict(), "step": model.step}
    save_tensors(path, tensors, metadata=meta)


def load(path):
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "laformer-checkpoint" or "config" not in meta:
        raise CheckpointError(f"{path}: manifest carries no model config")
    try:
        cfg = ModelConfig.from_dict(meta["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from exc
    model = build(cfg)
    expected = model.named_parameters()
    names = {n for n, _ in expected}
    extra = sorted(set(tensors) - names)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]!r} not in config")
    for name, p in expected:
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {tensors[name].shape}, config expects {p.shape}")
        p.value = tensors[name]
    model.step = int(meta.get("step", 0))
    return model


def config_json(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
