"""CG-FFN and the Dual-Attention block."""
import dataclasses
from typing import Optional

import numpy as np

from . import diff as D
from .attention import (AttentionParams, CABParams, attention_branch, attention_branch_cost,
                        cab, cab_cost)
from .diff import Node, node_or_array

FFN_VARIANTS = ("cgffn", "no_dwc", "no_glu", "mlp")


@dataclasses.dataclass
class CGFFNParams:
    w_p1: Node
    w_p2: Node
    w_d: Optional[Node] = None
    b_p1: Optional[Node] = None
    b_d: Optional[Node] = None
    b_p2: Optional[Node] = None
    gated: bool = True

    def __post_init__(self):
        width = self.w_p1.shape[1]
        if self.gated and width % 2:
            raise ValueError(f"gated FFN needs an even expansion width, got {width}")
        hidden = width // 2 if self.gated else width
        if self.w_p2.shape[0] != hidden:
            raise ValueError(f"w_p2 expects {hidden} input channels, got {self.w_p2.shape[0]}")


@dataclasses.dataclass
class DABlockParams:
    ln1_gamma: Node
    ln1_beta: Node
    attn: AttentionParams
    ln2_gamma: Node
    ln2_beta: Node
    ffn: CGFFNParams
    cab: Optional[CABParams] = None


@node_or_array
def cgffn(x, p):
    """Pointwise expansion, depthwise conv, GELU(first half) * second half, projection."""
    u = D.conv_pointwise(x, p.w_p1, p.b_p1)
    if p.w_d is not None:
        u = D.conv_depthwise(u, p.w_d, p.b_d)
    if p.gated:
        half = u.shape[-1] // 2
        g = D.mul(D.gelu(D.take_channels(u, 0, half)), D.take_channels(u, half, 2 * half))
    else:
        g = D.gelu(u)
    return D.conv_pointwise(g, p.w_p2, p.b_p2)


def cgffn_cost(N, C, expansion, variant="cgffn", kernel=3, bias=False):
    gated = variant in ("cgffn", "no_dwc")
    hidden = expansion * C
    width = 2 * hidden if gated else hidden
    macs = N * C * width + N * hidden * C
    flops = N * hidden * (2 if gated else 1)
    if variant in ("cgffn", "no_glu"):
        macs += N * width * kernel * kernel
        flops += N * width if bias else 0
    if bias:
        flops += N * width + N * C
    return macs, flops


def cgffn_param_count(C, expansion, variant="cgffn", kernel=3, bias=False):
    gated = variant in ("cgffn", "no_dwc")
    hidden = expansion * C
    width = 2 * hidden if gated else hidden
    n = C * width + hidden * C
    if variant in ("cgffn", "no_glu"):
        n += kernel * kernel * width + (width if bias else 0)
    if bias:
        n += width + C
    return n


@node_or_array
def da_block(x, p, normalize=True, taps=None):
    """X' = attn(LN(X)) + CAB(LN(X)) + X ; Y = FFN(LN(X')) + X'.

    One LayerNorm output feeds both branches. If ``taps`` is a dict it receives
    ``attention_output`` (token matrix of the attention branch) and
    ``block_output``.
    """
    x = D.as_node(x)
    n = D.layer_norm(x, p.ln1_gamma, p.ln1_beta)
    a = attention_branch(n, p.attn, normalize=normalize)
    s = a if p.cab is None else D.add(a, cab(n, p.cab))
    xp = D.add(s, x)
    y = D.add(cgffn(D.layer_norm(xp, p.ln2_gamma, p.ln2_beta), p.ffn), xp)
    if taps is not None:
        H, W, C = a.shape[-3:]
        taps["attention_output"] = a.value.reshape(*a.shape[:-3], H * W, C)
        taps["block_output"] = y.value
    return y


def da_block_cost(N, C, *, heads=1, mechanism="rela", rela_kernel=5, normalize=True,
                  use_cab=True, ca_reduction=4, expansion=2, ffn_variant="cgffn",
                  ffn_kernel=3, cab_kernel=3, bias=False):
    macs, flops = attention_branch_cost(N, C, C, heads, mechanism, rela_kernel, normalize, bias)
    flops += 2 * 5 * N * C  # two layer norms
    if use_cab:
        m, f = cab_cost(N, C, C, C // ca_reduction, cab_kernel, bias)
        macs, flops = macs + m, flops + f + N * C
    flops += N * C  # residual into X'
    m, f = cgffn_cost(N, C, expansion, ffn_variant, ffn_kernel, bias)
    return macs + m, flops + f + N * C


def make_attention(init, prefix, C, *, heads=1, psi="one_plus_elu", mechanism="rela",
                   kernel=5, bias=False, cin=None):
    cin = cin or C
    b = (lambda n: init(f"{prefix}.{n}", (C,), "zeros")) if bias else (lambda n: None)
    return AttentionParams(
        w_q=init(f"{prefix}.w_q", (cin, C)),
        w_k=init(f"{prefix}.w_k", (cin, C)),
        w_v=init(f"{prefix}.w_v", (cin, C)),
        dwc=init(f"{prefix}.dwc", (kernel, kernel, C), "normal") if mechanism == "rela" else None,
        b_q=b("b_q"), b_k=b("b_k"), b_v=b("b_v"),
        heads=heads, psi=psi, mechanism=mechanism)


def make_cab(init, prefix, C, *, reduction=4, kernel=3, bias=False, hidden=None):
    ch = hidden or C
    b = (lambda n, c: init(f"{prefix}.{n}", (c,), "zeros")) if bias else (lambda n, c: None)
    return CABParams(
        w_p1=init(f"{prefix}.w_p1", (C, ch)),
        w_d=init(f"{prefix}.w_d", (kernel, kernel, ch), "normal"),
        ca_w1=init(f"{prefix}.ca_w1", (ch, ch // reduction)),
        ca_w2=init(f"{prefix}.ca_w2", (ch // reduction, ch)),
        w_p2=init(f"{prefix}.w_p2", (ch, C)),
        b_p1=b("b_p1", ch), b_d=b("b_d", ch), b_p2=b("b_p2", C))


def make_cgffn(init, prefix, C, *, expansion=2, variant="cgffn", kernel=3, bias=False):
    if variant not in FFN_VARIANTS:
        raise ValueError(f"ffn variant must be one of {FFN_VARIANTS}")
    gated = variant in ("cgffn", "no_dwc")
    hidden = expansion * C
    width = 2 * hidden if gated else hidden
    has_dwc = variant in ("cgffn", "no_glu")
    b = (lambda n, c: init(f"{prefix}.{n}", (c,), "zeros")) if bias else (lambda n, c: None)
    return CGFFNParams(
        w_p1=init(f"{prefix}.w_p1", (C, width)),
        w_p2=init(f"{prefix}.w_p2", (hidden, C)),
        w_d=init(f"{prefix}.w_d", (kernel, kernel, width), "normal") if has_dwc else None,
        b_p1=b("b_p1", width), b_d=b("b_d", width) if has_dwc else None, b_p2=b("b_p2", C),
        gated=gated)


def make_da_block(init, prefix, C, *, heads=1, psi="one_plus_elu", mechanism="rela",
                  rela_kernel=5, use_cab=True, ca_reduction=4, expansion=2,
                  ffn_variant="cgffn", ffn_kernel=3, cab_kernel=3, bias=False):
    return DABlockParams(
        ln1_gamma=init(f"{prefix}.ln1_gamma", (C,), "ones"),
        ln1_beta=init(f"{prefix}.ln1_beta", (C,), "zeros"),
        attn=make_attention(init, f"{prefix}.attn", C, heads=heads, psi=psi,
                            mechanism=mechanism, kernel=rela_kernel, bias=bias),
        ln2_gamma=init(f"{prefix}.ln2_gamma", (C,), "ones"),
        ln2_beta=init(f"{prefix}.ln2_beta", (C,), "zeros"),
        ffn=make_cgffn(init, f"{prefix}.ffn", C, expansion=expansion, variant=ffn_variant,
                       kernel=ffn_kernel, bias=bias),
        cab=make_cab(init, f"{prefix}.cab", C, reduction=ca_reduction, kernel=cab_kernel,
                     bias=bias) if use_cab else None)


def param_count(obj):
    return int(sum(np.prod(n.shape, dtype=np.int64) for _, n in D.named_parameters(obj)))
