"""Transformer dependency path: stem, gated patch embedding, EMSA blocks.

Weight layout under ``backbone.``::

    stem.{conv1,bn1,conv2,bn2,conv3}
    stage{i}.embed.{conv,bn,gate}          (stages 2-4)
    stage{i}.block{j}.emsa.{q,k,v,sr,sr_norm,mix,proj}
    stage{i}.block{j}.{norm2,mlp.fc1,mlp.fc2}
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import autograd as ad
from . import layers as L
from .config import BackboneConfig
from .tensor import InvalidArgument
from .weights import Scope


@dataclass
class StageOutputs:
    ldf3: ad.Node
    ldf4: ad.Node
    stages: list[ad.Node]


def stem(x: ad.Node, sc: Scope, out_ch: int = 64, hidden: int | None = None) -> ad.Node:
    """Three 3x3 convs with strides 2, 1, 2; the first two carry BN + ReLU."""
    L.check_divisible(x, 4, "stem")
    hidden = hidden or out_ch // 2
    y = ad.relu(L.batch_norm(sc / "bn1", L.conv(sc / "conv1", x, hidden, 3, 2, 1, bias=False)))
    y = ad.relu(L.batch_norm(sc / "bn2", L.conv(sc / "conv2", y, hidden, 3, 1, 1, bias=False)))
    return L.conv(sc / "conv3", y, out_ch, 3, 2, 1)


def patch_embed(x: ad.Node, sc: Scope, out_ch: int | None = None, s: int = 2) -> ad.Node:
    """Strided (s+1)x(s+1) conv + BN, gated by sigmoid of a 3x3 depthwise conv."""
    L.check_divisible(x, s, "patch_embed")
    out_ch = out_ch or 2 * x.shape[1]
    xp = L.batch_norm(sc / "bn", L.conv(sc / "conv", x, out_ch, s + 1, s, s // 2, bias=False))
    gate = ad.sigmoid(L.conv(sc / "gate", xp, out_ch, 3, 1, 1, groups=out_ch))
    return ad.hadamard(gate, xp)


def _split_heads(t: ad.Node, heads: int) -> ad.Node:
    n, l, c = t.shape
    return ad.transpose(ad.reshape(t, (n, l, heads, c // heads)), (0, 2, 1, 3))


def emsa(tokens: ad.Node, hw: tuple[int, int], heads: int, reduction: int, sc: Scope,
         order: str = "literal") -> ad.Node:
    """Efficient multi-head self-attention over an h x w token grid.

    Keys and values come from a spatially reduced copy of the input (depthwise
    conv, kernel r+1, stride r, then layer norm; skipped for r = 1). The
    scaled logits are mixed across heads by a 1x1 conv, then with the default
    ``order="literal"`` soft-maxed over keys and instance-normalised per head
    map. ``order="norm_first"`` swaps those two steps.

    The post-softmax maps are reported to the ``"attention"`` hook.
    """
    n, l, c = tokens.shape
    h, w = hw
    if l != h * w:
        raise InvalidArgument(f"emsa: {l} tokens do not factor into the declared {h}x{w} grid")
    if c % heads:
        raise InvalidArgument(f"emsa: {c} channels not divisible by {heads} heads")
    dk = c // heads

    q = _split_heads(L.linear(sc / "q", tokens, c), heads)
    if reduction > 1:
        grid = ad.tokens_to_nchw(tokens, h, w)
        grid = L.conv(sc / "sr", grid, c, reduction + 1, reduction, reduction // 2, groups=c)
        kv_in = L.layer_norm(sc / "sr_norm", ad.nchw_to_tokens(grid))
    else:
        kv_in = tokens
    k = _split_heads(L.linear(sc / "k", kv_in, c), heads)
    v = _split_heads(L.linear(sc / "v", kv_in, c), heads)

    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    logits = L.conv(sc / "mix", logits, heads, 1)  # heads act as channels
    if order == "literal":
        attn = ad.softmax(logits, axis=-1)
        sc.hook("attention", attn.value)
        attn = ad.instance_norm(attn)
    elif order == "norm_first":
        attn = ad.softmax(ad.instance_norm(logits), axis=-1)
        sc.hook("attention", attn.value)
    else:
        raise InvalidArgument(f"emsa: unknown order {order!r}")

    out = ad.matmul(attn, v)  # N, heads, L, dk
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (n, l, c))
    return L.linear(sc / "proj", out, c)


def mlp(tokens: ad.Node, sc: Scope, ratio: float) -> ad.Node:
    c = tokens.shape[-1]
    hidden = L.linear(sc / "fc1", tokens, int(round(c * ratio)))
    return L.linear(sc / "fc2", ad.gelu(hidden), c)


def transformer_block(tokens: ad.Node, hw: tuple[int, int], sc: Scope, heads: int,
                      reduction: int, mlp_ratio: float = 4.0, order: str = "literal") -> ad.Node:
    g = ad.add_same(tokens, emsa(tokens, hw, heads, reduction, sc / "emsa", order))
    return ad.add_same(g, mlp(L.layer_norm(sc / "norm2", g), sc / "mlp", mlp_ratio))


def backbone_forward(image: ad.Node, sc: Scope, cfg: BackboneConfig) -> StageOutputs:
    """Stem and four transformer stages; returns stage 3 and 4 maps (1/16, 1/32)."""
    L.check_divisible(image, 32, "backbone")
    x = stem(image, sc / "stem", cfg.stage_dims[0], cfg.hidden)
    stages = []
    for i in range(4):
        ssc = sc / f"stage{i + 1}"
        if i > 0:
            x = patch_embed(x, ssc / "embed", cfg.stage_dims[i], cfg.patch_stride)
        h, w = x.shape[2:]
        t = ad.nchw_to_tokens(x)
        for j in range(cfg.stage_depths[i]):
            t = transformer_block(t, (h, w), ssc / f"block{j}", cfg.heads[i], cfg.kv_reduction[i],
                                  cfg.mlp_ratio, cfg.emsa_order)
        x = ad.tokens_to_nchw(t, h, w)
        stages.append(x)
    return StageOutputs(ldf3=stages[2], ldf4=stages[3], stages=stages)
