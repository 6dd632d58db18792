"""Feature aggregation (linear attention, LAM, AEM, FAM), segmentation head,
and the full two-path network.

Weight layout: ``fam.aem.lam.*`` and ``fam.lam.*`` (each with ``la.{q,k,v}``,
``conv``, ``bn``), ``fusion.sum_proj.*`` for the summation ablation, and
``head.{conv,bn,cls}``.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ad
from . import layers as L
from .backbone import StageOutputs, backbone_forward
from .config import ModelConfig
from .texture import texture_forward
from .weights import Scope

LA_EPS = 1e-8


# ---------------------------------------------------------------------------
# linear attention on plain arrays (reference paths used by bench and tests)
# ---------------------------------------------------------------------------

def _l2n(x: np.ndarray, axis: int) -> np.ndarray:
    return x / np.sqrt((x.astype(np.float64) ** 2).sum(axis=axis, keepdims=True) + LA_EPS)


def linear_attention_factored(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """O(N) linear attention on projected maps.

    q, k: [N, Ck, L]; v: [N, C, L]. Returns [N, C, L] where position m gets the
    weighted sum over n of v_n with weights (1 + q_m.k_n) / (L + q_m.sum_n k_n)
    on L2-normalised q, k. Computed without forming the L x L matrix.
    """
    qn = _l2n(q, 1)
    kn = _l2n(k, 1)
    length = q.shape[-1]
    kv = np.matmul(kn, np.swapaxes(v, 1, 2))                     # N, Ck, C
    num = v.sum(axis=2, keepdims=True) + np.matmul(np.swapaxes(kv, 1, 2), qn)  # N, C, L
    den = length + np.einsum("nkl,nk->nl", qn, kn.sum(axis=2))   # N, L
    return (num / den[:, None, :]).astype(v.dtype)


def linear_attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Explicit [N, L, L] weight matrix w[m, n] of the factored form."""
    qn = _l2n(q, 1)
    kn = _l2n(k, 1)
    sim = np.matmul(np.swapaxes(qn, 1, 2), kn)  # N, L(m), L(n)
    return (1.0 + sim) / (q.shape[-1] + sim.sum(axis=2, keepdims=True))


def linear_attention_dense(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Quadratic-cost evaluation through the explicit weight matrix."""
    w = linear_attention_weights(q, k)
    return np.matmul(v, np.swapaxes(w, 1, 2)).astype(v.dtype)


# ---------------------------------------------------------------------------
# differentiable modules
# ---------------------------------------------------------------------------

def linear_attention(x: ad.Node, sc: Scope, key_ratio: int = 8) -> ad.Node:
    """Linear attention with 1x1-conv Q/K/V projections; output has x's shape."""
    n, c, h, w = x.shape
    ck = max(c // key_ratio, 1)
    length = h * w
    q = ad.reshape(L.conv(sc / "q", x, ck, 1), (n, ck, length))
    k = ad.reshape(L.conv(sc / "k", x, ck, 1), (n, ck, length))
    v = ad.reshape(L.conv(sc / "v", x, c, 1), (n, c, length))
    qn = ad.transpose(ad.l2_normalize(q, 1, LA_EPS), (0, 2, 1))   # N, L, Ck
    kn = ad.l2_normalize(k, 1, LA_EPS)                            # N, Ck, L
    vt = ad.transpose(v, (0, 2, 1))                               # N, L, C
    kv = ad.matmul(kn, vt)                                        # N, Ck, C
    num = ad.add(ad.sum(vt, axis=1, keepdims=True), ad.matmul(qn, kv))      # N, L, C
    den = ad.add(ad.matmul(qn, ad.sum(kn, axis=2, keepdims=True)), float(length))  # N, L, 1
    out = ad.div(num, den)
    return ad.reshape(ad.transpose(out, (0, 2, 1)), (n, c, h, w))


def lam(x: ad.Node, out_channels: int, sc: Scope, key_ratio: int = 8) -> ad.Node:
    """Linear attention followed by 1x1 conv + BN + ReLU."""
    return L.conv_bn(sc, linear_attention(x, sc / "la", key_ratio), out_channels, 1)


def aem(ldf3: ad.Node, ldf4: ad.Node, sc: Scope, key_ratio: int = 8,
        upsample: str = "nearest") -> ad.Node:
    """ldf3 + ldf3 * up2(LAM(ldf4)) with an elementwise product."""
    gate = ad.upsample(lam(ldf4, ldf3.shape[1], sc / "lam", key_ratio), 2, upsample)
    return ad.add_same(ldf3, ad.hadamard(ldf3, gate))


def aggregate(tf: ad.Node, ldf3: ad.Node, ldf4: ad.Node, sc: Scope, key_ratio: int = 8,
              aem_upsample: str = "nearest", af_upsample: str = "bilinear") -> ad.Node:
    """The aggregated feature: concat(up2(AEM(ldf3, ldf4)), tf) on channels."""
    merged = aem(ldf3, ldf4, sc / "aem", key_ratio, aem_upsample)
    return ad.concat([ad.upsample(merged, 2, af_upsample), tf], axis=1)


def fam(tf: ad.Node, ldf3: ad.Node, ldf4: ad.Node, sc: Scope, key_ratio: int = 8,
        aem_upsample: str = "nearest", af_upsample: str = "bilinear") -> ad.Node:
    af = aggregate(tf, ldf3, ldf4, sc, key_ratio, aem_upsample, af_upsample)
    sc.hook("af", af.value)
    return ad.hadamard(af, lam(af, af.shape[1], sc / "lam", key_ratio))


def seg_head(fused: ad.Node, num_classes: int, sc: Scope, hidden: int = 128,
             upscale: int = 8) -> ad.Node:
    """3x3 conv-BN-ReLU, 1x1 classifier, bilinear x`upscale` to input resolution."""
    y = L.conv_bn(sc, fused, hidden, 3, 1, 1)
    y = L.conv(sc / "cls", y, num_classes, 1)
    return ad.upsample(y, upscale, "bilinear")


def fuse(tf, feats: StageOutputs, sc: Scope, cfg: ModelConfig) -> ad.Node:
    """Merge texture and dependency features at 1/8 resolution per the fusion mode."""
    f = cfg.fusion
    mode = f.fusion_mode
    if mode == "fam":
        return fam(tf, feats.ldf3, feats.ldf4, sc / "fam", f.la_key_ratio, f.aem_upsample, f.af_upsample)
    merged = aem(feats.ldf3, feats.ldf4, sc / "fam" / "aem", f.la_key_ratio, f.aem_upsample)
    up = ad.upsample(merged, 2, f.af_upsample)
    if mode == "none":
        return up
    if mode == "sum":
        return ad.add_same(L.conv(sc / "fusion" / "sum_proj", up, tf.shape[1], 1), tf)
    return ad.concat([up, tf], axis=1)  # "cat"


def banet_forward(image: ad.Node, sc: Scope, cfg: ModelConfig) -> ad.Node:
    """Logits [N, K, H, W] for an image batch [N, 3, H, W] (H, W divisible by 32)."""
    feats = backbone_forward(image, sc / "backbone", cfg.backbone)
    sc.hook("ldf", feats)
    tf = None
    if cfg.fusion.fusion_mode != "none":
        tf = texture_forward(image, sc / "texture", cfg.texture_channels)
        sc.hook("tf", tf.value)
    fused = fuse(tf, feats, sc, cfg)
    return seg_head(fused, cfg.fusion.num_classes, sc / "head", cfg.fusion.head_hidden_channels)
