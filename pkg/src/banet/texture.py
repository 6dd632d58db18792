"""Convolutional texture path: four conv-BN-ReLU layers, 8x downsampling."""
from __future__ import annotations

from . import autograd as ad
from . import layers as L
from .weights import Scope

# (kernel, stride, padding) for T1..T4
TEXTURE_LAYERS = ((7, 2, 3), (3, 2, 1), (3, 2, 1), (1, 1, 0))


def texture_forward(x: ad.Node, sc: Scope, channels: tuple[int, int] = (64, 128)) -> ad.Node:
    L.check_divisible(x, 8, "texture_forward")
    mid, out = channels
    widths = (mid, mid, mid, out)
    for i, ((k, s, p), c) in enumerate(zip(TEXTURE_LAYERS, widths), 1):
        x = L.conv_bn(sc / f"t{i}", x, c, k, s, p)
    return x
