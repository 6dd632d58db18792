"""Parameterised layers over a :class:`~banet.weights.Scope`."""
from __future__ import annotations

from . import autograd as ad
from .tensor import InvalidArgument
from .weights import Scope, conv_init, linear_init, ones, zeros


def conv(sc: Scope, x: ad.Node, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
         groups: int = 1, bias: bool = True) -> ad.Node:
    in_ch = x.shape[1]
    w = sc.param("weight", (out_ch, in_ch // groups, kernel, kernel), conv_init)
    b = sc.param("bias", (out_ch,), zeros) if bias else None
    return ad.conv2d(x, w, b, stride, padding, groups)


def batch_norm(sc: Scope, x: ad.Node) -> ad.Node:
    c = x.shape[1]
    gamma = sc.param("weight", (c,), ones)
    beta = sc.param("bias", (c,), zeros)
    rm = sc.buffer("running_mean", (c,), zeros)
    rv = sc.buffer("running_var", (c,), ones)
    y, new_rm, new_rv = ad.batch_norm(x, gamma, beta, rm, rv, training=sc.training)
    if sc.training:
        sc.set_buffer("running_mean", new_rm)
        sc.set_buffer("running_var", new_rv)
    return y


def conv_bn(sc: Scope, x: ad.Node, out_ch: int, kernel: int, stride: int = 1,
            padding: int = 0, relu: bool = True) -> ad.Node:
    """conv (no bias) -> BN -> optional ReLU; weights under ``conv.*`` and ``bn.*``."""
    y = batch_norm(sc / "bn", conv(sc / "conv", x, out_ch, kernel, stride, padding, bias=False))
    return ad.relu(y) if relu else y


def linear(sc: Scope, x: ad.Node, out_features: int, bias: bool = True) -> ad.Node:
    w = sc.param("weight", (out_features, x.shape[-1]), linear_init)
    b = sc.param("bias", (out_features,), zeros) if bias else None
    return ad.linear(x, w, b)


def layer_norm(sc: Scope, x: ad.Node) -> ad.Node:
    c = x.shape[-1]
    return ad.layer_norm(x, sc.param("weight", (c,), ones), sc.param("bias", (c,), zeros))


def check_divisible(x: ad.Node, factor: int, what: str) -> None:
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise InvalidArgument(f"{what}: spatial size {h}x{w} must be divisible by {factor}")
