"""Dense numpy kernels with their backward rules.

Every forward kernel is a pure function: inputs are never written to and the
result never shares memory with an input. Values are C-contiguous float arrays
(float32 unless the caller passes float64), feature maps are NCHW and token
sequences are [N, L, C].

Backward kernels live next to their forward counterpart and take the upstream
gradient first. The autograd layer looks them up through this module at call
time, so they can be swapped out in tests.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_EPS = 1e-5
BN_MOMENTUM = 0.1


class InvalidArgument(ValueError):
    """Raised on shape, range or parameter violations."""


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    out = np.array(x, dtype=dtype, copy=True, order="C")
    if out.ndim == 0:
        return out.reshape(())
    if any(d <= 0 for d in out.shape):
        raise InvalidArgument(f"tensor dimensions must be positive, got {out.shape}")
    return out


def _fresh(a: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Return `a` as a contiguous array of `like`'s dtype, never a view of an input."""
    return np.ascontiguousarray(a, dtype=like.dtype)


def _check_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise InvalidArgument(f"{what}: expected rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x, weight, bias, stride, padding, groups):
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    if stride < 1:
        raise InvalidArgument(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise InvalidArgument(f"conv2d: padding must be non-negative, got {padding}")
    if groups < 1:
        raise InvalidArgument(f"conv2d: groups must be positive, got {groups}")
    n, c, h, w = x.shape
    out_c, cg, kh, kw = weight.shape
    if c % groups or out_c % groups:
        raise InvalidArgument(
            f"conv2d: in channels {c} and out channels {out_c} must divide groups={groups}")
    if cg * groups != c:
        raise InvalidArgument(
            f"conv2d: channel dim mismatch, input C={c} but weight expects {cg * groups}")
    if h + 2 * padding < kh:
        raise InvalidArgument(f"conv2d: height {h} + 2*{padding} smaller than kernel {kh}")
    if w + 2 * padding < kw:
        raise InvalidArgument(f"conv2d: width {w} + 2*{padding} smaller than kernel {kw}")
    if bias is not None and bias.shape != (out_c,):
        raise InvalidArgument(f"conv2d: bias shape {bias.shape} != ({out_c},)")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [N, C, Ho, Wo, kh, kw] view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _is_depthwise(weight: np.ndarray, c: int, groups: int) -> bool:
    return groups == c and weight.shape[0] == c and weight.shape[1] == 1


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    Dense convs contract an im2col window view in one BLAS call; depthwise
    convs accumulate tap by tap; other group counts loop over groups.
    """
    _check_conv(x, weight, bias, stride, padding, groups)
    n, c, h, w = x.shape
    out_c, cg, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = _pad(x, padding)

    if groups == 1:
        cols = _windows(xp, kh, kw, stride, ho, wo)
        out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
        out = out.transpose(0, 3, 1, 2)
    elif _is_depthwise(weight, c, groups):
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                           j : j + (wo - 1) * stride + 1 : stride]
                out += patch * weight[:, 0, i, j][None, :, None, None]
    else:
        og = out_c // groups
        parts = [conv2d(x[:, g * cg : (g + 1) * cg], weight[g * og : (g + 1) * og],
                        None, stride, padding, 1) for g in range(groups)]
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return _fresh(out, x)


def conv2d_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    stride: int = 1, padding: int = 0, groups: int = 1):
    """Gradients (dx, dweight, dbias) for `conv2d`."""
    n, c, h, w = x.shape
    out_c, cg, kh, kw = weight.shape
    ho, wo = grad.shape[2:]
    xp = _pad(x, padding)
    gb = grad.sum(axis=(0, 2, 3))

    if groups == 1:
        cols = _windows(xp, kh, kw, stride, ho, wo)
        gw = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
        gcols = np.tensordot(grad, weight, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                    j : j + (wo - 1) * stride + 1 : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    elif _is_depthwise(weight, c, groups):
        gw = np.zeros(weight.shape, dtype=x.dtype)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + (ho - 1) * stride + 1, stride),
                      slice(j, j + (wo - 1) * stride + 1, stride))
                gw[:, 0, i, j] = (grad * xp[sl]).sum(axis=(0, 2, 3))
                gxp[sl] += grad * weight[:, 0, i, j][None, :, None, None]
    else:
        og = out_c // groups
        gxs, gws = [], []
        for g in range(groups):
            gx_g, gw_g, _ = conv2d_backward(grad[:, g * og : (g + 1) * og], x[:, g * cg : (g + 1) * cg],
                                            weight[g * og : (g + 1) * og], stride, padding, 1)
            gxs.append(gx_g)
            gws.append(gw_g)
        return _fresh(np.concatenate(gxs, axis=1), x), _fresh(np.concatenate(gws), x), _fresh(gb, x)

    if padding:
        gx = gxp[:, :, padding:-padding, padding:-padding]
    else:
        gx = gxp
    return _fresh(gx, x), _fresh(gw, x), _fresh(gb, x)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise InvalidArgument(f"eps must be positive, got {eps}")


def _normalize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=axes, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean) * inv_std
    return xhat, inv_std, mean, var


def _normalize_backward(g_xhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray,
                        axes: tuple[int, ...]) -> np.ndarray:
    g = g_xhat.astype(np.float64)
    return inv_std * (g - g.mean(axis=axes, keepdims=True)
                      - xhat * (g * xhat).mean(axis=axes, keepdims=True))


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = DEFAULT_EPS, training: bool = False,
               momentum: float = BN_MOMENTUM):
    """Per-channel batch normalization of an NCHW tensor.

    Returns ``(y, new_running_mean, new_running_var)``. In inference mode the
    running statistics are used and returned unchanged (as copies). In
    training mode batch statistics over (N, H, W) normalize the input and the
    running statistics move toward them by `momentum`; the running variance
    uses the unbiased batch variance.
    """
    _check_eps(eps)
    _check_rank(x, 4, "batch_norm input")
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if p.shape != (c,):
            raise InvalidArgument(f"batch_norm: {name} shape {p.shape} != ({c},)")
    shape = (1, c, 1, 1)
    if training:
        xhat, _, mean, var = _normalize(x, (0, 2, 3), eps)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var.reshape(c) * (count / max(count - 1, 1))
        new_mean = (1 - momentum) * running_mean + momentum * mean.reshape(c)
        new_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        inv_std = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
        xhat = (x - running_mean.reshape(shape)) * inv_std.reshape(shape)
        new_mean, new_var = running_mean.copy(), running_var.copy()
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return _fresh(y, x), _fresh(new_mean, running_mean), _fresh(new_var, running_var)


def batch_norm_backward(grad: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                        running_mean: np.ndarray, running_var: np.ndarray,
                        eps: float = DEFAULT_EPS, training: bool = False):
    """Gradients (dx, dgamma, dbeta); training mode differentiates through batch stats."""
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if training:
        xhat, inv_std, _, _ = _normalize(x, (0, 2, 3), eps)
        gx = _normalize_backward(grad * gamma.reshape(shape), xhat, inv_std, (0, 2, 3))
    else:
        inv_std = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).reshape(shape)
        xhat = (x - running_mean.reshape(shape)) * inv_std
        gx = grad * gamma.reshape(shape) * inv_std
    g64 = grad.astype(np.float64)
    ggamma = (g64 * xhat).sum(axis=(0, 2, 3))
    gbeta = g64.sum(axis=(0, 2, 3))
    return _fresh(gx, x), _fresh(ggamma, gamma), _fresh(gbeta, gamma)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = DEFAULT_EPS) -> np.ndarray:
    """Normalize each token over its last (channel) axis, then apply the affine."""
    _check_eps(eps)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidArgument(f"layer_norm: affine params must have shape ({c},)")
    xhat, _, _, _ = _normalize(x, (x.ndim - 1,), eps)
    return _fresh(xhat * gamma + beta, x)


def layer_norm_backward(grad, x, gamma, eps: float = DEFAULT_EPS):
    axes = (x.ndim - 1,)
    xhat, inv_std, _, _ = _normalize(x, axes, eps)
    gx = _normalize_backward(grad * gamma, xhat, inv_std, axes)
    lead = tuple(range(x.ndim - 1))
    g64 = grad.astype(np.float64)
    return _fresh(gx, x), _fresh((g64 * xhat).sum(axis=lead), gamma), _fresh(g64.sum(axis=lead), gamma)


def instance_norm(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Zero-mean / unit-variance normalization of every (n, c) plane; no affine."""
    _check_eps(eps)
    _check_rank(x, 4, "instance_norm input")
    xhat, _, _, _ = _normalize(x, (2, 3), eps)
    return _fresh(xhat, x)


def instance_norm_backward(grad, x, eps: float = DEFAULT_EPS):
    xhat, inv_std, _, _ = _normalize(x, (2, 3), eps)
    return _fresh(_normalize_backward(grad, xhat, inv_std, (2, 3)), x)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _fresh(e / e.sum(axis=axis, keepdims=True), x)


def softmax_backward(grad, y, axis: int = -1):
    return _fresh(y * (grad - (grad * y).sum(axis=axis, keepdims=True)), y)


def relu(x: np.ndarray) -> np.ndarray:
    return _fresh(np.maximum(x, 0), x)


def relu_backward(grad, x):
    return _fresh(grad * (x > 0), x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return _fresh(np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), x)


def sigmoid_backward(grad, y):
    return _fresh(grad * y * (1 - y), y)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf) GELU."""
    return _fresh(0.5 * x * (1.0 + erf(x * _INV_SQRT2)), x)


def gelu_backward(grad, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _fresh(grad * (cdf + x * pdf), x)


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product over equal leading dims, [..., M, K] @ [..., K, P]."""
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidArgument(f"matmul: operands must be at least rank 2, got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidArgument(f"matmul: inner dims differ, {a.shape[-1]} vs {b.shape[-2]}")
    if a.shape[:-2] != b.shape[:-2]:
        raise InvalidArgument(f"matmul: batch dims differ, {a.shape[:-2]} vs {b.shape[:-2]}")
    return _fresh(np.matmul(a, b), a)


def matmul_backward(grad, a, b):
    return _fresh(np.matmul(grad, np.swapaxes(b, -1, -2)), a), \
        _fresh(np.matmul(np.swapaxes(a, -1, -2), grad), b)


def interp_matrix(in_size: int, out_size: int, scale: float | None = None) -> np.ndarray:
    """Linear interpolation weights [out_size, in_size] on half-pixel centres.

    Source coordinate of output pixel d is (d + 0.5) / scale - 0.5, clamped to
    the valid range. `scale` defaults to out_size / in_size.
    """
    scale = out_size / in_size if scale is None else scale
    m = np.zeros((out_size, in_size), dtype=np.float64)
    src = (np.arange(out_size) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def upsample(x: np.ndarray, factor: int, mode: str = "nearest") -> np.ndarray:
    """Integer-factor spatial upsampling of an NCHW tensor."""
    _check_rank(x, 4, "upsample input")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise InvalidArgument(f"upsample: factor must be a positive int, got {factor}")
    if mode == "nearest":
        return _fresh(x.repeat(factor, axis=2).repeat(factor, axis=3), x)
    if mode == "bilinear":
        h, w = x.shape[2:]
        ah = interp_matrix(h, h * factor).astype(x.dtype)
        aw = interp_matrix(w, w * factor).astype(x.dtype)
        return _fresh(np.matmul(ah, np.matmul(x, aw.T)), x)
    raise InvalidArgument(f"upsample: unknown mode {mode!r}")


def upsample_backward(grad, factor: int, mode: str = "nearest"):
    n, c, fh, fw = grad.shape
    h, w = fh // factor, fw // factor
    if mode == "nearest":
        return _fresh(grad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)), grad)
    ah = interp_matrix(h, fh).astype(grad.dtype)
    aw = interp_matrix(w, fw).astype(grad.dtype)
    return _fresh(np.matmul(ah.T, np.matmul(grad, aw)), grad)


def concat(xs: Sequence[np.ndarray], axis: int = 1) -> np.ndarray:
    if not xs:
        raise InvalidArgument("concat: empty input list")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(x.shape, ref))
                                     if k != axis % len(ref)):
            raise InvalidArgument(f"concat: incompatible shapes {ref} and {x.shape} on axis {axis}")
    return _fresh(np.concatenate(xs, axis=axis), xs[0])


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise InvalidArgument(f"add: shapes differ, {a.shape} vs {b.shape}")
    return _fresh(a + b, a)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise InvalidArgument(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    return _fresh(a * b, a)


def nchw_to_tokens(x: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [N, H*W, C], row-major over (H, W)."""
    _check_rank(x, 4, "nchw_to_tokens input")
    n, c, h, w = x.shape
    return _fresh(x.reshape(n, c, h * w).transpose(0, 2, 1), x)


def tokens_to_nchw(t: np.ndarray, h: int, w: int) -> np.ndarray:
    _check_rank(t, 3, "tokens_to_nchw input")
    n, l, c = t.shape
    if l != h * w:
        raise InvalidArgument(f"tokens_to_nchw: {l} tokens do not form a {h}x{w} grid")
    return _fresh(t.transpose(0, 2, 1).reshape(n, c, h, w), t)
