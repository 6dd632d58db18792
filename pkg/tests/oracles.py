"""Scalar-loop reference implementations, written independently of the kernels."""
import math

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * stride + u - padding
                                z = j * stride + v - padding
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += float(x[ni, g * cg + ci, y, z]) * float(w[oc, ci, u, v])
                    out[ni, oc, i, j] = acc
    return out


def matmul(a, b):
    m, k = a.shape
    _, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(k))
    return out


def batch_norm_train(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.zeros(x.shape)
    for ch in range(c):
        vals = [float(x[a, ch, i, j]) for a in range(n) for i in range(h) for j in range(w)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for a in range(n):
            for i in range(h):
                for j in range(w):
                    out[a, ch, i, j] = (x[a, ch, i, j] - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def layer_norm(x, gamma, beta, eps):
    out = np.zeros(x.shape)
    for idx in np.ndindex(x.shape[:-1]):
        tok = [float(v) for v in x[idx]]
        mu = sum(tok) / len(tok)
        var = sum((v - mu) ** 2 for v in tok) / len(tok)
        for c, v in enumerate(tok):
            out[idx + (c,)] = (v - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def instance_norm(x, eps):
    out = np.zeros(x.shape)
    for a in range(x.shape[0]):
        for c in range(x.shape[1]):
            vals = [float(v) for v in x[a, c].ravel()]
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            out[a, c] = (x[a, c] - mu) / math.sqrt(var + eps)
    return out


def softmax(vec):
    e = [math.exp(v) for v in vec]
    s = sum(e)
    return [v / s for v in e]


def gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def bilinear_up(x, f):
    """Per-pixel half-pixel bilinear interpolation of an [H, W] array."""
    h, w = x.shape
    out = np.zeros((h * f, w * f))

    def coord(d, size):
        s = min(max((d + 0.5) / f - 0.5, 0.0), size - 1)
        i0 = int(math.floor(s))
        return i0, min(i0 + 1, size - 1), s - i0

    for i in range(h * f):
        y0, y1, ly = coord(i, h)
        for j in range(w * f):
            x0, x1, lx = coord(j, w)
            out[i, j] = ((1 - ly) * ((1 - lx) * x[y0, x0] + lx * x[y0, x1])
                         + ly * ((1 - lx) * x[y1, x0] + lx * x[y1, x1]))
    return out


def linear_attention(q, k, v, eps=1e-8):
    """Per-position weights w[m, n] = (1 + qm.kn) / (N + qm.sum_n kn); q, k [Ck, L], v [C, L]."""
    ck, length = q.shape
    qn = [[q[c, m] / math.sqrt(sum(q[t, m] ** 2 for t in range(ck)) + eps) for m in range(length)]
          for c in range(ck)]
    kn = [[k[c, m] / math.sqrt(sum(k[t, m] ** 2 for t in range(ck)) + eps) for m in range(length)]
          for c in range(ck)]
    out = np.zeros(v.shape)
    weights = np.zeros((length, length))
    for m in range(length):
        ksum = [sum(kn[c][t] for t in range(length)) for c in range(ck)]
        den = length + sum(qn[c][m] * ksum[c] for c in range(ck))
        for n in range(length):
            weights[m, n] = (1 + sum(qn[c][m] * kn[c][n] for c in range(ck))) / den
        for c in range(v.shape[0]):
            out[c, m] = sum(weights[m, n] * v[c, n] for n in range(length))
    return out, weights


def metrics_from_pixels(pred, ref, k):
    """OA, per-class IoU (nan if undefined) and F1 by direct pixel counting."""
    pred = [int(p) for p in np.ravel(pred)]
    ref = [int(r) for r in np.ravel(ref)]
    total = len(ref)
    correct = sum(1 for p, r in zip(pred, ref) if p == r)
    iou, f1 = [], []
    for c in range(k):
        tp = sum(1 for p, r in zip(pred, ref) if p == c and r == c)
        fp = sum(1 for p, r in zip(pred, ref) if p == c and r != c)
        fn = sum(1 for p, r in zip(pred, ref) if p != c and r == c)
        iou.append(tp / (tp + fp + fn) if tp + fp + fn else float("nan"))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return correct / total, iou, f1
