"""Slow, obviously-correct reference implementations used only by the tests.

Everything here is scalar loops in float64 and shares no code with the package.
"""
import math

import numpy as np


def conv_loop(x, w, b=None, stride=1, pad=0, groups=1):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c1, h, wd = x.shape
    c2, cg, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out_per_group = c2 // groups
    y = np.zeros((n, c2, ho, wo))
    for i in range(n):
        for o in range(c2):
            g = o // out_per_group
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cg):
                        for u in range(k):
                            for v in range(k):
                                yy = r * stride + u - pad
                                xx = s * stride + v - pad
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[i, g * cg + ci, yy, xx] * w[o, ci, u, v]
                    y[i, o, r, s] = acc
    return y


def bn_infer_loop(x, gamma, beta, mean, var, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    y = np.empty_like(x)
    n, c, h, w = x.shape
    for ch in range(c):
        scale = float(gamma[ch]) / math.sqrt(float(var[ch]) + eps)
        for i in range(n):
            for r in range(h):
                for s in range(w):
                    y[i, ch, r, s] = scale * (x[i, ch, r, s] - float(mean[ch])) + float(beta[ch])
    return y


def bn_train_loop(x, gamma, beta, eps=1e-5):
    """Normalization by biased batch statistics; returns (y, batch_mean, unbiased_var)."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    y = np.empty_like(x)
    means, uvars = np.empty(c), np.empty(c)
    for ch in range(c):
        vals = [x[i, ch, r, s] for i in range(n) for r in range(h) for s in range(w)]
        m = sum(vals) / len(vals)
        v = sum((t - m) ** 2 for t in vals) / len(vals)
        means[ch], uvars[ch] = m, v * len(vals) / (len(vals) - 1)
        for i in range(n):
            for r in range(h):
                for s in range(w):
                    y[i, ch, r, s] = float(gamma[ch]) * (x[i, ch, r, s] - m) / math.sqrt(v + eps) + float(beta[ch])
    return y, means, uvars


def quantize_scalar(v, scale, qmin=-127, qmax=127):
    t = v / scale
    q = math.floor(abs(t) + 0.5)
    q = q if t >= 0 else -q
    return max(qmin, min(qmax, q))


def fake_quant_loop(x, scale, qmin=-127, qmax=127, axis=None):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        s = scale if axis is None else scale[idx[axis]]
        out[idx] = quantize_scalar(x[idx], s, qmin, qmax) * s
    return out


def deploy_forward_loop(convs, head_w, head_b, x, hook=None):
    """Deploy forward built from the loop conv. ``convs`` is a list of (w, b, stride, groups)."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b, stride, groups) in enumerate(convs):
        inp, ww = (h, w) if hook is None else hook(f"convs.{i}", h, w)
        h = np.maximum(conv_loop(inp, ww, b, stride, 1, groups), 0)
    pooled = h.mean(axis=(2, 3))
    inp, ww = (pooled, head_w) if hook is None else hook("head", pooled, head_w)
    return inp @ np.asarray(ww, dtype=np.float64).T + head_b


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar f() w.r.t. every element of arr (modified in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f()
        flat[i] = o - h
        fm = f()
        flat[i] = o
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g
