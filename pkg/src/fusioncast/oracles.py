"""Scalar-loop reference implementations used as independent oracles.

These are deliberately naive: plain Python loops over indices, no
vectorization shared with the production code paths.
"""

from __future__ import annotations

import math
import time

import numpy as np


def conv2d_loop(x, w, b, stride=1, pad=0):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                s = b[o] if b is not None else 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for q in range(kw):
                            r, cc = i * stride + a - pad, j * stride + q - pad
                            if 0 <= r < h and 0 <= cc < wd:
                                s += x[c, r, cc] * w[o, c, a, q]
                out[o, i, j] = s
    return out


def deconv2d_loop(x, w, b, stride=2, pad=0):
    """Transposed convolution by scattering each input pixel; w is (in, out, kh, kw)."""
    c_in, h, wd = x.shape
    _, c_out, kh, kw = w.shape
    ho, wo = (h - 1) * stride - 2 * pad + kh, (wd - 1) * stride - 2 * pad + kw
    out = np.zeros((c_out, ho, wo))
    for c in range(c_in):
        for i in range(h):
            for j in range(wd):
                for o in range(c_out):
                    for a in range(kh):
                        for q in range(kw):
                            r, cc = i * stride + a - pad, j * stride + q - pad
                            if 0 <= r < ho and 0 <= cc < wo:
                                out[o, r, cc] += x[c, i, j] * w[c, o, a, q]
    if b is not None:
        for o in range(c_out):
            out[o] += b[o]
    return out


def channel_pool_loop(x):
    c, h, w = x.shape
    out = np.zeros((2, h, w))
    for i in range(h):
        for j in range(w):
            vals = [x[k, i, j] for k in range(c)]
            out[0, i, j] = sum(vals) / c
            out[1, i, j] = max(vals)
    return out


def global_pool_loop(x):
    c, h, w = x.shape
    avg, mx = np.zeros(c), np.zeros(c)
    for k in range(c):
        vals = [x[k, i, j] for i in range(h) for j in range(w)]
        avg[k] = sum(vals) / len(vals)
        mx[k] = max(vals)
    return avg, mx


def gated_fuse_loop(m, f_prime, f):
    c, h, w = f.shape
    out = np.zeros_like(f)
    for k in range(c):
        for i in range(h):
            for j in range(w):
                out[k, i, j] = m[0, i, j] * f_prime[k, i, j] + f[k, i, j]
    return out


def mae_loop(p, g):
    p, g = np.ravel(p), np.ravel(g)
    return sum(abs(float(a) - float(b)) for a, b in zip(p, g)) / len(p)


def rmse_loop(p, g):
    p, g = np.ravel(p), np.ravel(g)
    return math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(p, g)) / len(p))


def contingency_loop(p, g, tau):
    tp = fp = fn = tn = 0
    for a, b in zip(np.ravel(p), np.ravel(g)):
        fa, ob = a >= tau, b >= tau
        if fa and ob:
            tp += 1
        elif fa:
            fp += 1
        elif ob:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def csi_loop(p, g, tau):
    tp, fp, fn, _ = contingency_loop(p, g, tau)
    return tp / (tp + fp + fn) if tp + fp + fn else float("nan")


# -- suites used by ``fusioncast verify`` ------------------------------------------

def conv_pool_suite(trials: int = 20, seed: int = 0, tol: float = 1e-12) -> tuple[bool, float]:
    """Compare production conv/deconv/pooling against the loops; returns (passed, max diff)."""
    from . import autodiff as ad
    from .layers import channel_pool, global_pool

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        c_in, c_out = rng.integers(1, 4, size=2)
        n = int(rng.integers(3, 9))
        k = int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(c_in, n, n))
        w = rng.normal(size=(c_out, c_in, k, k))
        b = rng.normal(size=c_out)
        got = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride, pad).data
        worst = max(worst, np.abs(got - conv2d_loop(x, w, b, stride, pad)).max())
        wt = rng.normal(size=(c_in, c_out, k + 1, k + 1))
        got = ad.conv_transpose2d(ad.Tensor(x), ad.Tensor(wt), ad.Tensor(b), 2, 0).data
        worst = max(worst, np.abs(got - deconv2d_loop(x, wt, b, 2, 0)).max())
        worst = max(worst, np.abs(channel_pool(ad.Tensor(x)).data - channel_pool_loop(x)).max())
        a, m = global_pool(ad.Tensor(x))
        ra, rm = global_pool_loop(x)
        worst = max(worst, np.abs(a.data - ra).max(), np.abs(m.data - rm).max())
    return worst < tol, float(worst)


def metrics_suite(trials: int = 200, seed: int = 0, tol: float = 1e-12) -> tuple[bool, float]:
    from .metrics import binarize, contingency, csi, mae, rmse

    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(trials):
        h, w = rng.integers(1, 17, size=2)
        p = rng.gamma(0.6, 2.0, size=(h, w))
        g = rng.gamma(0.6, 2.0, size=(h, w))
        worst = max(worst, abs(mae(p, g) - mae_loop(p, g)), abs(rmse(p, g) - rmse_loop(p, g)))
        for tau in (0.1, 1.0, 4.0):
            t = contingency(binarize(p, tau), binarize(g, tau))
            ok &= (t.tp, t.fp, t.fn, t.tn) == contingency_loop(p, g, tau)
            a, r = csi(t), csi_loop(p, g, tau)
            if math.isnan(a) or math.isnan(r):
                ok &= math.isnan(a) and math.isnan(r)
            else:
                worst = max(worst, abs(a - r))
    return bool(ok and worst < tol), float(worst)


def timed(fn, *args, **kwargs):
    t0 = time.time()
    out = fn(*args, **kwargs)
    return out, time.time() - t0
