"""Slow reference implementations used only by the tests."""
import itertools

import numpy as np


def same_pad(size, k, s):
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2


def direct_conv(x, w, stride, depthwise=False):
    """Nested-loop SAME convolution of one batch-first, channels-last input."""
    nk = len(stride)
    kernel = w.shape[:nk]
    geo = [same_pad(n, k, s) for n, k, s in zip(x.shape[1:-1], kernel, stride)]
    outs = [g[0] for g in geo]
    cout = w.shape[-1]
    y = np.zeros((x.shape[0], *outs, cout))
    for b in range(x.shape[0]):
        for pos in itertools.product(*[range(o) for o in outs]):
            for tap in itertools.product(*[range(k) for k in kernel]):
                src = [p * s + t - lo for p, s, t, (_, lo) in zip(pos, stride, tap, geo)]
                if any(i < 0 or i >= n for i, n in zip(src, x.shape[1:-1])):
                    continue
                v = x[(b, *src)]
                if depthwise:
                    y[(b, *pos)] += v * w[tap]
                else:
                    y[(b, *pos)] += v @ w[tap]
    return y


def finite_difference(f, x, idx, eps=1e-5):
    """Central difference of scalar ``f`` w.r.t. ``x[idx]`` (modifies and restores x)."""
    old = x[idx]
    x[idx] = old + eps
    fp = f()
    x[idx] = old - eps
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * eps)


def rel_err(a, b):
    return abs(a - b) / max(abs(a) + abs(b), 1e-8)
