r"""
Convolutions and their gradients
================================

The network is built from four kernels: full 3D convolution, depthwise 3D
convolution, pointwise (1x1x1) convolution and batch norm. This script runs
each one on a small clip and checks it against a slow nested-loop
convolution. It also checks that depthwise followed by pointwise equals a
full convolution with the product kernel. Finally it compares a
hand-written gradient with central finite differences.

Run with ``python3 demos/01_convolutions_and_gradients.py``.
"""
import itertools

import numpy as np

from drowsy3d import tensor as T

rng = np.random.default_rng(0)

# %%
# A batch of one clip: height 6, width 5, 4 frames, 2 channels. Arrays are
# batch-first and channels-last; the number of spatial axes comes from the
# kernel, so the same call handles 2D maps too.
x = rng.normal(size=(1, 6, 5, 4, 2))
w = rng.normal(size=(3, 3, 3, 2, 4))
params = T.ConvParams(w, stride=(2, 2, 2))
y = T.conv3d(x, params)
print("conv3d", x.shape, "->", y.shape)  # SAME padding: ceil(n / stride)


def nested_loop_conv(x, w, stride):
    """Textbook SAME convolution, one output element at a time."""
    kernel, cout = w.shape[:3], w.shape[-1]
    outs, pads = [], []
    for n, k, s in zip(x.shape[1:4], kernel, stride):
        out = -(-n // s)
        outs.append(out)
        pads.append(max((out - 1) * s + k - n, 0) // 2)
    y = np.zeros((x.shape[0], *outs, cout))
    for pos in itertools.product(*map(range, outs)):
        for tap in itertools.product(*map(range, kernel)):
            src = [p * s + t - lo for p, s, t, lo in zip(pos, stride, tap, pads)]
            if all(0 <= i < n for i, n in zip(src, x.shape[1:4])):
                y[(0, *pos)] += x[(0, *src)] @ w[tap]
    return y


print("max difference to the nested loop:",
      np.abs(y - nested_loop_conv(x, w, (2, 2, 2))).max())

# %%
# Depthwise separable = depthwise then pointwise. Its output equals a full
# convolution whose kernel is the outer product of the two.
dw = rng.normal(size=(3, 3, 3, 2))
pw = rng.normal(size=(2, 4))
separable = T.pointwise_conv(T.depthwise_conv3d(x, T.ConvParams(dw, (1, 1, 1), depthwise=True)),
                             pw)
full = T.conv3d(x, T.ConvParams(dw[..., :, None] * pw, (1, 1, 1)))
print("separable vs full:", np.abs(separable - full).max())

# %%
# Gradients. ``conv3d_backward`` returns input, weight and bias gradients for
# an upstream gradient ``dy``. With loss = sum(y * r), dy is simply r.
r = rng.normal(size=y.shape)
dx, dw_, _ = T.conv3d_backward(r, x, params)
eps = 1e-5
for idx in [(0, 1, 2, 0, 1), (0, 5, 4, 3, 0)]:
    old = x[idx]
    x[idx] = old + eps
    up = np.sum(T.conv3d(x, params) * r)
    x[idx] = old - eps
    down = np.sum(T.conv3d(x, params) * r)
    x[idx] = old
    print(f"d loss / d x{idx}: analytic {dx[idx]:+.8f}  numeric {(up - down) / (2 * eps):+.8f}")

# %%
# Batch norm returns the new running statistics instead of mutating its
# parameters, so a forward pass never has hidden side effects.
bn = T.BatchNormParams.fresh(4, np.float64)
bn = T.BatchNormParams(bn.gamma, bn.beta, bn.running_mean, bn.running_var, training=True)
out, mean, var, cache = T.batch_norm(y, bn)
print("normalized channel means:", out.reshape(-1, 4).mean(0).round(12))
print("running mean moved from 0 to", mean.round(4))
