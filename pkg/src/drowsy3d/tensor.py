"""Layer primitives with forward and gradient computations.

Activations are numpy arrays laid out batch first, channels last:
``(batch, *spatial, channels)``. For video tensors the spatial axes are
height, width, frames. The number of spatial axes an op works on is taken
from the rank of its kernel, so the same routines serve 3D and 2D layers.

All forward functions are pure. Gradient functions take the upstream
gradient plus whatever the forward pass needs to be replayed and return
gradients shaped like their targets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid layer hyperparameters."""


class GraphError(RuntimeError):
    """Raised when a backward pass is requested without a recorded forward."""


@dataclass(frozen=True)
class ConvParams:
    """Weights and stride of a full or depthwise convolution.

    Full convolutions carry weights of shape ``(*kernel, in_ch, out_ch)``;
    depthwise convolutions ``(*kernel, channels)``.
    """

    weights: np.ndarray
    stride: tuple[int, ...]
    depthwise: bool = False
    bias: np.ndarray | None = None

    def __post_init__(self):
        stride = tuple(int(s) for s in self.stride)
        object.__setattr__(self, "stride", stride)
        if any(s < 1 for s in stride):
            raise ConfigError(f"strides must be >= 1, got {stride}")
        nk = self.weights.ndim - (1 if self.depthwise else 2)
        if nk < 1 or len(stride) != nk:
            raise ShapeError(
                f"weights {self.weights.shape} do not match stride {stride}"
            )

    @property
    def kernel(self) -> tuple[int, ...]:
        return self.weights.shape[: len(self.stride)]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[len(self.stride)]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-1]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99
    training: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.momentum < 1:
            raise ConfigError(f"momentum must be in (0, 1), got {self.momentum}")
        n = len(self.gamma)
        if not (len(self.beta) == len(self.running_mean) == len(self.running_var) == n):
            raise ShapeError("batch norm parameter vectors differ in length")

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_size, pad_before, pad_after)`` for SAME zero padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _geometry(x_shape, kernel, stride):
    outs, pads = [], [(0, 0)]
    for size, k, s in zip(x_shape[1:-1], kernel, stride):
        o, lo, hi = same_padding(size, k, s)
        outs.append(o)
        pads.append((lo, hi))
    pads.append((0, 0))
    return tuple(outs), pads


def _tap_slices(tap, stride, outs):
    return (slice(None),) + tuple(
        slice(t, t + s * (o - 1) + 1, s) for t, s, o in zip(tap, stride, outs)
    ) + (slice(None),)


def _check_input(x: np.ndarray, params: ConvParams):
    nk = len(params.stride)
    if x.ndim != nk + 2:
        raise ShapeError(
            f"input {x.shape} must have rank {nk + 2} for kernel {params.kernel}"
        )
    if x.shape[-1] != params.in_channels:
        raise ShapeError(
            f"input channels {x.shape[-1]} (input {x.shape}) do not match "
            f"weights {params.weights.shape}"
        )


def conv3d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Full convolution with SAME padding.

    Despite the name this handles any number of spatial axes; the kernel
    rank decides. Patches are gathered tap by tap into one matrix so the
    channel contraction is a single matmul.
    """
    if params.depthwise:
        return depthwise_conv3d(x, params)
    _check_input(x, params)
    kernel, stride = params.kernel, params.stride
    outs, pads = _geometry(x.shape, kernel, stride)
    w = params.weights
    if all(k == 1 for k in kernel) and all(s == 1 for s in stride):
        y = x @ w.reshape(w.shape[-2], w.shape[-1])
    else:
        xp = np.pad(x, pads)
        cols = [xp[_tap_slices(tap, stride, outs)] for tap in np.ndindex(*kernel)]
        patches = np.concatenate(cols, axis=-1)
        y = patches @ w.reshape(-1, w.shape[-1])
    if params.bias is not None:
        y = y + params.bias
    return y


def conv3d_backward(dy: np.ndarray, x: np.ndarray, params: ConvParams):
    """Gradients of :func:`conv3d` w.r.t. input, weights and bias."""
    if params.depthwise:
        return depthwise_conv3d_backward(dy, x, params)
    kernel, stride = params.kernel, params.stride
    outs, pads = _geometry(x.shape, kernel, stride)
    w = params.weights
    cin, cout = w.shape[-2], w.shape[-1]
    db = dy.reshape(-1, cout).sum(axis=0) if params.bias is not None else None
    if all(k == 1 for k in kernel) and all(s == 1 for s in stride):
        w2 = w.reshape(cin, cout)
        dx = dy @ w2.T
        dw = (x.reshape(-1, cin).T @ dy.reshape(-1, cout)).reshape(w.shape)
        return dx, dw, db
    xp = np.pad(x, pads)
    taps = list(np.ndindex(*kernel))
    cols = [xp[_tap_slices(tap, stride, outs)] for tap in taps]
    patches = np.concatenate(cols, axis=-1)
    dy2 = dy.reshape(-1, cout)
    dw = (patches.reshape(-1, patches.shape[-1]).T @ dy2).reshape(w.shape)
    dpatches = dy @ w.reshape(-1, cout).T
    dxp = np.zeros_like(xp)
    for i, tap in enumerate(taps):
        dxp[_tap_slices(tap, stride, outs)] += dpatches[..., i * cin:(i + 1) * cin]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape))
    return dxp[crop], dw, db


def depthwise_conv3d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Per-channel convolution with SAME padding; no cross-channel mixing."""
    if not params.depthwise:
        raise ShapeError(f"weights {params.weights.shape} are not depthwise")
    _check_input(x, params)
    kernel, stride = params.kernel, params.stride
    outs, pads = _geometry(x.shape, kernel, stride)
    w = params.weights
    xp = np.pad(x, pads)
    y = np.zeros((x.shape[0],) + outs + (x.shape[-1],), dtype=np.result_type(x, w))
    for tap in np.ndindex(*kernel):
        y += xp[_tap_slices(tap, stride, outs)] * w[tap]
    if params.bias is not None:
        y += params.bias
    return y


def depthwise_conv3d_backward(dy: np.ndarray, x: np.ndarray, params: ConvParams):
    kernel, stride = params.kernel, params.stride
    outs, pads = _geometry(x.shape, kernel, stride)
    w = params.weights
    c = w.shape[-1]
    xp = np.pad(x, pads)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    dy2 = dy.reshape(-1, c)
    for tap in np.ndindex(*kernel):
        sl = _tap_slices(tap, stride, outs)
        # sum over every axis but channels, via a dot to avoid a temporary
        dw[tap] = np.einsum("ij,ij->j", xp[sl].reshape(-1, c), dy2)
        dxp[sl] += dy * w[tap]
    db = dy2.sum(axis=0) if params.bias is not None else None
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape))
    return dxp[crop], dw, db


def pointwise_conv(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Linear map across channels at every position."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"input {x.shape} incompatible with pointwise weights {weights.shape}"
        )
    return x @ weights


def pointwise_conv_backward(dy, x, weights):
    cin, cout = weights.shape
    return dy @ weights.T, x.reshape(-1, cin).T @ dy.reshape(-1, cout)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0, 6)


def relu6_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * ((x > 0) & (x < 6))


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def batch_norm(x: np.ndarray, params: BatchNormParams):
    """Normalize over every axis except channels.

    Returns ``(y, running_mean, running_var, cache)``. In inference mode the
    running statistics are returned unchanged and ``cache`` is None. The
    caller owns the updated statistics; ``params`` is not modified.
    """
    c = x.shape[-1]
    if c != len(params.gamma):
        raise ShapeError(f"input channels {c} != batch norm size {len(params.gamma)}")
    if not params.epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if not params.training:
        inv_std = 1.0 / np.sqrt(params.running_var + params.epsilon)
        scale = (params.gamma * inv_std).astype(x.dtype, copy=False)
        shift = (params.beta - params.running_mean * params.gamma * inv_std).astype(
            x.dtype, copy=False
        )
        return x * scale + shift, params.running_mean, params.running_var, None
    x2 = x.reshape(-1, c)
    mean = x2.mean(axis=0)
    var = x2.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mean) * inv_std
    y = xhat * params.gamma + params.beta
    m = params.momentum
    n = x2.shape[0]
    unbiased = var * n / max(n - 1, 1)
    new_mean = m * params.running_mean + (1 - m) * mean
    new_var = m * params.running_var + (1 - m) * unbiased
    return y, new_mean.astype(params.running_mean.dtype), new_var.astype(
        params.running_var.dtype
    ), BatchNormCache(xhat, inv_std, params.gamma)


def batch_norm_backward(dy: np.ndarray, cache: BatchNormCache | None):
    """Gradients of training-mode batch norm: ``(dx, dgamma, dbeta)``."""
    if cache is None:
        raise GraphError("batch norm backward needs a training-mode forward")
    c = dy.shape[-1]
    dy2 = dy.reshape(-1, c)
    xhat2 = cache.xhat.reshape(-1, c)
    n = dy2.shape[0]
    dbeta = dy2.sum(axis=0)
    dgamma = np.einsum("ij,ij->j", dy2, xhat2)
    dx = (cache.gamma * cache.inv_std / n) * (n * dy - dbeta - cache.xhat * dgamma)
    return dx, dgamma, dbeta


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over all spatial axes: ``(B, *spatial, C) -> (B, C)``."""
    return x.mean(axis=tuple(range(1, x.ndim - 1)))


def global_avg_pool_backward(dy: np.ndarray, x_shape: Sequence[int]) -> np.ndarray:
    count = int(np.prod(x_shape[1:-1]))
    expand = (dy.shape[0],) + (1,) * (len(x_shape) - 2) + (dy.shape[-1],)
    return np.broadcast_to(dy.reshape(expand) / count, tuple(x_shape)).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target):
    """Two-class softmax and mean negative log-likelihood.

    ``logits`` is ``(2,)`` or ``(B, 2)``; ``target`` an int or int array.
    Returns ``(probs, loss)``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    l2 = np.atleast_2d(logits)
    if l2.shape[-1] != 2:
        raise ShapeError(f"expected 2 logits per sample, got {logits.shape}")
    t = np.atleast_1d(np.asarray(target))
    if t.shape[0] != l2.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {l2.shape[0]} samples")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError(f"targets must be 0 or 1, got {t}")
    t = t.astype(int)
    z = l2 - l2.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    nll = logsum - z[np.arange(len(t)), t]
    probs = softmax(l2)
    loss = float(nll.mean())
    return (probs[0] if single else probs), loss


def softmax_cross_entropy_backward(probs: np.ndarray, target) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the logits."""
    p2 = np.atleast_2d(probs)
    t = np.atleast_1d(np.asarray(target)).astype(int)
    g = p2.copy()
    g[np.arange(len(t)), t] -= 1
    g /= len(t)
    return g[0] if np.ndim(probs) == 1 else g


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


__all__ = [
    "BatchNormParams",
    "ConfigError",
    "ConvParams",
    "GraphError",
    "ShapeError",
    "batch_norm",
    "batch_norm_backward",
    "conv3d",
    "conv3d_backward",
    "depthwise_conv3d",
    "depthwise_conv3d_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "he_normal",
    "pointwise_conv",
    "pointwise_conv_backward",
    "relu6",
    "relu6_backward",
    "residual_add",
    "same_padding",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_backward",
]
