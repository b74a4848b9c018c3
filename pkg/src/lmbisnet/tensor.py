"""Forward and backward kernels on dense NCHW arrays.

Tensors are plain ``numpy.ndarray`` objects of shape
``(batch, channels, height, width)``. Every kernel preserves the dtype of
its input, so the same code runs in float32 for training and in float64
inside :func:`grad_check`. Kernels raise :class:`NonFiniteError` instead
of returning NaN or Inf.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite values in result")
    return arr


def _check_4d(x: np.ndarray, where: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{where}: expected a 4-D (N, C, H, W) array, got shape {x.shape}")


@dataclass
class ConvParams:
    """Weights of a 2-D convolution.

    ``weight`` is ``(out, in, k, k)`` for :func:`conv2d` and
    ``(in, out, 2, 2)`` for :func:`conv_transpose2d`.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int | None = None

    def __post_init__(self) -> None:
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"weight must be (a, b, k, k), got {self.weight.shape}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def pad(self) -> int:
        if self.padding is None:
            k = self.kernel_size
            if k % 2 == 0:
                raise ValueError(f"same padding requires an odd kernel, got k={k}")
            return (k - 1) // 2
        return self.padding


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def fresh(cls, channels: int, dtype=DTYPE) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


# -- convolution -------------------------------------------------------------


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlation with zero padding, plus bias.

    Computed as k*k shifted matrix products, which keeps memory at the
    size of the output rather than an im2col buffer.
    """
    _check_4d(x, "conv2d")
    w, s, p = params.weight, params.stride, params.pad
    out_c, in_c, k, _ = w.shape
    if x.shape[1] != in_c:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {in_c}")
    if params.bias.shape != (out_c,):
        raise ValueError("conv2d: bias length must equal out_channels")
    n, _, h, wd = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    # accumulate in NHWC, transpose once at the end
    out = np.zeros((n, ho, wo, out_c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
    out += params.bias
    return _check_finite(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), "conv2d")


def conv2d_backward(x: np.ndarray, params: ConvParams, dy: np.ndarray):
    """Return ``(dx, dweight, dbias)`` for :func:`conv2d`."""
    w, s, p = params.weight, params.stride, params.pad
    out_c, in_c, k, _ = w.shape
    n, _, h, wd = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if dy.shape != (n, out_c, ho, wo):
        raise ValueError(f"conv2d_backward: upstream shape {dy.shape} != {(n, out_c, ho, wo)}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
            dw[:, :, i, j] = np.tensordot(dy, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
            dxp[sl] += np.tensordot(w[:, :, i, j], dy, axes=([0], [1])).transpose(1, 0, 2, 3)
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    db = dy.sum(axis=(0, 2, 3))
    return (
        _check_finite(np.ascontiguousarray(dx), "conv2d_backward"),
        _check_finite(dw, "conv2d_backward"),
        _check_finite(db, "conv2d_backward"),
    )


def conv_transpose2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """2x2, stride-2 transposed convolution; exactly doubles H and W."""
    _check_4d(x, "conv_transpose2d")
    w = params.weight
    in_c, out_c, k, _ = w.shape
    if k != 2 or params.stride != 2:
        raise ValueError("conv_transpose2d supports only k=2, stride=2")
    if x.shape[1] != in_c:
        raise ValueError(f"conv_transpose2d: input has {x.shape[1]} channels, weight expects {in_c}")
    n, _, h, wd = x.shape
    # (N, H, W, O, 2, 2) -> (N, O, H, 2, W, 2)
    y = np.tensordot(x, w, axes=([1], [0])).transpose(0, 3, 1, 4, 2, 5)
    y = y.reshape(n, out_c, 2 * h, 2 * wd) + params.bias[None, :, None, None]
    return _check_finite(np.ascontiguousarray(y), "conv_transpose2d")


def conv_transpose2d_backward(x: np.ndarray, params: ConvParams, dy: np.ndarray):
    w = params.weight
    in_c, out_c, _, _ = w.shape
    n, _, h, wd = x.shape
    if dy.shape != (n, out_c, 2 * h, 2 * wd):
        raise ValueError("conv_transpose2d_backward: upstream shape mismatch")
    d6 = dy.reshape(n, out_c, h, 2, wd, 2)
    dx = np.tensordot(d6, w, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, d6, axes=([0, 2, 3], [0, 2, 4]))
    db = dy.sum(axis=(0, 2, 3))
    return (
        _check_finite(np.ascontiguousarray(dx), "conv_transpose2d_backward"),
        _check_finite(dw, "conv_transpose2d_backward"),
        _check_finite(db, "conv_transpose2d_backward"),
    )


# -- elementwise -------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return _check_finite(np.maximum(x, 0).astype(x.dtype, copy=False), "relu")


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return dy * (x > 0)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _check_finite(a + b, "add")


def add_backward(dy: np.ndarray):
    return dy, dy


# -- batch normalization -----------------------------------------------------


@dataclass
class _BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool


def batchnorm2d(x: np.ndarray, state: BatchNormState, training: bool):
    """Per-channel normalization.

    In training mode the batch statistics (biased variance over N, H, W)
    are used and the running statistics updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    Returns ``(y, cache)``.
    """
    _check_4d(x, "batchnorm2d")
    c = x.shape[1]
    if state.gamma.shape != (c,) or state.beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta length must be {c}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if state.running_mean is not None and state.running_var is not None:
            m = state.momentum
            state.running_mean[...] = m * state.running_mean + (1 - m) * mean
            state.running_var[...] = m * state.running_var + (1 - m) * var
    else:
        if state.running_mean is None or state.running_var is None:
            raise ValueError("batchnorm2d: inference mode needs initialized running statistics")
        mean, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var.astype(x.dtype) + x.dtype.type(state.eps))).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * state.gamma[None, :, None, None] + state.beta[None, :, None, None]
    return _check_finite(y, "batchnorm2d"), _BNCache(xhat, inv_std, state.gamma, training)


def batchnorm2d_backward(cache: _BNCache, dy: np.ndarray):
    """Return ``(dx, dgamma, dbeta)``."""
    dgamma = (dy * cache.xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * cache.gamma[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if cache.training:
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * cache.xhat).mean(axis=(0, 2, 3), keepdims=True)
        dx = inv_std * (dxhat - mean_d - cache.xhat * mean_dx)
    else:
        dx = dxhat * inv_std
    return _check_finite(dx, "batchnorm2d_backward"), dgamma, dbeta


# -- pooling -------------------------------------------------------------------


def maxpool2(x: np.ndarray):
    """2x2 max pooling with stride 2.

    Returns ``(y, indices)`` where ``indices`` holds the row-major position
    (0..3) of each window's winner; ties go to the first maximum.
    """
    _check_4d(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return _check_finite(y, "maxpool2"), idx


def maxpool2_backward(indices: np.ndarray, dy: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = indices.shape
    if dy.shape != indices.shape:
        raise ValueError("maxpool2_backward: upstream shape mismatch")
    d = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(d, indices[..., None], dy[..., None], axis=-1)
    return d.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


# -- softmax -----------------------------------------------------------------


def softmax_channels(x: np.ndarray) -> np.ndarray:
    _check_4d(x, "softmax_channels")
    if x.shape[1] < 2:
        raise ValueError("softmax_channels needs at least two channels")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return _check_finite(e / e.sum(axis=1, keepdims=True), "softmax_channels")


def softmax_channels_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward of :func:`softmax_channels` given its output ``y``."""
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


# -- gradient checking -----------------------------------------------------------


def grad_check(
    func: Callable[..., tuple],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``func(*inputs)`` must return ``(value, grads)`` where ``value`` is a
    scalar and ``grads`` is a sequence with one array per input. Inputs are
    copied to float64 first. Returns the maximum over checked entries of
    ``|analytic - numeric| / max(1, |analytic|)``.

    If ``max_entries`` is given, that many entries per input are sampled
    with ``rng`` instead of checking every entry.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    value, grads = func(*xs)
    if not np.isfinite(value):
        raise NonFiniteError("grad_check: non-finite loss")
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    worst = 0.0
    for x, g in zip(xs, grads):
        if g.shape != x.shape:
            raise ValueError(f"grad_check: gradient shape {g.shape} != input shape {x.shape}")
        flat = x.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            positions = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            positions = range(flat.size)
        gflat = g.reshape(-1)
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + epsilon
            fp = func(*xs)[0]
            flat[pos] = orig - epsilon
            fm = func(*xs)[0]
            flat[pos] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("grad_check: non-finite loss under perturbation")
            numeric = (fp - fm) / (2 * epsilon)
            err = abs(gflat[pos] - numeric) / max(1.0, abs(gflat[pos]))
            worst = max(worst, err)
    return float(worst)
