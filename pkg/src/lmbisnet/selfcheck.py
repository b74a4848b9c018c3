"""Finite-difference self-check of every differentiable kernel and of the whole network."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .model import NetworkConfig, TINY_CONFIG, backward, build_network, forward_passes
from .training import onehot, soft_dice_loss

KERNEL_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3
# BN over 2x2 maps at the deepest stage makes the loss sharply curved, so the
# central difference needs the smallest allowed step.
NETWORK_EPSILON = 1e-6


def _kernel_cases(rng: np.random.Generator):
    """Yield ``(kernel name, closure, inputs)``; each closure returns ``(value, grads)``."""
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    h = 2 * int(rng.integers(2, 5))
    k = int(rng.choice([1, 3, 5]))

    def conv(x, w, b, r):
        p = T.ConvParams(w, b)
        y = T.conv2d(x, p)
        return float((y * r).sum()), (*T.conv2d_backward(x, p, r), y)

    yield "conv2d", conv, [rng.normal(size=(n, c, h, h)), rng.normal(size=(o, c, k, k)),
                           rng.normal(size=o), rng.normal(size=(n, o, h, h))]

    r_up = rng.normal(size=(n, o, 2 * h, 2 * h))

    def convt(x, w, b):
        p = T.ConvParams(w, b, stride=2)
        return float((T.conv_transpose2d(x, p) * r_up).sum()), T.conv_transpose2d_backward(x, p, r_up)

    yield "conv_transpose2d", convt, [rng.normal(size=(n, c, h, h)), rng.normal(size=(c, o, 2, 2)), rng.normal(size=o)]

    r = rng.normal(size=(n, c, h, h))
    x_relu = rng.normal(size=(n, c, h, h))
    x_relu[np.abs(x_relu) < 1e-2] += 0.1

    def relu(x):
        return float((T.relu(x) * r).sum()), (T.relu_backward(x, r),)

    yield "relu", relu, [x_relu]

    def bn(x, gamma, beta):
        y, cache = T.batchnorm2d(x, T.BatchNormState(gamma, beta), training=True)
        return float((y * r).sum()), T.batchnorm2d_backward(cache, r)

    yield "batchnorm2d", bn, [rng.normal(size=(n, c, h, h)) * 2 + 1, rng.normal(size=c), rng.normal(size=c)]

    r_pool = rng.normal(size=(n, c, h // 2, h // 2))

    def pool(x):
        y, idx = T.maxpool2(x)
        return float((y * r_pool).sum()), (T.maxpool2_backward(idx, r_pool),)

    yield "maxpool2", pool, [rng.permutation(n * c * h * h).reshape(n, c, h, h) / (h * h)]

    cs = c + 1

    def soft(x):
        y = T.softmax_channels(x)
        rs = r_soft
        return float((y * rs).sum()), (T.softmax_channels_backward(y, rs),)

    r_soft = rng.normal(size=(n, cs, h, h))
    yield "softmax_channels", soft, [rng.normal(size=(n, cs, h, h)) * 2]

    def add(a, b):
        y = T.add(a, b)
        return float((y * r).sum()), T.add_backward(r)

    yield "add", add, [rng.normal(size=(n, c, h, h)), rng.normal(size=(n, c, h, h))]

    gt = onehot(rng.integers(0, 2, size=(n, h, h)), 2, np.float64)
    fov = (rng.random((n, h, h)) > 0.2).astype(np.float64)

    def dice(prob):
        loss, g = soft_dice_loss(prob, gt, fov, eps=1.0)
        return loss, (g,)

    yield "soft_dice_loss", dice, [rng.uniform(0.05, 0.95, size=(n, 2, h, h))]


def _faulty(fn: Callable) -> Callable:
    def wrapped(*args):
        v, grads = fn(*args)
        return v, tuple(g * 1.01 for g in grads)

    return wrapped


def check_kernels(seeds=range(3), inject_fault: bool = False) -> dict:
    """Max relative finite-difference error per kernel over ``seeds``."""
    worst: dict = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, inputs in _kernel_cases(rng):
            err = T.grad_check(_faulty(fn) if inject_fault else fn, inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def check_network(seed: int = 0, config: NetworkConfig = TINY_CONFIG, size: int = 8,
                  max_entries: int = 4, inject_fault: bool = False) -> float:
    """End-to-end gradient check of the network in training mode, in float64.

    Every parameter tensor and the input image are probed at ``max_entries``
    randomly chosen positions each.
    """
    from dataclasses import replace

    rng = np.random.default_rng(seed)
    model = build_network(replace(config, seed=seed), dtype=np.float64)
    x = rng.normal(size=(1, config.input_channels, size, size))
    r = rng.normal(size=(1, config.num_classes, size, size))
    names = list(model.params)
    passes = config.pass_count
    first = [True]

    def fn(*arrs):
        m = model.copy()
        for name, a in zip(names, arrs):
            m.params[name][...] = a
        prob, cache = forward_passes([m] * passes, arrs[-1], training=True, return_cache=True)
        if not first[0]:
            # perturbed evaluations only need the value
            return float((prob * r).sum()), None
        first[0] = False
        grads, dx = backward(m, cache, r, return_input_grad=True)
        out = [grads[name] for name in names] + [dx]
        if inject_fault:
            out = [g * 1.01 for g in out]
        return float((prob * r).sum()), out

    return T.grad_check(fn, [model.params[n] for n in names] + [x], epsilon=NETWORK_EPSILON,
                        max_entries=max_entries, rng=rng)
