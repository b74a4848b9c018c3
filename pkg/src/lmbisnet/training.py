"""Dice-loss training with Adam, plateau LR decay and early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .model import Model, backward, forward
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

VESSEL = 1  # channel index of the vessel class; 0 is background


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    max_epochs: int = 50
    plateau_patience: int = 7
    lr_factor: float = 0.25
    early_stop_patience: int = 15
    batch_size: int = 2
    seed: int = 0
    smoothing_eps: float = 1.0
    use_fov: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be at least 1")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValueError("max_epochs must be >= 0 and batch_size >= 1")


# -- loss ------------------------------------------------------------------------


def soft_dice_loss(prob: np.ndarray, gt_onehot: np.ndarray, fov: np.ndarray | None = None,
                   eps: float = 1.0):
    """Soft dice loss on the vessel channel, restricted to FOV pixels.

    ``loss = 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``.
    ``fov`` may be ``(N, H, W)`` or ``(N, 1, H, W)``; ``None`` means all
    pixels. Returns ``(loss, dloss_dprob)``.
    """
    if prob.shape != gt_onehot.shape:
        raise ValueError(f"prob shape {prob.shape} != ground-truth shape {gt_onehot.shape}")
    n, _, h, w = prob.shape
    f = np.ones((n, h, w), prob.dtype) if fov is None else np.asarray(fov, dtype=prob.dtype).reshape(n, h, w)
    if not f.any():
        raise ValueError("soft_dice_loss: empty field of view")
    p = prob[:, VESSEL].astype(np.float64)
    g = gt_onehot[:, VESSEL].astype(np.float64)
    f64 = f.astype(np.float64)
    inter = (p * g * f64).sum()
    denom = (p * f64).sum() + (g * f64).sum() + eps
    dice = (2 * inter + eps) / denom
    grad = np.zeros_like(prob)
    grad[:, VESSEL] = (-(2 * g * denom - (2 * inter + eps)) / denom**2 * f64).astype(prob.dtype)
    return float(1.0 - dice), grad


def onehot(gt: np.ndarray, num_classes: int = 2, dtype=np.float32) -> np.ndarray:
    """``(N, H, W)`` integer labels -> ``(N, num_classes, H, W)``."""
    return (gt[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Raises :class:`NonFiniteError` (leaving everything untouched) if any
    gradient is NaN or Inf.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# -- schedules -------------------------------------------------------------------


def epochs_since_best(history: Sequence[float]) -> int:
    """Epochs after the first occurrence of the best (largest) value."""
    if len(history) == 0:
        return 0
    return len(history) - 1 - int(np.argmax(np.asarray(history)))


def lr_on_plateau(history: Sequence[float], patience: int, factor: float, current_lr: float) -> float:
    """Learning rate after the latest epoch.

    ``history`` holds the validation metric (higher is better). The rate is
    multiplied by ``factor`` each time ``patience`` consecutive epochs pass
    without a new best; the stagnation count restarts after each reduction.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    stale = epochs_since_best(history)
    if stale > 0 and stale % patience == 0:
        return current_lr * factor
    return current_lr


def early_stop(history: Sequence[float], patience: int) -> bool:
    return epochs_since_best(history) >= patience


# -- loop ------------------------------------------------------------------------


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    stopped_early: bool = False


def stack_batch(samples: Sequence):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    gts = np.stack([s.gt for s in samples]).astype(np.int64)
    fovs = np.stack([s.fov for s in samples]).astype(np.float32)
    return images, gts, fovs


def evaluate_dice(model: Model, samples: Sequence, threshold: float = 0.5, use_fov: bool = True) -> float:
    """Micro-averaged hard dice (F1) of the thresholded vessel map, inference mode."""
    total = metrics.ConfusionCounts()
    for s in samples:
        prob = forward(model, s.image[None].astype(np.float32))
        pred = metrics.binarize(prob[0, VESSEL], threshold)
        fov = s.fov if use_fov else np.ones_like(s.gt)
        total = total + metrics.confusion(pred, s.gt, fov)
    return metrics.compute_metrics(total).f1


def train(model: Model, train_set: Sequence, val_set: Sequence, config: TrainConfig,
          optimizer: AdamState | None = None,
          on_epoch: Callable[[int, History], None] | None = None):
    """Minibatch Adam on soft dice loss; returns ``(model, history)``.

    Shuffling uses a generator seeded from ``config.seed``, so two runs with
    the same inputs produce identical trajectories. The learning rate decays
    on validation-dice plateaus and training stops early after
    ``early_stop_patience`` epochs without improvement.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    optimizer = optimizer if optimizer is not None else AdamState()
    history = History()
    lr = config.learning_rate
    num_classes = model.config.num_classes
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[int(i)] for i in order[start : start + config.batch_size]]
            images, gts, fovs = stack_batch(batch)
            prob, cache = forward(model, images, training=True, return_cache=True)
            loss, dprob = soft_dice_loss(prob, onehot(gts, num_classes), fovs if config.use_fov else None,
                                         config.smoothing_eps)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            adam_step(model.params, backward(model, cache, dprob), optimizer, lr)
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)))
        history.val_dice.append(evaluate_dice(model, val_set, config.threshold, config.use_fov))
        history.lr.append(lr)
        log.info("epoch %d loss %.5f val dice %.5f lr %.2e", epoch, history.train_loss[-1],
                 history.val_dice[-1], lr)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if early_stop(history.val_dice, config.early_stop_patience):
            history.stopped_early = True
            break
        lr = lr_on_plateau(history.val_dice, config.plateau_patience, config.lr_factor, lr)
    return model, history
