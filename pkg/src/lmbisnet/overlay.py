"""Colour-coded comparison of a predicted vessel mask against ground truth."""
from __future__ import annotations

import numpy as np

from .metrics import ConfusionCounts, _as_binary

TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)
TN_COLOR = (0, 0, 0)
OUTSIDE_COLOR = (64, 64, 64)


def render_overlay(pred, gt, fov=None) -> np.ndarray:
    """``(H, W, 3)`` uint8 image: TP green, FP red, FN blue, TN black, outside FOV gray."""
    pred, gt = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    fov = np.ones_like(gt) if fov is None else _as_binary(fov, "fov")
    if not (pred.shape == gt.shape == fov.shape) or pred.ndim != 2:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, fov {fov.shape}")
    out = np.empty(pred.shape + (3,), np.uint8)
    out[...] = OUTSIDE_COLOR
    out[fov & pred & gt] = TP_COLOR
    out[fov & pred & ~gt] = FP_COLOR
    out[fov & ~pred & gt] = FN_COLOR
    out[fov & ~pred & ~gt] = TN_COLOR
    return out


def count_colors(rgb: np.ndarray) -> ConfusionCounts:
    """Tally rendered pixels back into confusion counts."""

    def n(color):
        return int(np.all(rgb == np.array(color, np.uint8), axis=-1).sum())

    return ConfusionCounts(tp=n(TP_COLOR), tn=n(TN_COLOR), fp=n(FP_COLOR), fn=n(FN_COLOR))
