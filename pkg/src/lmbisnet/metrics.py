"""Pixel confusion counts and the derived segmentation measures."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

KEYS = ("se", "sp", "acc", "f1", "balanced_auc", "jaccard", "roc_auc", "tp", "tn", "fp", "fn")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    se: float
    sp: float
    acc: float
    f1: float
    balanced_auc: float
    jaccard: float
    counts: ConfusionCounts
    roc_auc: float | None = None

    def as_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "counts"}
        d.update(asdict(self.counts))
        return d


def _as_binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} must be binary (0/1)")
        a = a.astype(bool)
    return a


def confusion(pred, gt, fov=None) -> ConfusionCounts:
    """Count TP/TN/FP/FN over pixels where ``fov`` is 1."""
    pred, gt = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    fov = np.ones_like(gt) if fov is None else _as_binary(fov, "fov")
    if not (pred.shape == gt.shape == fov.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, fov {fov.shape}")
    tp = int(np.count_nonzero(pred & gt & fov))
    fp = int(np.count_nonzero(pred & ~gt & fov))
    fn = int(np.count_nonzero(~pred & gt & fov))
    tn = int(np.count_nonzero(fov)) - tp - fp - fn
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: int, den: int, errors: int) -> Fraction:
    # empty denominator: perfect if nothing went wrong, else 0
    if den == 0:
        return Fraction(1 if errors == 0 else 0)
    return Fraction(num, den)


def compute_metrics(counts: ConfusionCounts, roc_auc: float | None = None) -> MetricsReport:
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    if counts.total <= 0:
        raise ValueError("no pixels in the evaluation region")
    # rational arithmetic, rounded once to float
    fpr = Fraction(fp, fp + tn) if fp + tn else Fraction(0)
    fnr = Fraction(fn, fn + tp) if fn + tp else Fraction(0)
    return MetricsReport(
        se=float(_ratio(tp, tp + fn, fn)),
        sp=float(_ratio(tn, tn + fp, fp)),
        acc=float(Fraction(tp + tn, counts.total)),
        f1=float(_ratio(2 * tp, 2 * tp + fp + fn, fp + fn)),
        balanced_auc=float(1 - (fpr + fnr) / 2),
        jaccard=float(_ratio(tp, tp + fp + fn, fp + fn)),
        counts=counts,
        roc_auc=roc_auc,
    )


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """``prob >= threshold`` as a uint8 mask."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def roc_auc(prob, gt, fov=None, thresholds=256) -> float:
    """Trapezoidal area under the ROC curve.

    ``thresholds`` is either a count of evenly spaced cut points on [0, 1]
    or ``"exact"`` to use every distinct score. Points (0, 0) and (1, 1) are
    always included. Raises ``ValueError`` when the FOV holds only one class.
    """
    gt = _as_binary(gt, "gt")
    fov = np.ones_like(gt) if fov is None else _as_binary(fov, "fov")
    prob = np.asarray(prob, dtype=np.float64)
    if prob.shape != gt.shape or fov.shape != gt.shape:
        raise ValueError("shape mismatch")
    scores, labels = prob[fov], gt[fov]
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("ROC undefined: FOV contains a single class")
    if isinstance(thresholds, str):
        if thresholds != "exact":
            raise ValueError("thresholds must be a count or 'exact'")
        cuts = np.unique(scores)
    else:
        cuts = np.linspace(0.0, 1.0, int(thresholds))
    # positives/negatives with score >= cut, via sorted search
    pos_sorted = np.sort(scores[labels])
    neg_sorted = np.sort(scores[~labels])
    tpr = (pos - np.searchsorted(pos_sorted, cuts, side="left")) / pos
    fpr = (neg - np.searchsorted(neg_sorted, cuts, side="left")) / neg
    fpr = np.concatenate(([0.0], fpr[::-1], [1.0]))
    tpr = np.concatenate(([0.0], tpr[::-1], [1.0]))
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate_image(prob, gt, fov=None, threshold: float = 0.5) -> MetricsReport:
    """Metrics for one vessel-probability map, with ROC AUC when defined."""
    counts = confusion(binarize(prob, threshold), gt, fov)
    try:
        auc = roc_auc(prob, gt, fov)
    except ValueError:
        auc = None
    return compute_metrics(counts, auc)


def format_key_values(report: MetricsReport) -> str:
    """One ``key=value`` line per metric, in the fixed key order."""
    d = report.as_dict()
    lines = []
    for k in KEYS:
        v = d[k]
        if v is None:
            lines.append(f"{k}=nan")
        elif isinstance(v, int):
            lines.append(f"{k}={v}")
        else:
            lines.append(f"{k}={v:.10f}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = int(v) if k.strip() in ("tp", "tn", "fp", "fn") else float(v)
    return out


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Fixed-width text table, metrics in percent."""
    head = f"{'image':<16}" + "".join(f"{k:>9}" for k in ("Se", "Sp", "Acc", "F1", "BalAUC", "J", "ROCAUC"))
    lines = [head, "-" * len(head)]
    for name, r in rows:
        vals = [r.se, r.sp, r.acc, r.f1, r.balanced_auc, r.jaccard, r.roc_auc]
        cells = "".join(f"{'-':>9}" if v is None else f"{100 * v:>9.2f}" for v in vals)
        lines.append(f"{name:<16}{cells}")
    return "\n".join(lines) + "\n"
