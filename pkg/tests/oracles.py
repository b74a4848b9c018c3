"""Slow reference implementations used only by the test-suite."""
import numpy as np


def naive_conv2d(x, w, b, stride=1, pad=None):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = (k - 1) // 2 if pad is None else pad
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=np.float64)
    xp[:, :, p : p + h, p : p + wd] = x
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


def naive_relu(x):
    return np.where(x > 0, x, 0.0)


def naive_batchnorm(x, gamma, beta, eps):
    out = np.empty_like(x, dtype=np.float64)
    for ch in range(x.shape[1]):
        vals = x[:, ch].astype(np.float64)
        mu = vals.mean()
        var = ((vals - mu) ** 2).mean()
        out[:, ch] = (vals - mu) / np.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def naive_conv_unit(x, w, b, gamma, beta, eps):
    """BN(ReLU(conv(x))) with batch statistics."""
    return naive_batchnorm(naive_relu(naive_conv2d(x, w, b)), gamma, beta, eps)


def naive_confusion(pred, gt, fov):
    tp = tn = fp = fn = 0
    for p, g, f in zip(pred.ravel().tolist(), gt.ravel().tolist(), fov.ravel().tolist()):
        if not f:
            continue
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def reference_metrics(tp, tn, fp, fn):
    """Per-pixel brute-force counts turned into measures, each as one integer ratio."""

    def ratio(num, den, errors):
        return (1.0 if errors == 0 else 0.0) if den == 0 else num / den

    neg, pos = fp + tn, fn + tp
    if neg and pos:
        auc = (2 * neg * pos - fp * pos - fn * neg) / (2 * neg * pos)
    elif neg:
        auc = (2 * neg - fp) / (2 * neg)
    elif pos:
        auc = (2 * pos - fn) / (2 * pos)
    else:
        auc = 1.0
    return dict(
        se=ratio(tp, tp + fn, fn),
        sp=ratio(tn, tn + fp, fp),
        acc=(tp + tn) / (tp + tn + fp + fn),
        f1=ratio(2 * tp, 2 * tp + fp + fn, fp + fn),
        balanced_auc=auc,
        jaccard=ratio(tp, tp + fp + fn, fp + fn),
    )
