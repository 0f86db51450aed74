"""Pure numpy implementations of the numeric kernels.

These mirror ``_kernels.pyx`` one for one and are used whenever the compiled
extension is unavailable (or when ``ANATOMY_SSL_PURE_PYTHON=1``).
"""
import numpy as np


def histogram256(image):
    bins = np.minimum((np.asarray(image, dtype=np.float64) * 256.0).astype(np.int64), 255)
    bins = np.maximum(bins, 0)
    return np.bincount(bins.ravel(), minlength=256).astype(np.int64)


def otsu_scan(hist):
    """Return ``(k, best)`` where splitting bins at ``k`` maximises between-class variance.

    Class 0 holds bins ``[0, k)``, class 1 holds ``[k, 256)``. Ties resolve to the
    smallest ``k``. ``best`` is the unnormalised between-class variance.
    """
    hist = np.asarray(hist, dtype=np.float64)
    centers = np.arange(hist.size, dtype=np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * centers)[:-1]
    w1 = total - w0
    s1 = (hist * centers).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = w0 * w1 * (s0 / w0 - s1 / w1) ** 2
    var = np.where((w0 > 0) & (w1 > 0), var, 0.0)
    k = int(np.argmax(var))
    return k + 1, float(var[k])


def sinkhorn_balance(q, iters):
    """Balance ``q`` (B, L, K) in place, independently for every position.

    Each round scales columns of the B x K slice to mass B/K, then rows to 1.
    """
    n, _, k = q.shape
    col_target = n / k
    for _ in range(iters):
        q *= col_target / q.sum(axis=0, keepdims=True)
        q /= q.sum(axis=2, keepdims=True)
    return q


def patch_means(field, patch):
    h, w = field.shape
    blocks = np.asarray(field, dtype=np.float64).reshape(h // patch, patch, w // patch, patch)
    return blocks.sum(axis=(1, 3)) / float(patch * patch)


def paste_add(canvas, lesion, row, col):
    h, w = lesion.shape
    canvas[row:row + h, col:col + w] += lesion
    return canvas


def auc_rank(scores, positive):
    """Mann-Whitney AUC of ``scores`` for the boolean ``positive`` class, ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    # group boundaries of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    n_pos = int(positive.sum())
    n_neg = scores.size - n_pos
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
