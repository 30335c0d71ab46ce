"""Part discovery evaluation: clustering agreement, keypoint regression, foreground IoU."""
import math

import numpy as np

from .errors import InputError

CENTROID_MIN_MASS = 1e-6
RIDGE_LAMBDA = 1e-6


def assignment_from_attention(attention):
    """Hard labels from ``(K+1, H, W)`` maps: 0 is background, k is foreground part k.

    Ties go to the lowest channel index.
    """
    a = np.asarray(attention)
    idx = np.argmax(a, axis=0)
    k = a.shape[0] - 1
    return np.where(idx == k, 0, idx + 1)


def centroids(attention):
    """Attention-weighted centroid of every foreground map as normalized ``(row, col)``.

    Grid positions are 1-indexed and divided by ``(H, W)``. A part whose total
    mass is below 1e-6 has no centroid (``None``).
    """
    a = np.asarray(attention, dtype=np.float64)[:-1]
    _, h, w = a.shape
    rows = np.arange(1, h + 1, dtype=np.float64)
    cols = np.arange(1, w + 1, dtype=np.float64)
    out = []
    for m in a:
        mass = m.sum()
        if mass < CENTROID_MIN_MASS:
            out.append(None)
            continue
        r = (m.sum(axis=1) @ rows) / mass
        c = (m.sum(axis=0) @ cols) / mass
        out.append((r / h, c / w))
    return out


def _design(cents, fill):
    flat = []
    for k, c in enumerate(cents):
        flat.extend(c if c is not None else fill[k])
    return flat


def _lstsq(x, y):
    if np.linalg.matrix_rank(x) < x.shape[1]:
        gram = x.T @ x + RIDGE_LAMBDA * np.eye(x.shape[1])
        return np.linalg.solve(gram, x.T @ y)
    return np.linalg.lstsq(x, y, rcond=None)[0]


def keypoint_regression_error(train, test):
    """Mean test keypoint error (percent of normalized coordinates) of linear maps from centroids.

    ``train`` and ``test`` are sequences of ``(centroids, keypoints)`` where
    ``centroids`` is what :func:`centroids` returns and ``keypoints`` is a
    sequence of ``(part_id, x, y, visible)``. One least-squares map with
    intercept is fitted per keypoint on the training samples in which it is
    visible and all centroids are present. Missing test centroids are filled
    with the training mean.
    """
    train = [(c, kp) for c, kp in train if all(p is not None for p in c)]
    if not train:
        raise InputError("no training sample with all centroids present")
    n_parts = len(train[0][0])
    if len(train) < 2 * n_parts + 1:
        raise InputError(f"need at least {2 * n_parts + 1} complete training samples, got {len(train)}")
    mean_cent = np.mean([np.asarray(c, dtype=np.float64) for c, _ in train], axis=0)
    x_train = np.array([_design(c, mean_cent) + [1.0] for c, _ in train])

    kp_ids = sorted({int(k[0]) for _, kps in train for k in kps})
    models = {}
    for kid in kp_ids:
        rows, targets = [], []
        for i, (_, kps) in enumerate(train):
            for pid, x, y, vis in kps:
                if int(pid) == kid and vis:
                    rows.append(i)
                    targets.append((x, y))
        if rows:
            models[kid] = _lstsq(x_train[rows], np.asarray(targets))

    errors = []
    for c, kps in test:
        feat = np.array(_design(c, mean_cent) + [1.0])
        for pid, x, y, vis in kps:
            if not vis or int(pid) not in models:
                continue
            pred = feat @ models[int(pid)]
            errors.append(math.hypot(pred[0] - x, pred[1] - y))
    if not errors:
        raise InputError("no visible test keypoints")
    return 100.0 * float(np.mean(errors))


def contingency(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise InputError(f"labelings differ in length: {a.size} vs {b.size}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max(initial=-1) + 1, bi.max(initial=-1) + 1
    return np.bincount(ai * nb + bi, minlength=na * nb).reshape(na, nb)


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(a, b):
    """Mutual information normalized by the geometric mean of the two entropies."""
    table = contingency(a, b)
    n = table.sum()
    if n < 1:
        raise InputError("nmi needs at least one item")
    ha, hb = _entropy(table.sum(axis=1), n), _entropy(table.sum(axis=0), n)
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return float(min(max(mi / math.sqrt(ha * hb), 0.0), 1.0))


def _pairs(x):
    x = np.asarray(x, dtype=np.int64)
    return int((x * (x - 1) // 2).sum())


def ari(a, b):
    """Adjusted Rand index; exact integer arithmetic up to the final division."""
    table = contingency(a, b)
    n = int(table.sum())
    if n < 2:
        raise InputError("ari needs at least two items")
    index = _pairs(table)
    sa, sb = _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))
    n2 = n * (n - 1) // 2
    # (index - sa*sb/n2) / ((sa+sb)/2 - sa*sb/n2), scaled by 2*n2
    num = 2 * n2 * index - 2 * sa * sb
    den = n2 * (sa + sb) - 2 * sa * sb
    if den == 0:
        return 1.0
    return num / den


def upsample_nearest(labels, shape):
    labels = np.asarray(labels)
    h, w = labels.shape
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return labels[rows[:, None], cols[None, :]]


def part_clustering_labels(assignment, gt_mask):
    """Predicted and ground-truth part labels over ground-truth foreground pixels.

    Returns ``None`` when the ground truth has no foreground.
    """
    gt = np.asarray(gt_mask)
    pred = upsample_nearest(assignment, gt.shape)
    fg = gt > 0
    if not fg.any():
        return None
    return pred[fg], gt[fg]


def foreground_iou(assignment, fg_mask):
    fg = np.asarray(fg_mask).astype(bool)
    pred = upsample_nearest(assignment, fg.shape) > 0
    union = np.logical_or(pred, fg).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, fg).sum() / union)


def top1_accuracy(scores, labels):
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return float((scores.argmax(axis=-1) == labels).mean())


def location_entropy(attention):
    """Per-location entropy over the part channel, ``(H, W)``."""
    a = np.asarray(attention, dtype=np.float64)
    plogp = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    return -plogp.sum(axis=0)


def attention_entropy_report(maps):
    """Mean per-location entropy over every location of every map in the stream."""
    total, count = 0.0, 0
    for a in maps:
        e = location_entropy(a)
        total += float(e.sum())
        count += e.size
    if count == 0:
        raise InputError("empty attention stream")
    return total / count


class ClusteringAccumulator:
    """Collects per-image (pred, gt) foreground labels for dataset-level NMI/ARI."""

    def __init__(self):
        self.pred, self.gt = [], []
        self.skipped = 0

    def add(self, assignment, gt_mask):
        pair = part_clustering_labels(assignment, gt_mask)
        if pair is None:
            self.skipped += 1
            return
        self.pred.append(pair[0])
        self.gt.append(pair[1])

    def result(self):
        if not self.pred:
            raise InputError("no image with ground-truth foreground")
        pred = np.concatenate(self.pred)
        gt = np.concatenate(self.gt)
        return nmi(pred, gt), ari(pred, gt)
