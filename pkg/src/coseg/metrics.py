"""Segmentation, feature-cluster and image metrics."""
from __future__ import annotations

import numpy as np

VOID = -1


def confusion_matrix(pred, gt, num_classes: int, ignore_index: int | None = VOID) -> np.ndarray:
    """Integer (C, C) counts; rows are ground truth, columns predictions."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    keep = np.ones(gt.shape, dtype=bool) if ignore_index is None else gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    # predictions outside the class range (e.g. void) count as misses of every class
    inside = (pred >= 0) & (pred < num_classes)
    cm = np.bincount(gt[inside] * num_classes + pred[inside],
                     minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    missed = np.bincount(gt[~inside], minlength=num_classes)
    return cm, missed


def miou_accuracy(pred, gt, num_classes: int | None = None, ignore_index: int | None = VOID) -> dict:
    """mIoU, pixel accuracy and per-class IoU over one or more label maps.

    Classes absent from both prediction and ground truth are left out of the
    mean; their per-class IoU is reported as NaN.
    """
    preds = [np.asarray(p) for p in (pred if isinstance(pred, (list, tuple)) else [pred])]
    gts = [np.asarray(g) for g in (gt if isinstance(gt, (list, tuple)) else [gt])]
    if len(preds) != len(gts) or not preds:
        raise ValueError("need matching, non-empty lists of prediction and ground-truth maps")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if num_classes is None:
        num_classes = int(max(max(p.max(), g.max()) for p, g in zip(preds, gts))) + 1
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    missed = np.zeros(num_classes, dtype=np.int64)
    for p, g in zip(preds, gts):
        c, m = confusion_matrix(p, g, num_classes, ignore_index)
        cm += c
        missed += m
    total = cm.sum() + missed.sum()
    if total == 0:
        raise ValueError("no evaluated pixels")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp + missed
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    return {"mIoU": float(np.nanmean(iou)), "Acc": float(tp.sum() / total),
            "per_class_IoU": iou.tolist(), "confusion": cm}


def _clusters(features, labels, ignore_index):
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(-1, X.shape[-1])
    y = np.asarray(labels).ravel()
    if len(X) != len(y):
        raise ValueError("features and labels have different pixel counts")
    if ignore_index is not None:
        keep = y != ignore_index
        X, y = X[keep], y[keep]
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("cluster indices need at least 2 non-empty clusters")
    return X, y, classes


def calinski_harabasz(features, labels, ignore_index: int | None = VOID) -> float:
    X, y, classes = _clusters(features, labels, ignore_index)
    n, k = len(X), len(classes)
    mean = X.mean(axis=0)
    between = within = 0.0
    for c in classes:
        Xc = X[y == c]
        cent = Xc.mean(axis=0)
        between += len(Xc) * np.sum((cent - mean) ** 2)
        within += np.sum((Xc - cent) ** 2)
    if within == 0:
        return float("inf")
    return float(between * (n - k) / (within * (k - 1)))


def davies_bouldin(features, labels, ignore_index: int | None = VOID) -> float:
    X, y, classes = _clusters(features, labels, ignore_index)
    cents = np.stack([X[y == c].mean(axis=0) for c in classes])
    spread = np.array([np.linalg.norm(X[y == c] - cents[i], axis=1).mean()
                       for i, c in enumerate(classes)])
    dist = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
    off = ~np.eye(len(classes), dtype=bool)
    if np.any(dist[off] == 0):
        raise ValueError("Davies-Bouldin index undefined: two clusters share a centroid")
    ratio = np.where(off, (spread[:, None] + spread[None]) / np.where(off, dist, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


def cluster_indices(features, labels, ignore_index: int | None = VOID) -> dict:
    """Calinski-Harabasz and Davies-Bouldin indices of features grouped by label."""
    return {"CH": calinski_harabasz(features, labels, ignore_index),
            "DB": davies_bouldin(features, labels, ignore_index)}


def psnr(img, ref) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``inf``."""
    mse = np.mean((np.asarray(img, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))
