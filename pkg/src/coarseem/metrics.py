"""Segmentation and keypoint metrics."""

from __future__ import annotations

import numpy as np


def iou_per_class(pred, gt, num_classes: int) -> np.ndarray:
    """IoU per class over all pixels; NaN for classes absent from both."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            out[c] = np.count_nonzero(p & g) / union
    return out


def miou(pred, gt, num_classes: int) -> float:
    """Mean IoU over classes present in pred or gt (background included).

    Works on a single H x W map or stacked N x H x W maps; pixels are pooled.
    """
    ious = iou_per_class(pred, gt, num_classes)
    present = ~np.isnan(ious)
    if not present.any():
        return 1.0
    return float(ious[present].mean())


def heatmap_argmax(heatmaps) -> np.ndarray:
    """N x K x H x W -> N x K x 2 integer (row, col) of each map's maximum."""
    hm = np.asarray(heatmaps)
    n, k, h, w = hm.shape
    flat = hm.reshape(n, k, h * w).argmax(axis=2)
    return np.stack([flat // w, flat % w], axis=2)


def pck(pred_kps, gt_kps, visibility, threshold_fraction: float, H: int, W: int) -> float:
    """Percentage of visible keypoints within threshold_fraction * max(H, W) (inclusive)."""
    if not 0.0 < threshold_fraction <= 1.0:
        raise ValueError("threshold_fraction must lie in (0, 1]")
    pred = np.asarray(pred_kps, dtype=np.float64)[..., :2]
    gt = np.asarray(gt_kps, dtype=np.float64)[..., :2]
    vis = np.asarray(visibility).astype(bool)
    if pred.shape != gt.shape or vis.shape != pred.shape[:-1]:
        raise ValueError("pred, gt and visibility shapes disagree")
    if not vis.any():
        return float("nan")
    err = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    thr = threshold_fraction * max(H, W)
    return 100.0 * float((err[vis] <= thr).mean())
