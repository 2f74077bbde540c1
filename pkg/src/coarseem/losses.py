"""Loss terms, all returning scalar tensors averaged over pixels."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import one_hot

LOG_EPS = 1e-12


def _clamped_log(t: Tensor) -> Tensor:
    return ad.log(ad.clamp_min(t, LOG_EPS))


def _target_array(target, pred: Tensor) -> np.ndarray:
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target)
    if target.ndim == pred.ndim - 1:
        if target.shape != pred.shape[:1] + pred.shape[2:]:
            raise ValueError(f"hard target {target.shape} does not match prediction {pred.shape}")
        return one_hot(target, pred.shape[1])
    if target.shape != pred.shape:
        raise ValueError(f"soft target {target.shape} does not match prediction {pred.shape}")
    return target.astype(np.float64)


def loss_ce_parts(pred_probs: Tensor, target, weights=None) -> Tensor:
    """Mean over pixels of -sum_k target_k log pred_k.

    ``target`` is a N x H x W label map or a N x C x H x W distribution held
    constant.  ``weights`` (N x H x W) turns the mean into a weighted mean.
    """
    t = _target_array(target, pred_probs)
    per_pixel = ad.sum(ad.mul(_clamped_log(pred_probs), Tensor(-t)), axes=1)
    if weights is None:
        return ad.mean(per_pixel)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != per_pixel.shape:
        raise ValueError(f"weights {w.shape} do not match pixels {per_pixel.shape}")
    total = w.sum()
    if total <= 0:
        return ad.scale(ad.sum(per_pixel), 0.0)
    return ad.scale(ad.sum(ad.mul(per_pixel, Tensor(w))), 1.0 / total)


def loss_kp_l1(pred_heatmaps: Tensor, target_heatmaps, visibility=None) -> Tensor:
    """Mean absolute error over every heatmap pixel.

    Invisible keypoints keep their all-zero target so the model learns absence.
    """
    target = target_heatmaps.data if isinstance(target_heatmaps, Tensor) else np.asarray(target_heatmaps, dtype=np.float64)
    if target.shape != pred_heatmaps.shape:
        raise ValueError(f"target {target.shape} does not match prediction {pred_heatmaps.shape}")
    if visibility is not None:
        vis = np.asarray(visibility).astype(bool)
        target = np.where(vis[:, :, None, None], target, 0.0)
    return ad.mean(ad.abs(ad.sub(pred_heatmaps, Tensor(target))))


def loss_kp_squared(pred_heatmaps: Tensor, target_heatmaps, visibility=None) -> Tensor:
    """Mean squared error over every heatmap pixel; used to warm up the keypoint model."""
    target = target_heatmaps.data if isinstance(target_heatmaps, Tensor) else np.asarray(target_heatmaps, dtype=np.float64)
    if target.shape != pred_heatmaps.shape:
        raise ValueError(f"target {target.shape} does not match prediction {pred_heatmaps.shape}")
    if visibility is not None:
        vis = np.asarray(visibility).astype(bool)
        target = np.where(vis[:, :, None, None], target, 0.0)
    diff = ad.sub(pred_heatmaps, Tensor(target))
    return ad.mean(ad.mul(diff, diff))


def loss_mask_binomial(mu_mask: Tensor, y_mask) -> Tensor:
    y = y_mask.data if isinstance(y_mask, Tensor) else np.asarray(y_mask, dtype=np.float64)
    if y.ndim == mu_mask.ndim - 1:
        y = y[:, None]
    if y.shape != mu_mask.shape:
        raise ValueError(f"mask {y.shape} does not match prediction {mu_mask.shape}")
    pos = ad.mul(_clamped_log(mu_mask), Tensor(y))
    neg = ad.mul(_clamped_log(ad.add(ad.scale(mu_mask, -1.0), 1.0)), Tensor(1.0 - y))
    return ad.scale(ad.mean(ad.add(pos, neg)), -1.0)


def loss_neg_entropy(mu_q: Tensor) -> Tensor:
    """Mean over pixels of sum_k q_k log q_k."""
    return ad.mean(ad.sum(ad.mul(mu_q, _clamped_log(mu_q)), axes=1))
