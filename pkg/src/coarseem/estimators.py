"""scikit-learn style wrapper around the training methods."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .metrics import miou
from .runs import METHODS, train_method
from .synthgen import Split, derive_keypoints, derive_mask, render_heatmaps
from .training import predict_proba


def _check_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W images, got shape {X.shape}")
    return X


def split_from_parts(X, y, num_parts: int, sigma: float = 1.5) -> Split:
    """A part-labelled split whose mask and keypoints are derived from ``y``."""
    X = _check_images(X)
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"labels of shape {y.shape} do not match images {X.shape}")
    if y.min() < 0 or y.max() > num_parts:
        raise ValueError(f"labels must lie in 0..{num_parts}")
    H, W = X.shape[2:]
    kps = np.stack([derive_keypoints(p, num_parts) for p in y])
    return Split(
        images=X,
        masks=np.stack([derive_mask(p) for p in y]),
        keypoints=kps,
        heatmaps=np.stack([render_heatmaps(k, H, W, sigma) for k in kps]),
        parts=y.astype(np.uint8),
        ids=np.arange(len(X), dtype=np.int64),
    )


class PartSegmenter(BaseEstimator):
    """Part segmentation from a few dense labels plus an optional coarse split.

    ``fit(X, y, coarse=..., val=...)`` takes part-labelled images and labels;
    ``coarse`` is a :class:`~coarseem.synthgen.Split` without parts and
    ``val`` a labelled split used for model selection.
    """

    def __init__(self, method: str = "em", num_parts: int = 5, width: int = 16, em_epochs: int = 6,
                 finetune_epochs: int = 60, use_kp: bool = True, use_mask: bool = True, seed: int = 0):
        self.method = method
        self.num_parts = num_parts
        self.width = width
        self.em_epochs = em_epochs
        self.finetune_epochs = finetune_epochs
        self.use_kp = use_kp
        self.use_mask = use_mask
        self.seed = seed

    def _run_config(self) -> RunConfig:
        base = RunConfig().with_seed(self.seed)
        return replace(
            base,
            width=self.width,
            em=replace(base.em, epochs=self.em_epochs),
            baseline=replace(base.baseline, width=self.width, finetune_epochs=self.finetune_epochs),
        )

    def fit(self, X, y, coarse: Split | None = None, val: Split | None = None):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        part = split_from_parts(X, y, self.num_parts)
        if self.method != "finetune" and (coarse is None or len(coarse) == 0):
            raise ValueError(f"method {self.method!r} needs a coarse split")
        datasets = {"part": part, "coarse": coarse, "val": val}
        model, hist = train_method(self.method, datasets, self._run_config(), self.use_kp, self.use_mask)
        self.model_ = model
        self.history_ = hist
        self.n_classes_ = self.num_parts + 1
        return self

    def _part_net(self):
        check_is_fitted(self, "model_")
        return getattr(self.model_, "part", self.model_)

    def predict_proba(self, X) -> np.ndarray:
        """N x (K+1) x H x W class probabilities."""
        net = self._part_net()
        return predict_proba(net, _check_images(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        """Pooled mIoU over the given images."""
        return miou(self.predict(X), np.asarray(y), self.n_classes_)
