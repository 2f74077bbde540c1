"""The conditional models: part, posterior, keypoint and mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (
    SegNet,
    SplitPosteriorNet,
    build_segnet,
    build_split_posterior,
    load_checkpoint,
    save_checkpoint,
)

SUBMODELS = ("part", "posterior", "keypoint", "mask")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def part_forward(x, net: SegNet) -> Tensor:
    """Per-pixel class probabilities from the image."""
    return ad.softmax_channel(net(_t(x)))


def coarse_channels(mask, heatmaps) -> Tensor:
    """Stack a N x H x W (or N x 1 x H x W) mask with N x K x H x W heatmaps."""
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    heatmaps = heatmaps.data if isinstance(heatmaps, Tensor) else np.asarray(heatmaps, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[:, None]
    if mask.shape[0] != heatmaps.shape[0] or mask.shape[2:] != heatmaps.shape[2:]:
        raise ValueError(f"mask {mask.shape} and heatmaps {heatmaps.shape} disagree")
    return Tensor(np.concatenate([mask, heatmaps], axis=1))


def posterior_forward(x, mask, heatmaps, net: SplitPosteriorNet) -> Tensor:
    return ad.softmax_channel(net(_t(x), coarse_channels(mask, heatmaps)))


def keypoint_forward(y_probs, net: SegNet) -> Tensor:
    """K sigmoid heatmaps from K+1 part probabilities (soft or one-hot)."""
    return ad.sigmoid(net(_t(y_probs)))


def mask_marginalize(y_probs) -> Tensor:
    """Foreground probability: sum of the non-background channels."""
    y = _t(y_probs)
    if y.ndim != 4 or y.shape[1] < 2:
        raise ValueError("expected N x (K+1) x H x W probabilities with K >= 1")
    return ad.sum(ad.take_channels(y, 1, y.shape[1]), axes=1, keepdims=True)


def mask_model_forward(y_probs, net: SegNet) -> Tensor:
    """Learned foreground model for part sets that do not tile the mask."""
    return ad.sigmoid(net(_t(y_probs)))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """N x H x W integer labels -> N x C x H x W float one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label outside [0, num_classes)")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:])
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1.0, axis=1)
    return out


def mode(probs) -> np.ndarray:
    """Per-pixel argmax, ties to the lowest class id."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=1).astype(np.int64)


@dataclass
class ModelBundle:
    part: SegNet
    posterior: SplitPosteriorNet
    keypoint: SegNet
    mask: SegNet | None = None

    @property
    def K(self) -> int:
        return self.keypoint.config["out_channels"]

    @classmethod
    def build(cls, K: int, width: int = 16, seed: int = 0, learned_mask: bool = False) -> "ModelBundle":
        return cls(
            part=build_segnet(3, K + 1, width, seed=[seed, 11]),
            posterior=build_split_posterior(3, K + 1, K + 1, width, seed=[seed, 12]),
            keypoint=build_segnet(K + 1, K, width, seed=[seed, 13]),
            mask=build_segnet(K + 1, 1, width, seed=[seed, 14]) if learned_mask else None,
        )

    def networks(self) -> dict:
        nets = {"part": self.part, "posterior": self.posterior, "keypoint": self.keypoint}
        if self.mask is not None:
            nets["mask"] = self.mask
        return nets

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self.networks().items():
            for k, v in net.params.items():
                out[f"{name}/{k}"] = v.data.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, net in self.networks().items():
            prefix = name + "/"
            net.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def copy(self) -> "ModelBundle":
        width = self.part.config["width"]
        other = ModelBundle.build(self.K, width, 0, learned_mask=self.mask is not None)
        other.load_state(self.state())
        return other

    def save(self, path, meta: dict | None = None) -> None:
        m = {"kind": "bundle", "K": self.K, "width": self.part.config["width"],
             "learned_mask": int(self.mask is not None)}
        m.update(meta or {})
        save_checkpoint(path, self.state(), m)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        params, meta = load_checkpoint(path)
        bundle = cls.build(int(meta["K"]), int(meta["width"]), 0, learned_mask=bool(int(meta.get("learned_mask", 0))))
        bundle.load_state(params)
        return bundle
