"""Exact enumeration oracles for the bound and for hard-EM inference.

A :class:`TinyInstance` has at most 6 pixels and 3 classes so every labeling
can be enumerated.  Its "networks" are miniature: a 1x1 conv + softmax for
the part mean and a 3x3 conv + sigmoid for the keypoint mean, which keeps
them valid on grids that are not multiples of 8.

Log-joints omit the normalisers of the Laplace factors.  Those depend on
neither y nor the observations, so they shift the log-likelihood and every
ELBO by the same constant and the bound comparison stays exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LOG_EPS

MAX_LABELINGS = 10**6


@dataclass
class TinyInstance:
    image: np.ndarray  # 3 x h x w
    kp_heatmaps: np.ndarray  # K x h x w, observed
    mask: np.ndarray  # h x w in {0, 1}, observed
    part_kernel: np.ndarray  # (K+1) x 3 x 1 x 1
    part_bias: np.ndarray  # K+1
    kp_kernel: np.ndarray  # K x (K+1) x 3 x 3
    kp_bias: np.ndarray  # K
    instance_id: int = 0

    @property
    def num_classes(self) -> int:
        return self.part_kernel.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1:]

    @property
    def num_labelings(self) -> int:
        h, w = self.shape
        return self.num_classes ** (h * w)


@dataclass
class JointWeights:
    alpha: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0


def random_instance(seed: int, h: int = 2, w: int = 3, num_classes: int = 3, instance_id: int = 0,
                    scale: float = 2.0, kp_noise: float = 0.02) -> TinyInstance:
    """Random image and weights; coarse labels come from a hidden labeling.

    The mask is the exact foreground of the hidden labeling and the keypoint
    maps are the keypoint model's output on it plus clipped Gaussian noise.
    """
    if h * w > 6 or num_classes > 3 or num_classes < 2:
        raise ValueError("tiny instances need h*w <= 6 and 2..3 classes")
    rng = np.random.default_rng([seed, instance_id])
    K = num_classes - 1
    inst = TinyInstance(
        image=rng.uniform(0, 1, size=(3, h, w)),
        kp_heatmaps=np.zeros((K, h, w)),
        mask=np.zeros((h, w)),
        part_kernel=rng.normal(scale=scale, size=(num_classes, 3, 1, 1)),
        part_bias=rng.normal(size=num_classes),
        kp_kernel=rng.normal(scale=scale, size=(K, num_classes, 3, 3)),
        kp_bias=rng.normal(size=K),
        instance_id=instance_id,
    )
    hidden = rng.integers(0, num_classes, size=(h, w))
    with ad.no_grad():
        kp = keypoint_mean(_onehot(hidden, num_classes)[None], inst).data[0]
    inst.kp_heatmaps = np.clip(kp + rng.normal(scale=kp_noise, size=kp.shape), 0.0, 1.0)
    inst.mask = (hidden != 0).astype(np.float64)
    return inst


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((num_classes,) + labels.shape)
    np.put_along_axis(out, labels[None].astype(np.int64), 1.0, axis=0)
    return out


def part_mean(inst: TinyInstance) -> Tensor:
    """1 x (K+1) x h x w part probabilities from the image."""
    return ad.softmax_channel(ad.conv2d(Tensor(inst.image[None]), Tensor(inst.part_kernel), Tensor(inst.part_bias)))


def keypoint_mean(y: Tensor | np.ndarray, inst: TinyInstance) -> Tensor:
    """N x K x h x w keypoint maps from N x (K+1) x h x w labelings (soft or hard)."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    return ad.sigmoid(ad.conv2d(y, Tensor(inst.kp_kernel), Tensor(inst.kp_bias), pad=1))


def _fit_terms(y: Tensor, inst: TinyInstance, weights: JointWeights) -> Tensor:
    """-alpha * |y - mu(x)|_1 - lambda1 * |y_kp - mu_kp(y)|_1, one value per labeling."""
    mu = part_mean(inst).data
    part = ad.sum(ad.abs(ad.sub(y, Tensor(np.broadcast_to(mu, y.shape)))), axes=(1, 2, 3))
    kp = keypoint_mean(y, inst)
    kp_term = ad.sum(ad.abs(ad.sub(kp, Tensor(np.broadcast_to(inst.kp_heatmaps, kp.shape)))), axes=(1, 2, 3))
    return ad.add(ad.scale(part, -weights.alpha), ad.scale(kp_term, -weights.lambda1))


def _mask_loglik(log_fg: Tensor, log_bg: Tensor, inst: TinyInstance) -> Tensor:
    m = np.broadcast_to(inst.mask, log_fg.shape)
    return ad.sum(ad.add(ad.mul(log_fg, Tensor(m)), ad.mul(log_bg, Tensor(1.0 - m))), axes=(1, 2))


def _log_joint_tensor(y: Tensor, inst: TinyInstance, weights: JointWeights) -> Tensor:
    """Per-labeling log-joint, shape N, for N x (K+1) x h x w labelings."""
    fg = ad.sum(ad.take_channels(y, 1, y.shape[1]), axes=1)
    log_fg = ad.log(ad.clamp_min(fg, LOG_EPS))
    log_bg = ad.log(ad.clamp_min(ad.add(ad.scale(fg, -1.0), 1.0), LOG_EPS))
    total = ad.add(_fit_terms(y, inst, weights), ad.scale(_mask_loglik(log_fg, log_bg, inst), weights.lambda2))
    return ad.reshape(total, (y.shape[0],))


def _relaxed_objective(logits: Tensor, inst: TinyInstance, weights: JointWeights) -> Tensor:
    """Log-joint of y = softmax(logits), with the mask term taken in log space.

    log P(fg) is a log-sum-exp over the part logits, so the mask term never
    hits the clamp that hard labelings need and its gradient never vanishes.
    """
    y = ad.softmax_channel(logits)
    fg_logits = ad.take_channels(logits, 1, logits.shape[1])
    shift = Tensor(np.broadcast_to(fg_logits.data.max(axis=1, keepdims=True), fg_logits.shape))
    lse_fg = ad.add(
        ad.log(ad.sum(ad.exp(ad.sub(fg_logits, shift)), axes=1, keepdims=True)),
        ad.take_channels(shift, 0, 1),
    )
    two = ad.log_softmax_channel(ad.concat_channels([ad.take_channels(logits, 0, 1), lse_fg]))
    n = logits.shape[0]
    h, w = logits.shape[2:]
    log_bg = ad.reshape(ad.take_channels(two, 0, 1), (n, h, w))
    log_fg = ad.reshape(ad.take_channels(two, 1, 2), (n, h, w))
    total = ad.add(_fit_terms(y, inst, weights), ad.scale(_mask_loglik(log_fg, log_bg, inst), weights.lambda2))
    return ad.sum(total)


def _weights(cfg) -> JointWeights:
    if cfg is None:
        return JointWeights()
    return JointWeights(float(cfg.alpha), float(cfg.lambda1), float(cfg.lambda2))


def unnorm_log_joint(y: np.ndarray, inst: TinyInstance, cfg=None) -> float:
    """log p(y, y_kp, y_mask | x) up to y-independent constants, for a hard labeling."""
    y = np.asarray(y)
    if y.shape != inst.shape or y.min() < 0 or y.max() >= inst.num_classes:
        raise ValueError("invalid labeling for this instance")
    with ad.no_grad():
        return _log_joint_tensor(Tensor(_onehot(y, inst.num_classes)[None]), inst, _weights(cfg)).item()


def all_labelings(inst: TinyInstance) -> np.ndarray:
    """Every labeling as an L x h x w array, in lexicographic order."""
    if inst.num_labelings > MAX_LABELINGS:
        raise ValueError(f"label space of {inst.num_labelings} is too large to enumerate")
    h, w = inst.shape
    combos = np.array(list(itertools.product(range(inst.num_classes), repeat=h * w)), dtype=np.int64)
    return combos.reshape(-1, h, w)


def all_log_joints(inst: TinyInstance, cfg=None) -> np.ndarray:
    labels = all_labelings(inst)
    onehots = np.stack([_onehot(lab, inst.num_classes) for lab in labels])
    with ad.no_grad():
        return _log_joint_tensor(Tensor(onehots), inst, _weights(cfg)).data


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def exact_loglik(inst: TinyInstance, cfg=None) -> float:
    return _logsumexp(all_log_joints(inst, cfg))


def exact_posterior(inst: TinyInstance, cfg=None) -> np.ndarray:
    lj = all_log_joints(inst, cfg)
    return np.exp(lj - _logsumexp(lj))


def elbo(q: np.ndarray, inst: TinyInstance, cfg=None, log_joints: np.ndarray | None = None) -> float:
    """sum_y q(y) log p(y, obs) + H(q)."""
    q = np.asarray(q, dtype=np.float64)
    lj = all_log_joints(inst, cfg) if log_joints is None else log_joints
    if q.shape != lj.shape:
        raise ValueError("q must assign a probability to every labeling")
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("q is not normalised")
    nz = q > 0
    return float((q[nz] * lj[nz]).sum() - (q[nz] * np.log(q[nz])).sum())


def _ascend(objective, z: np.ndarray, steps: int, lr: float):
    cur, _ = objective(z)
    trace = [cur]
    step = lr
    for _ in range(steps):
        _, g = objective(z, grad=True)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient during ascent")
        step = min(step * 2.0, lr)
        while True:
            cand = z + step * g
            val, _ = objective(cand)
            if not np.isfinite(val):
                raise FloatingPointError("objective diverged")
            if val >= cur:
                z, cur = cand, val
                break
            step *= 0.5
            if step < 1e-12:
                break
        trace.append(cur)
    return z, np.array(trace)


def hard_em_infer(inst: TinyInstance, cfg=None, steps: int = 200, lr: float = 0.5, restarts: int = 4,
                  init_logits=None, seed: int = 0):
    """Gradient ascent on the relaxed log-joint with per-pixel softmax labelings.

    Each step tries ``lr`` and halves it until the objective does not
    decrease, so every trace is non-decreasing.  The relaxation is not
    concave, so ascent runs from several starts (part-model logits, uniform,
    then seeded random logits) and keeps the highest final objective.
    Returns that run's (K+1) x h x w soft labeling and its objective trace.
    """
    weights = _weights(cfg)

    def objective(logits, grad=False):
        t = Tensor(logits, requires_grad=grad)
        val = _relaxed_objective(t, inst, weights)
        if grad:
            val.backward()
            return val.item(), t.grad
        return val.item(), None

    if init_logits is not None:
        starts = [np.asarray(init_logits, dtype=np.float64)[None]]
    else:
        with ad.no_grad():
            mu = part_mean(inst).data
        shape = mu.shape
        rng = np.random.default_rng([seed, inst.instance_id])
        starts = [np.log(np.maximum(mu, LOG_EPS)), np.zeros(shape)]
        starts += [rng.normal(size=shape) for _ in range(max(0, restarts - 2))]
        starts = starts[: max(1, restarts)]
    best = None
    for z0 in starts:
        z, trace = _ascend(objective, z0, steps, lr)
        if best is None or trace[-1] > best[1][-1]:
            best = (z, trace)
    with ad.no_grad():
        y = ad.softmax_channel(Tensor(best[0])).data[0]
    return y, best[1]
