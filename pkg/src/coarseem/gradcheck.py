"""Finite-difference checks for every differentiable op and every training loss.

Each check returns the worst relative error between reverse-mode and central
difference gradients.  Network checks use a width-2 model on 8 x 8 inputs and
probe a fixed random subset of coordinates in every parameter tensor.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .losses import loss_ce_parts, loss_kp_l1, loss_mask_binomial, loss_neg_entropy
from .models import keypoint_forward, mask_marginalize, one_hot, part_forward, posterior_forward
from .nn import MultiTaskNet, Network, Sequential, build_segnet, build_split_posterior

TOLERANCE = 1e-4
STEP = 1e-5


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def op_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """name -> zero-argument callable returning the worst relative error."""
    x = _rand(rng, 2, 3, 4, 4)
    y = _rand(rng, 2, 3, 4, 4)
    w = _rand(rng, 2, 3, 4, 4)
    pos = _rand(rng, 2, 3, 4, 4, lo=0.2, hi=2.0)
    k = _rand(rng, 4, 3, 3, 3)
    k4 = _rand(rng, 4, 3, 4, 4)
    b = _rand(rng, 4)
    a2 = _rand(rng, 3, 5)
    b2 = _rand(rng, 5, 2)
    W = Tensor(w)

    def weighted(t):
        return ad.sum(ad.mul(t, Tensor(_rand(np.random.default_rng(1), *t.shape))))

    fd = finite_diff_check
    return {
        "add": lambda: fd(lambda t: ad.sum(ad.mul(ad.add(t, Tensor(y)), W)), Tensor(x), STEP),
        "sub": lambda: fd(lambda t: ad.sum(ad.mul(ad.sub(Tensor(y), t), W)), Tensor(x), STEP),
        "mul": lambda: fd(lambda t: ad.sum(ad.mul(ad.mul(t, Tensor(y)), W)), Tensor(x), STEP),
        "scale": lambda: fd(lambda t: ad.sum(ad.mul(ad.scale(t, -2.5), W)), Tensor(x), STEP),
        "relu": lambda: fd(lambda t: ad.sum(ad.mul(ad.relu(t), W)), Tensor(x), STEP),
        "exp": lambda: fd(lambda t: ad.sum(ad.mul(ad.exp(t), W)), Tensor(x), STEP),
        "log": lambda: fd(lambda t: ad.sum(ad.mul(ad.log(t), W)), Tensor(pos), STEP),
        "abs": lambda: fd(lambda t: ad.sum(ad.mul(ad.abs(t), W)), Tensor(x), STEP),
        "sigmoid": lambda: fd(lambda t: ad.sum(ad.mul(ad.sigmoid(t), W)), Tensor(x), STEP),
        "clamp_min": lambda: fd(lambda t: ad.sum(ad.mul(ad.clamp_min(t, 0.1), W)), Tensor(x), STEP),
        "matmul_left": lambda: fd(lambda t: weighted(ad.matmul(t, Tensor(b2))), Tensor(a2), STEP),
        "matmul_right": lambda: fd(lambda t: weighted(ad.matmul(Tensor(a2), t)), Tensor(b2), STEP),
        "conv2d_input": lambda: fd(lambda t: weighted(ad.conv2d(t, Tensor(k4), Tensor(b), 2, 1)), Tensor(x), STEP),
        "conv2d_kernel": lambda: fd(lambda t: weighted(ad.conv2d(Tensor(x), t, Tensor(b), 1, 1)), Tensor(k), STEP),
        "conv2d_bias": lambda: fd(lambda t: weighted(ad.conv2d(Tensor(x), Tensor(k), t, 1, 0)), Tensor(b), STEP),
        "upsample_nearest": lambda: fd(lambda t: weighted(ad.upsample_nearest(t, 2)), Tensor(x), STEP),
        "softmax_channel": lambda: fd(lambda t: weighted(ad.softmax_channel(t)), Tensor(x), STEP),
        "log_softmax_channel": lambda: fd(lambda t: weighted(ad.log_softmax_channel(t)), Tensor(x), STEP),
        "sum": lambda: fd(lambda t: weighted(ad.sum(t, axes=(1, 3))), Tensor(x), STEP),
        "mean": lambda: fd(lambda t: weighted(ad.mean(t, axes=2, keepdims=True)), Tensor(x), STEP),
        "concat_channels": lambda: fd(lambda t: weighted(ad.concat_channels([t, Tensor(y)])), Tensor(x), STEP),
        "take_channels": lambda: fd(lambda t: weighted(ad.take_channels(t, 1, 3)), Tensor(x), STEP),
        "reshape": lambda: fd(lambda t: weighted(ad.reshape(t, (6, 16))), Tensor(x), STEP),
    }


@contextlib.contextmanager
def _swapped(net: Network, name: str, probe: Tensor):
    """Route one named parameter of ``net`` through ``probe`` for one forward."""
    old = net.params[name]
    seqs = [v for v in vars(net).values() if isinstance(v, Sequential)]
    hits = []
    for seq in seqs:
        for ps in seq._layer_params:
            for i, p in enumerate(ps):
                if p is old:
                    ps[i] = probe
                    hits.append((ps, i))
    if not hits:
        raise KeyError(f"parameter {name} is not used by any layer")
    try:
        yield
    finally:
        for ps, i in hits:
            ps[i] = old


def param_check(net: Network, loss_fn: Callable[[], Tensor], rng: np.random.Generator, per_tensor: int = 6) -> float:
    """Worst relative error over a random coordinate subset of every parameter of ``net``."""
    worst = 0.0
    for name, p in net.params.items():
        coords = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)

        def f(t, name=name):
            with _swapped(net, name, t):
                return loss_fn()

        worst = max(worst, finite_diff_check(f, Tensor(p.data), STEP, coords=[int(c) for c in coords]))
    return worst


def network_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    K, C, N, H = 2, 3, 2, 8
    width = 2
    x = _rand(rng, N, 3, H, H, lo=0.0, hi=1.0)
    parts = rng.integers(0, C, size=(N, H, H))
    soft = rng.dirichlet(np.ones(C), size=(N, H, H)).transpose(0, 3, 1, 2)
    heat = _rand(rng, N, K, H, H, lo=0.0, hi=1.0)
    vis = np.array([[1, 0], [1, 1]])
    mask = (parts > 0).astype(np.float64)
    part_net = build_segnet(3, C, width, seed=[7, 1])
    post_net = build_split_posterior(3, K + 1, C, width, seed=[7, 2])
    kp_net = build_segnet(C, K, width, seed=[7, 3])
    mt_net = MultiTaskNet(3, C, K, width, seed=[7, 4])

    def part_ce():
        return loss_ce_parts(part_forward(x, part_net), parts)

    def pseudo_ce():
        return ad.add(ad.scale(part_ce(), 0.1), ad.scale(loss_ce_parts(part_forward(x, part_net), soft), 2.0))

    def e_step_loss():
        mu_q = posterior_forward(x, mask, heat, post_net)
        total = ad.scale(loss_ce_parts(mu_q, soft), 0.05)
        total = ad.add(total, ad.scale(loss_kp_l1(keypoint_forward(mu_q, kp_net), heat, vis), 50.0))
        total = ad.add(total, loss_mask_binomial(mask_marginalize(mu_q), mask))
        return ad.add(total, ad.scale(loss_neg_entropy(mu_q), 0.01))

    def kp_loss():
        return loss_kp_l1(keypoint_forward(one_hot(parts, C), kp_net), heat, vis)

    def multitask_loss():
        logits, kp_logits = mt_net(Tensor(x))
        probs = ad.softmax_channel(logits)
        total = ad.add(loss_ce_parts(probs, parts), ad.scale(loss_kp_l1(ad.sigmoid(kp_logits), heat, vis), 10.0))
        return ad.add(total, loss_mask_binomial(mask_marginalize(probs), mask))

    point_weights = (rng.uniform(size=parts.shape) < 0.3).astype(np.float64)

    def pointsup_loss():
        probs = part_forward(x, part_net)
        pts = ad.scale(loss_ce_parts(probs, parts, weights=point_weights), 0.5)
        return ad.add(pts, loss_mask_binomial(mask_marginalize(probs), mask))

    pr = lambda: np.random.default_rng(rng.integers(2**31))  # noqa: E731 - fresh stream per check
    return {
        "net:finetune_ce": lambda: param_check(part_net, part_ce, pr()),
        "net:m_step_part": lambda: param_check(part_net, pseudo_ce, pr()),
        "net:e_step_posterior": lambda: param_check(post_net, e_step_loss, pr()),
        "net:e_step_input_to_keypoint": lambda: finite_diff_check(
            lambda t: loss_kp_l1(keypoint_forward(ad.softmax_channel(t), kp_net), heat, vis), Tensor(np.log(soft)), STEP
        ),
        "net:m_step_keypoint": lambda: param_check(kp_net, kp_loss, pr()),
        "net:multitask": lambda: param_check(mt_net, multitask_loss, pr()),
        "net:pointsup": lambda: param_check(part_net, pointsup_loss, pr()),
    }


def run_gradcheck(seed: int = 0) -> list[tuple[str, float, bool]]:
    """(name, worst relative error, passed) for every check, in a fixed order."""
    rng = np.random.default_rng(seed)
    checks = {**op_checks(rng), **network_checks(rng)}
    out = []
    for name, check in checks.items():
        err = float(check())
        out.append((name, err, bool(err < TOLERANCE)))
    return out
