import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coarseem import autodiff as ad
from coarseem.autodiff import Tensor
from coarseem.losses import (
    loss_ce_parts,
    loss_kp_l1,
    loss_kp_squared,
    loss_mask_binomial,
    loss_neg_entropy,
)
from coarseem.metrics import heatmap_argmax, iou_per_class, miou, pck
from coarseem.models import (
    ModelBundle,
    coarse_channels,
    keypoint_forward,
    mask_marginalize,
    mode,
    one_hot,
    part_forward,
    posterior_forward,
)
from coarseem.nn import build_segnet, build_split_posterior

finite = st.floats(-30, 30, allow_nan=False)


def _softmax(logits):
    return ad.softmax_channel(Tensor(logits))


# ---- models -----------------------------------------------------------------


def test_mask_marginal_complements_background_on_1000_inputs():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 8))
        logits = rng.normal(scale=rng.uniform(0.1, 20), size=(1, k + 1, 3, 3))
        y = _softmax(logits)
        mu = mask_marginalize(y).data[:, 0]
        worst = max(worst, float(np.abs(mu + y.data[:, 0] - 1.0).max()))
    assert worst <= 1e-15


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 4, 3, 3), elements=finite))
def test_part_probabilities_sum_to_one(logits):
    y = _softmax(logits).data
    assert np.all(y >= 0) and np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
    mu = mask_marginalize(y).data
    assert np.all(mu >= -1e-15) and np.all(mu <= 1 + 1e-15)


def test_network_outputs_are_distributions_and_heatmaps_in_unit_range():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(2, 3, 16, 16))
    b = ModelBundle.build(4, width=4, seed=2)
    y = part_forward(x, b.part).data
    assert y.shape == (2, 5, 16, 16) and np.allclose(y.sum(axis=1), 1.0)
    q = posterior_forward(x, rng.integers(0, 2, (2, 16, 16)), rng.uniform(size=(2, 4, 16, 16)), b.posterior).data
    assert np.allclose(q.sum(axis=1), 1.0)
    hm = keypoint_forward(y, b.keypoint).data
    assert hm.shape == (2, 4, 16, 16) and hm.min() > 0 and hm.max() < 1


def test_posterior_accepts_all_zero_coarse_input():
    net = build_split_posterior(3, 4, 4, 4, seed=0)
    x = np.random.default_rng(0).uniform(size=(1, 3, 8, 8))
    q = posterior_forward(x, np.zeros((1, 8, 8)), np.zeros((1, 3, 8, 8)), net).data
    assert np.isfinite(q).all() and np.allclose(q.sum(axis=1), 1.0)


def test_coarse_channels_layout_and_mismatch():
    mask = np.ones((2, 8, 8))
    hm = np.zeros((2, 3, 8, 8))
    c = coarse_channels(mask, hm).data
    assert c.shape == (2, 4, 8, 8) and np.all(c[:, 0] == 1) and not c[:, 1:].any()
    with pytest.raises(ValueError):
        coarse_channels(mask, np.zeros((2, 3, 4, 4)))


def test_one_hot_and_mode():
    lab = np.array([[[0, 2], [1, 1]]])
    oh = one_hot(lab, 3)
    assert oh.shape == (1, 3, 2, 2) and np.array_equal(oh.argmax(1), lab) and np.all(oh.sum(1) == 1)
    with pytest.raises(ValueError):
        one_hot(lab, 2)
    tie = np.full((1, 3, 1, 1), 1 / 3)
    assert mode(tie)[0, 0, 0] == 0


def test_bundle_save_load_and_copy(tmp_path):
    b = ModelBundle.build(3, width=4, seed=5)
    b.save(tmp_path / "b.ckpt")
    c = ModelBundle.load(tmp_path / "b.ckpt")
    d = b.copy()
    for other in (c, d):
        s1, s2 = b.state(), other.state()
        assert s1.keys() == s2.keys() and all(np.array_equal(s1[k], s2[k]) for k in s1)
    d.part.params[next(iter(d.part.params))].data += 1
    assert not np.array_equal(d.state()["part/" + next(iter(d.part.params))],
                              b.state()["part/" + next(iter(b.part.params))])


# ---- losses -----------------------------------------------------------------


def test_loss_unit_values():
    u3 = Tensor(np.full((1, 3, 1, 1), 1 / 3))
    assert abs(loss_ce_parts(u3, np.zeros((1, 1, 1), dtype=int)).item() - math.log(3)) < 1e-12
    assert abs(loss_mask_binomial(Tensor(np.full((1, 1, 1, 1), 0.5)), np.ones((1, 1, 1))).item() - math.log(2)) < 1e-12
    assert abs(loss_mask_binomial(Tensor(np.full((1, 1, 1, 1), 0.5)), np.zeros((1, 1, 1))).item() - math.log(2)) < 1e-12
    assert abs(loss_neg_entropy(u3).item() + math.log(3)) < 1e-12


def _ce_loop(p, t):
    n, c, h, w = p.shape
    total = 0.0
    for i in range(n):
        for r in range(h):
            for s in range(w):
                total -= sum(t[i, k, r, s] * math.log(max(p[i, k, r, s], 1e-12)) for k in range(c))
    return total / (n * h * w)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 2, 3), elements=finite), arrays(np.float64, (2, 3, 2, 3), elements=finite))
def test_soft_cross_entropy_matches_loop(a, b):
    p, t = _softmax(a).data, _softmax(b).data
    assert loss_ce_parts(Tensor(p), t).item() == pytest.approx(_ce_loop(p, t), rel=1e-10, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 2, 2), elements=finite), st.integers(0, 2**31))
def test_weighted_cross_entropy_matches_loop(a, seed):
    rng = np.random.default_rng(seed)
    p = _softmax(a).data
    lab = rng.integers(0, 3, (2, 2, 2))
    w = rng.uniform(size=(2, 2, 2))
    t = one_hot(lab, 3)
    per = -(t * np.log(np.maximum(p, 1e-12))).sum(axis=1)
    assert loss_ce_parts(Tensor(p), lab, weights=w).item() == pytest.approx((per * w).sum() / w.sum(), rel=1e-10)
    assert loss_ce_parts(Tensor(p), lab, weights=np.zeros_like(w)).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 4, 2, 2), elements=finite))
def test_entropy_bounds(a):
    q = _softmax(a)
    v = loss_neg_entropy(q).item()
    assert -math.log(4) - 1e-12 <= v <= 1e-12


def test_keypoint_losses_by_hand_and_invisible_targets():
    pred = Tensor(np.full((1, 2, 2, 2), 0.25))
    target = np.zeros((1, 2, 2, 2))
    target[0, 0, 0, 0] = 1.0
    target[0, 1, 1, 1] = 1.0
    assert loss_kp_l1(pred, target).item() == pytest.approx((2 * 0.75 + 6 * 0.25) / 8)
    assert loss_kp_squared(pred, target).item() == pytest.approx((2 * 0.75**2 + 6 * 0.25**2) / 8)
    vis = np.array([[1, 0]])
    assert loss_kp_l1(pred, target, vis).item() == pytest.approx((0.75 + 7 * 0.25) / 8)
    with pytest.raises(ValueError):
        loss_kp_l1(pred, np.zeros((1, 2, 3, 3)))


def test_binomial_is_clamped_at_certainty():
    v = loss_mask_binomial(Tensor(np.zeros((1, 1, 1, 1))), np.ones((1, 1, 1))).item()
    assert np.isfinite(v) and v == pytest.approx(-math.log(1e-12))


# ---- metrics ----------------------------------------------------------------


def test_iou_hand_example():
    gt = np.array([[0, 0, 1, 1]])
    pred = np.array([[0, 1, 1, 2]])
    ious = iou_per_class(pred, gt, 4)
    assert ious[0] == pytest.approx(0.5) and ious[1] == pytest.approx(1 / 3) and ious[2] == 0.0
    assert np.isnan(ious[3])
    assert miou(pred, gt, 4) == pytest.approx((0.5 + 1 / 3 + 0.0) / 3)
    assert miou(gt, gt, 4) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, (2, 5, 5)), rng.integers(0, 4, (2, 5, 5))
    assert np.allclose(iou_per_class(a, b, 4), iou_per_class(b, a, 4), equal_nan=True)
    m = miou(a, b, 4)
    assert 0.0 <= m <= 1.0


def test_pck_inclusive_boundary_on_32px():
    gt = np.array([[[10, 10]]])
    vis = np.array([[1]])
    assert pck(np.array([[[10, 13.2]]]), gt, vis, 0.1, 32, 32) == 100.0
    assert pck(np.array([[[10, 13.3]]]), gt, vis, 0.1, 32, 32) == 0.0
    assert np.isnan(pck(gt, gt, np.array([[0]]), 0.1, 32, 32))
    with pytest.raises(ValueError):
        pck(gt, gt, vis, 0.0, 32, 32)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(-5, 5), st.integers(-5, 5))
def test_pck_translation_invariant(seed, dr, dc):
    rng = np.random.default_rng(seed)
    gt = rng.integers(5, 25, (3, 4, 2))
    pred = gt + rng.integers(-6, 7, gt.shape)
    vis = rng.integers(0, 2, (3, 4))
    vis[0, 0] = 1
    shift = np.array([dr, dc])
    assert pck(pred, gt, vis, 0.1, 32, 32) == pck(pred + shift, gt + shift, vis, 0.1, 32, 32)


def test_heatmap_argmax_positions():
    hm = np.zeros((1, 2, 4, 5))
    hm[0, 0, 3, 1] = 1
    hm[0, 1, 0, 4] = 2
    assert heatmap_argmax(hm).tolist() == [[[3, 1], [0, 4]]]


def test_segnet_accepts_part_probabilities_as_input():
    net = build_segnet(4, 3, 4, seed=0)
    y = _softmax(np.random.default_rng(0).normal(size=(1, 4, 8, 8)))
    assert net(y).shape == (1, 3, 8, 8)


def test_keypoint_l1_offset_and_loop_oracle():
    rng = np.random.default_rng(3)
    t = rng.uniform(size=(2, 3, 4, 4))
    assert loss_kp_l1(Tensor(t + 0.5), t).item() == pytest.approx(0.5, abs=1e-12)
    assert loss_kp_l1(Tensor(t), t).item() == 0.0
    p = rng.uniform(size=t.shape)
    ref = 0.0
    for idx in np.ndindex(*t.shape):
        ref += abs(p[idx] - t[idx])
    assert loss_kp_l1(Tensor(p), t).item() == pytest.approx(ref / t.size, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_binomial_matches_loop(seed):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.01, 0.99, size=(2, 1, 3, 4))
    y = rng.integers(0, 2, size=(2, 3, 4))
    ref = 0.0
    for n, r, c in np.ndindex(2, 3, 4):
        m = mu[n, 0, r, c]
        ref -= y[n, r, c] * math.log(m) + (1 - y[n, r, c]) * math.log(1 - m)
    assert loss_mask_binomial(Tensor(mu), y).item() == pytest.approx(ref / 24, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 2, 2), elements=finite))
def test_neg_entropy_matches_loop(a):
    q = _softmax(a).data
    ref = 0.0
    for n, r, c in np.ndindex(2, 2, 2):
        ref += sum(q[n, k, r, c] * math.log(max(q[n, k, r, c], 1e-12)) for k in range(3))
    assert loss_neg_entropy(Tensor(q)).item() == pytest.approx(ref / 8, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(4)))
def test_miou_invariant_under_consistent_relabelling(seed, perm):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, (2, 6, 6)), rng.integers(0, 4, (2, 6, 6))
    p = np.array(perm)
    assert miou(p[a], p[b], 4) == pytest.approx(miou(a, b, 4), abs=1e-15)


def test_hard_and_soft_targets_agree():
    rng = np.random.default_rng(4)
    p = _softmax(rng.normal(size=(2, 3, 4, 4)))
    lab = rng.integers(0, 3, (2, 4, 4))
    assert loss_ce_parts(p, lab).item() == loss_ce_parts(p, one_hot(lab, 3)).item()
    assert loss_ce_parts(Tensor(one_hot(lab, 3)), lab).item() == 0.0
    with pytest.raises(ValueError):
        loss_ce_parts(p, lab[:, :2])
