import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coarseem import oracles as O
from coarseem.training import EMConfig

DEFAULTS = EMConfig()


def _loop_log_joint(y, inst, w):
    """Scalar-loop reference for the unnormalised log-joint of a hard labeling."""
    h, wd = inst.shape
    C = inst.num_classes
    K = C - 1
    total = 0.0
    for r in range(h):
        for c in range(wd):
            logits = [sum(inst.part_kernel[k, ch, 0, 0] * inst.image[ch, r, c] for ch in range(3)) + inst.part_bias[k]
                      for k in range(C)]
            m = max(logits)
            e = [np.exp(v - m) for v in logits]
            mu = [v / sum(e) for v in e]
            for k in range(C):
                total -= w.alpha * abs((1.0 if y[r, c] == k else 0.0) - mu[k])
    for k in range(K):
        for r in range(h):
            for c in range(wd):
                acc = inst.kp_bias[k]
                for ci in range(C):
                    for i in range(3):
                        for j in range(3):
                            rr, cc = r + i - 1, c + j - 1
                            if 0 <= rr < h and 0 <= cc < wd and y[rr, cc] == ci:
                                acc += inst.kp_kernel[k, ci, i, j]
                total -= w.lambda1 * abs(inst.kp_heatmaps[k, r, c] - 1.0 / (1.0 + np.exp(-acc)))
    for r in range(h):
        for c in range(wd):
            fg = 1.0 if y[r, c] != 0 else 0.0
            p = min(max(fg, 1e-12), 1.0)
            q = min(max(1.0 - fg, 1e-12), 1.0)
            total += w.lambda2 * (inst.mask[r, c] * np.log(p) + (1 - inst.mask[r, c]) * np.log(q))
    return total


@pytest.mark.parametrize("instance_id", range(4))
def test_log_joint_matches_loop_reference(instance_id):
    inst = O.random_instance(3, instance_id=instance_id)
    rng = np.random.default_rng(instance_id)
    for _ in range(5):
        y = rng.integers(0, 3, size=inst.shape)
        got = O.unnorm_log_joint(y, inst, DEFAULTS)
        want = _loop_log_joint(y, inst, O.JointWeights(DEFAULTS.alpha, DEFAULTS.lambda1, DEFAULTS.lambda2))
        assert got == pytest.approx(want, abs=1e-9)
        assert np.isfinite(got)


def test_batch_log_joints_match_single_calls():
    inst = O.random_instance(0, instance_id=1)
    lj = O.all_log_joints(inst, DEFAULTS)
    labels = O.all_labelings(inst)
    assert len(lj) == 3**6
    for i in (0, 17, 400, 728):
        assert lj[i] == pytest.approx(O.unnorm_log_joint(labels[i], inst, DEFAULTS), abs=1e-10)


def test_labelings_enumerate_every_assignment_once():
    inst = O.random_instance(0, h=2, w=2, num_classes=2)
    labs = O.all_labelings(inst)
    assert labs.shape == (16, 2, 2)
    assert len({tuple(l.ravel()) for l in labs}) == 16


def test_invalid_labeling_rejected():
    inst = O.random_instance(0)
    with pytest.raises(ValueError):
        O.unnorm_log_joint(np.full(inst.shape, 3), inst)
    with pytest.raises(ValueError):
        O.unnorm_log_joint(np.zeros((3, 3), dtype=int), inst)


def test_instance_size_limits():
    with pytest.raises(ValueError):
        O.random_instance(0, h=3, w=3)
    with pytest.raises(ValueError):
        O.random_instance(0, num_classes=4)


def test_enumeration_refuses_huge_label_space(monkeypatch):
    inst = O.random_instance(0)
    monkeypatch.setattr(O, "MAX_LABELINGS", 100)
    with pytest.raises(ValueError, match="too large"):
        O.all_labelings(inst)


def test_loglik_of_two_pixel_instance_by_hand():
    inst = O.random_instance(5, h=1, w=2, num_classes=2)
    terms = [O.unnorm_log_joint(np.array([list(y)]), inst, DEFAULTS) for y in itertools.product(range(2), repeat=2)]
    assert O.exact_loglik(inst, DEFAULTS) == pytest.approx(np.log(np.sum(np.exp(terms))), abs=1e-12)


@pytest.mark.parametrize("instance_id", range(10))
def test_elbo_is_tight_at_exact_posterior(instance_id):
    inst = O.random_instance(0, instance_id=instance_id)
    lj = O.all_log_joints(inst, DEFAULTS)
    post = O.exact_posterior(inst, DEFAULTS)
    assert post.sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(O.elbo(post, inst, DEFAULTS, lj) - O.exact_loglik(inst, DEFAULTS)) <= 1e-9


def test_jensen_bound_for_random_q():
    rng = np.random.default_rng(0)
    for instance_id in range(4):
        inst = O.random_instance(1, instance_id=instance_id)
        lj = O.all_log_joints(inst, DEFAULTS)
        L = O.exact_loglik(inst, DEFAULTS)
        post = O.exact_posterior(inst, DEFAULTS)
        for trial in range(25):
            if trial % 2:
                q = rng.dirichlet(np.full(len(lj), 0.5))
            else:
                q = post * rng.dirichlet(np.full(len(lj), 5.0))
                q /= q.sum()
            assert O.elbo(q, inst, DEFAULTS, lj) <= L + 1e-9


def test_elbo_rejects_unnormalised_q():
    inst = O.random_instance(0)
    q = np.full(inst.num_labelings, 2.0 / inst.num_labelings)
    with pytest.raises(ValueError, match="normalised"):
        O.elbo(q, inst)
    with pytest.raises(ValueError):
        O.elbo(np.ones(3) / 3, inst)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_point_mass_elbo_equals_log_joint(seed):
    inst = O.random_instance(seed % 1000, instance_id=seed % 7, h=1, w=3)
    lj = O.all_log_joints(inst, DEFAULTS)
    i = seed % len(lj)
    q = np.zeros(len(lj))
    q[i] = 1.0
    assert O.elbo(q, inst, DEFAULTS, lj) == pytest.approx(lj[i], abs=1e-12)


def test_hard_em_trace_monotone_and_matches_enumeration():
    agree = 0
    for instance_id in range(10):
        inst = O.random_instance(0, instance_id=instance_id)
        y, trace = O.hard_em_infer(inst, DEFAULTS)
        assert np.all(np.diff(trace) >= 0)
        assert np.allclose(y.sum(axis=0), 1.0)
        best = O.all_labelings(inst)[np.argmax(O.all_log_joints(inst, DEFAULTS))]
        agree += bool((y.argmax(axis=0) == best).all())
    assert agree >= 8


def test_hard_em_part_term_alone_recovers_part_model_argmax():
    cfg = O.JointWeights(alpha=100.0, lambda1=0.0, lambda2=0.0)
    for instance_id in range(5):
        inst = O.random_instance(2, instance_id=instance_id)
        y, _ = O.hard_em_infer(inst, cfg, steps=100)
        mu = O.part_mean(inst).data[0]
        assert (y.argmax(axis=0) == mu.argmax(axis=0)).all()


def test_hard_em_single_start_uses_given_logits():
    inst = O.random_instance(0)
    z = np.zeros((3,) + tuple(inst.shape))
    y, trace = O.hard_em_infer(inst, DEFAULTS, steps=5, init_logits=z)
    assert len(trace) == 6
    assert np.all(np.diff(trace) >= 0)
