import hashlib
from dataclasses import replace

import numpy as np
import pytest

from coarseem.models import ModelBundle, mode, posterior_forward
from coarseem.nn import build_segnet
from coarseem.synthgen import GenConfig, generate_benchmark
from coarseem.training import (
    HISTORY_COLUMNS,
    BaselineConfig,
    ConfigError,
    EMConfig,
    _optimizer,
    coarse_inputs,
    config_from_dict,
    e_step,
    finetune_step,
    init_bundle,
    m_step,
    pointsup_labels,
    train_em,
    train_finetune,
    train_multitask,
    train_pointsup,
    train_pseudosup,
)


@pytest.fixture(scope="module")
def data():
    return generate_benchmark(GenConfig(H=16, W=16, seed=4), 4, 8, 3, 3)


def _bundle(seed=0):
    return ModelBundle.build(5, width=4, seed=seed)


def _snapshot(net):
    return {k: v.data.copy() for k, v in net.params.items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def _sgd_cfg(**kw):
    base = dict(optimizer="sgd", momentum=0.0, weight_decay=0.0, lr_part=0.05, lr_posterior=0.05, lr_coarse=0.05)
    base.update(kw)
    return EMConfig(**base)


def _opts(b, cfg):
    return (
        _optimizer(b.posterior, cfg.optimizer, cfg.lr_posterior, cfg.momentum, cfg.weight_decay),
        _optimizer(b.part, cfg.optimizer, cfg.lr_part, cfg.momentum, cfg.weight_decay),
        _optimizer(b.keypoint, cfg.optimizer, cfg.lr_coarse, cfg.momentum, cfg.weight_decay),
    )


def test_config_validation():
    for bad in (dict(alpha=-1.0), dict(b=0), dict(epochs=0), dict(part_term="x"), dict(optimizer="rmsprop")):
        with pytest.raises(ConfigError):
            EMConfig(**bad)
    with pytest.raises(ConfigError):
        BaselineConfig(baseline_optimizer="x")
    with pytest.raises(ConfigError):
        config_from_dict(EMConfig, {"nope": 1})


def test_e_step_only_moves_the_posterior(data):
    b = _bundle()
    cfg = EMConfig()
    oq, _, _ = _opts(b, cfg)
    part, kp, post = _snapshot(b.part), _snapshot(b.keypoint), _snapshot(b.posterior)
    terms = e_step(data["coarse"], b, cfg, oq)
    assert _same(part, _snapshot(b.part)) and _same(kp, _snapshot(b.keypoint))
    assert not _same(post, _snapshot(b.posterior))
    assert set(terms) == {"loss_part", "loss_kp", "loss_mask", "loss_entropy", "loss_total"}
    assert all(p.requires_grad for p in b.part.parameters() + b.keypoint.parameters())


def test_m_step_leaves_the_posterior_alone(data):
    b = _bundle()
    cfg = EMConfig()
    _, op, ok = _opts(b, cfg)
    part, kp, post = _snapshot(b.part), _snapshot(b.keypoint), _snapshot(b.posterior)
    m_step(data["coarse"], data["part"], b, cfg, op, ok)
    assert _same(post, _snapshot(b.posterior))
    assert not _same(part, _snapshot(b.part)) and not _same(kp, _snapshot(b.keypoint))


def test_m_step_without_pseudo_labels_is_a_finetune_step(data):
    cfg = EMConfig(delta2=0.0, update_kp=False)
    a, b = _bundle(), _bundle()
    _, op, ok = _opts(a, cfg)
    opt_ref = _optimizer(b.part, cfg.optimizer, cfg.lr_part, cfg.momentum, cfg.weight_decay)
    before = _snapshot(a.part)
    kp = _snapshot(a.keypoint)
    pb = data["part"]
    for _ in range(3):
        m_step(data["coarse"], pb, a, cfg, op, ok)
        finetune_step(b.part, opt_ref, pb.images, pb.parts, weight=cfg.delta1)
    got, ref = _snapshot(a.part), _snapshot(b.part)
    for k in before:
        assert np.abs((got[k] - before[k]) - (ref[k] - before[k])).max() <= 1e-15
    assert _same(kp, _snapshot(a.keypoint))


@pytest.mark.parametrize("term", ["alpha", "lambda1", "lambda2", "gamma"])
def test_each_e_step_weight_owns_exactly_its_term(data, term):
    batch = data["coarse"].subset(np.arange(4))

    def delta(cfg):
        b = _bundle()
        before = _snapshot(b.posterior)
        e_step(batch, b, cfg, _opts(b, cfg)[0])
        after = _snapshot(b.posterior)
        return {k: after[k] - before[k] for k in before}

    weights = dict(alpha=0.3, lambda1=2.0, lambda2=0.7, gamma=0.1)
    full = delta(_sgd_cfg(**weights))
    without = delta(_sgd_cfg(**{**weights, term: 0.0}))
    alone = delta(_sgd_cfg(**{k: (v if k == term else 0.0) for k, v in weights.items()}))
    moved = False
    for k in full:
        scale = max(1.0, np.abs(full[k]).max())
        assert np.abs(full[k] - without[k] - alone[k]).max() <= 1e-10 * scale
        moved |= bool(np.abs(alone[k]).max() > 0)
    assert moved


@pytest.mark.parametrize("term", ["delta1", "delta2"])
def test_each_m_step_weight_owns_exactly_its_term(data, term):
    cb, pb = data["coarse"].subset(np.arange(4)), data["part"].subset(np.arange(2))

    def delta(cfg):
        b = _bundle()
        before = _snapshot(b.part)
        _, op, ok = _opts(b, cfg)
        m_step(cb, pb, b, cfg, op, ok)
        after = _snapshot(b.part)
        return {k: after[k] - before[k] for k in before}

    weights = dict(delta1=0.4, delta2=1.5)
    full = delta(_sgd_cfg(**weights))
    without = delta(_sgd_cfg(**{**weights, term: 0.0}))
    alone = delta(_sgd_cfg(**{k: (v if k == term else 0.0) for k, v in weights.items()}))
    for k in full:
        assert np.abs(full[k] - without[k] - alone[k]).max() <= 1e-10 * max(1.0, np.abs(full[k]).max())


def test_pseudo_labels_are_stop_gradient(data):
    cfg = EMConfig()
    a, b = _bundle(), _bundle()
    cb = data["coarse"]
    for p in b.posterior.parameters():
        p.data = p.data + 1e-9
    qa = mode(posterior_forward(cb.images, *coarse_inputs(cb), a.posterior))
    qb = mode(posterior_forward(cb.images, *coarse_inputs(cb), b.posterior))
    assert np.array_equal(qa, qb) and qa.min() >= 0 and qa.max() <= 5
    for bundle in (a, b):
        _, op, ok = _opts(bundle, cfg)
        m_step(cb, data["part"], bundle, cfg, op, ok)
    assert _same(_snapshot(a.part), _snapshot(b.part))
    assert _same(_snapshot(a.keypoint), _snapshot(b.keypoint))


def _entropy(b, batch):
    q = posterior_forward(batch.images, *coarse_inputs(batch), b.posterior).data
    return float(-(q * np.log(np.maximum(q, 1e-12))).sum(axis=1).mean())


def test_entropy_only_e_step_flattens_the_posterior(data):
    # minimising gamma * sum q log q maximises the entropy, so the only
    # fixed point is the uniform posterior
    cfg = EMConfig(alpha=0.0, lambda1=0.0, lambda2=0.0, gamma=1.0, lr_posterior=1e-4, weight_decay=0.0)
    b = _bundle()
    oq = _opts(b, cfg)[0]
    batch = data["coarse"]
    ent = [_entropy(b, batch)]
    for _ in range(50):
        e_step(batch, b, cfg, oq)
        ent.append(_entropy(b, batch))
    assert all(y > x for x, y in zip(ent, ent[1:]))
    assert np.log(6) - ent[-1] < np.log(6) - ent[0]


def test_full_e_step_loss_decreases_on_a_fixed_batch(data):
    cfg = EMConfig(lr_posterior=1e-3)
    b = _bundle()
    oq = _opts(b, cfg)[0]
    losses = [e_step(data["coarse"], b, cfg, oq)["loss_total"] for _ in range(20)]
    assert np.isfinite(losses).all() and losses[-1] < losses[0]


def test_steps_need_a_bundle(data):
    with pytest.raises(ValueError):
        e_step(data["coarse"], None, EMConfig(), None)
    with pytest.raises(ValueError):
        m_step(data["coarse"], data["part"], None, EMConfig(), None, None)


def _hash(state):
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k]).tobytes())
    return h.hexdigest()


def _tiny_base(**kw):
    base = dict(width=4, finetune_epochs=2, posterior_epochs=2, kp_epochs=1, kp_warmup_epochs=1,
                kp_finetune_epochs=2, multitask_epochs=2, pseudosup_epochs=2, pointsup_epochs=2,
                baseline_optimizer="adam", multitask_lr=1e-3, pseudosup_lr=1e-4, pointsup_lr=1e-3)
    base.update(kw)
    return BaselineConfig(**base)


def test_em_run_is_deterministic_and_records_every_epoch(data):
    cfg = EMConfig(epochs=2, b=4, b_p=2)
    runs = []
    for _ in range(2):
        bundle = init_bundle(data, cfg, _tiny_base())
        hist = train_em(data, bundle, cfg)
        runs.append((_hash(bundle.state()), hist))
    assert runs[0][0] == runs[1][0]
    hist = runs[0][1]
    assert [r["epoch"] for r in hist.records] == [1, 2]
    assert 0 <= hist.best_epoch <= 2
    assert list(hist.records[0]) == list(HISTORY_COLUMNS)
    assert all(np.isfinite(r[c]) for r in hist.records for c in ("loss_kp", "loss_mask", "loss_pseudo", "val_ce"))


def test_em_needs_a_coarse_term(data):
    bundle = _bundle()
    with pytest.raises(ConfigError):
        train_em(data, bundle, EMConfig(use_kp=False, use_mask=False, epochs=1))
    with pytest.raises(ValueError):
        train_em({**data, "coarse": data["coarse"].subset(np.arange(0))}, bundle, EMConfig(epochs=1))


def test_init_part_model_is_the_finetune_model(data):
    base = _tiny_base()
    ft, _ = train_finetune(data, base, seed=0)
    bundle = init_bundle(data, EMConfig(), base)
    assert _same(_snapshot(ft), _snapshot(bundle.part))


def test_finetune_overfits_two_samples(data):
    two = {"part": data["part"].subset(np.arange(2))}
    base = BaselineConfig(width=16, finetune_epochs=60, finetune_lr=3e-3, b_p=2)
    _, hist = train_finetune(two, base, seed=0)
    assert hist.records[-1]["loss_part"] < 0.01
    assert len(hist.records) == 60


def test_pointsup_label_windows():
    lab = pointsup_labels(np.array([[10, 10, 1], [0, 0, 0]]), 32, 32)
    rows, cols = np.nonzero(lab == 1)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (8, 12, 8, 12)
    assert not (lab == 2).any() and (lab >= 0).sum() == 25
    edge = pointsup_labels(np.array([[0, 31, 1]]), 32, 32)
    assert (edge == 1).sum() == 9


def test_pointsup_overlap_goes_to_nearest_then_lower_id():
    kps = np.array([[10, 10, 1], [10, 13, 1]])
    lab = pointsup_labels(kps, 32, 32)
    for r in range(8, 13):
        for c in range(8, 16):
            d1 = (r - 10) ** 2 + (c - 10) ** 2 if abs(c - 10) <= 2 else np.inf
            d2 = (r - 10) ** 2 + (c - 13) ** 2 if abs(c - 13) <= 2 else np.inf
            assert lab[r, c] == (1 if d1 <= d2 else 2)
    tie = pointsup_labels(np.array([[10, 10, 1], [10, 12, 1]]), 32, 32)
    assert tie[10, 11] == 1


def test_baselines_log_their_terms_and_select_on_validation(data):
    base = _tiny_base()
    _, mt = train_multitask(data, base, seed=0)
    _, ps = train_pointsup(data, base, seed=0)
    _, pseudo = train_pseudosup(data, base, seed=0)
    logged = [(mt, ("loss_part", "loss_kp", "loss_mask")), (ps, ("loss_points", "loss_mask", "loss_part")),
              (pseudo, ("loss_part", "loss_pseudo"))]
    for h, cols in logged:
        assert all(np.isfinite(h.records[0][c]) for c in cols + ("val_miou",))
    for h in (mt, ps, pseudo):
        assert len(h.records) == 2 and h.best_epoch in (1, 2)


def test_baselines_run_without_coarse_data(data):
    only = {"part": data["part"], "val": data["val"]}
    base = _tiny_base()
    _, mt = train_multitask(only, base, seed=0)
    _, pseudo = train_pseudosup(only, base, seed=0)
    assert np.isnan(pseudo.records[0]["loss_pseudo"]) and len(mt.records) == 2
    assert np.isfinite(mt.records[0]["loss_kp"])


def test_pseudosup_members_start_different(data):
    base = _tiny_base()
    a, _ = train_finetune(data, base, seed=0)
    b, _ = train_finetune(data, base, seed=1000)
    assert _hash(_snapshot(a)) != _hash(_snapshot(b))


def test_warm_start_copies_the_finetuned_weights(data):
    base = _tiny_base(warm_start=True, pointsup_epochs=1, pointsup_lr=1e-12)
    ft = build_segnet(3, 6, 4, seed=9)
    net, _ = train_pointsup(data, replace(base, pointsup_lr=0.0), seed=0, finetuned=ft)
    assert _same(_snapshot(ft), _snapshot(net))
