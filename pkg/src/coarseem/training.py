"""EM training loop, initialisation recipe and baseline trainers.

One EM iteration pairs a coarse batch with a part-labelled batch (the
smaller split cycles), runs the E step on the posterior network, then the M
step on the part and keypoint networks.
"""

from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .losses import loss_ce_parts, loss_kp_l1, loss_kp_squared, loss_mask_binomial, loss_neg_entropy
from .metrics import heatmap_argmax, miou, pck
from .models import (
    ModelBundle,
    keypoint_forward,
    mask_marginalize,
    mask_model_forward,
    mode,
    one_hot,
    part_forward,
    posterior_forward,
)
from .nn import MultiTaskNet, Network, Optimizer, SegNet, build_segnet, build_split_posterior, cosine_lr
from .synthgen import Split

log = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "epoch",
    "lr",
    "loss_total",
    "loss_part",
    "loss_pseudo",
    "loss_kp",
    "loss_mask",
    "loss_entropy",
    "loss_points",
    "val_ce",
    "val_miou",
)


class ConfigError(ValueError):
    pass


@dataclass
class EMConfig:
    alpha: float = 0.01
    lambda1: float = 50.0
    lambda2: float = 1.0
    gamma: float = 0.01
    delta1: float = 0.1
    delta2: float = 100.0
    lr_part: float = 1e-3
    lr_posterior: float = 1e-5
    lr_coarse: float = 1e-8
    b: int = 32
    b_p: int = 4
    epochs: int = 6
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    use_kp: bool = True
    use_mask: bool = True
    update_kp: bool = True
    part_term: str = "ce"
    learned_mask: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha", "lambda1", "lambda2", "gamma", "delta1", "delta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.b < 1 or self.b_p < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.part_term not in ("ce", "l1"):
            raise ConfigError("part_term must be 'ce' or 'l1'")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")


@dataclass
class BaselineConfig:
    """Schedules for the baselines and for the EM initialisation recipe."""

    width: int = 16
    seed: int = 0
    b: int = 32
    b_p: int = 4
    finetune_epochs: int = 60
    finetune_lr: float = 1e-3
    posterior_epochs: int = 60
    posterior_lr: float = 1e-3
    kp_epochs: int = 2
    kp_warmup_epochs: int = 10
    kp_lr: float = 1e-3
    kp_finetune_epochs: int = 20
    kp_finetune_lr: float = 1e-3
    multitask_epochs: int = 6
    multitask_lr: float = 3e-3
    multitask_kp_weight: float = 10.0
    pseudosup_epochs: int = 6
    pseudosup_lr: float = 3e-5
    pointsup_epochs: int = 6
    pointsup_lr: float = 3e-3
    point_weight: float = 0.5
    mask_weight: float = 1.0
    dense_weight: float = 2.0
    baseline_optimizer: str = "adam"
    warm_start: bool = True
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.baseline_optimizer not in ("sgd", "adam"):
            raise ConfigError("baseline_optimizer must be 'sgd' or 'adam'")
        if self.width < 1 or self.b < 1 or self.b_p < 1:
            raise ConfigError("width and batch sizes must be >= 1")


@dataclass
class TrainHistory:
    method: str
    records: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict | None = None
    checkpoint_path: str | None = None

    def add(self, **values) -> None:
        unknown = set(values) - set(HISTORY_COLUMNS)
        if unknown:
            raise KeyError(f"unknown history columns {sorted(unknown)}")
        self.records.append({c: values.get(c, float("nan")) for c in HISTORY_COLUMNS})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for rec in self.records:
                w.writerow([_fmt(rec[c]) for c in HISTORY_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


# ---------------------------------------------------------------------------
# helpers


@contextlib.contextmanager
def frozen(*nets: Network):
    """Hold parameters constant: no gradient is recorded for them."""
    saved = []
    for net in nets:
        if net is None:
            continue
        for p in net.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def _rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(t) for t in tags]])


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


class _Cycler:
    """Endless shuffled mini-batches over a split; reshuffles on exhaustion."""

    def __init__(self, n: int, size: int, seed: int, tag: int):
        self.n, self.size, self.seed, self.tag = n, min(size, n), seed, tag
        self.round = 0
        self._it = iter(())

    def next(self) -> np.ndarray:
        idx = next(self._it, None)
        if idx is None or len(idx) < self.size:
            self._it = _batches(self.n, self.size, _rng(self.seed, self.tag, self.round))
            self.round += 1
            idx = next(self._it)
        return idx


def _optimizer(net, kind, lr, momentum=0.9, weight_decay=0.0) -> Optimizer:
    return Optimizer(net.parameters(), kind=kind, lr=lr, momentum=momentum, weight_decay=weight_decay)


def predict_proba(net, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Part probabilities for a SegNet or the part head of a MultiTaskNet."""
    outs = []
    with no_grad():
        for s in range(0, len(images), batch):
            x = Tensor(images[s : s + batch])
            logits = net(x)
            if isinstance(logits, tuple):
                logits = logits[0]
            outs.append(ad.softmax_channel(logits).data)
    return np.concatenate(outs) if outs else np.zeros((0,))


def evaluate_parts(net, split: Split, num_classes: int) -> tuple[float, float]:
    """(cross-entropy, mIoU) of a part model on a labelled split."""
    probs = predict_proba(net, split.images)
    with no_grad():
        ce = loss_ce_parts(Tensor(probs), split.parts).item()
    return ce, miou(probs.argmax(axis=1), split.parts, num_classes)


def evaluate_keypoints(kp_net: SegNet, split: Split, threshold: float = 0.1) -> float:
    """PCK of the keypoint model fed ground-truth one-hot parts."""
    K = split.K
    preds = []
    with no_grad():
        for s in range(0, len(split), 64):
            y = one_hot(split.parts[s : s + 64], K + 1)
            preds.append(keypoint_forward(Tensor(y), kp_net).data)
    hm = np.concatenate(preds)
    H, W = split.images.shape[2:]
    return pck(heatmap_argmax(hm), split.keypoints[..., :2], split.keypoints[..., 2], threshold, H, W)


def _need(datasets: dict, *names):
    for n in names:
        if n not in datasets or datasets[n] is None or len(datasets[n]) == 0:
            raise ValueError(f"dataset split {n!r} is empty or missing")


def _num_classes(datasets) -> int:
    return datasets["part"].K + 1


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_step(net: SegNet, opt: Optimizer, images, parts, weight: float = 1.0) -> float:
    loss = loss_ce_parts(part_forward(images, net), parts)
    if weight != 1.0:
        loss = ad.scale(loss, weight)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def _select(history: TrainHistory, net: Network, epoch: int, score: float, best: list, lower_is_better: bool):
    better = best[0] is None or (score < best[0] if lower_is_better else score > best[0])
    if better:
        best[0] = score
        history.best_epoch = epoch
        history.best_state = net.state_dict()


def train_finetune(datasets: dict, cfg: BaselineConfig, seed: int | None = None) -> tuple[SegNet, TrainHistory]:
    """Cross-entropy on the part-labelled split only (Adam)."""
    _need(datasets, "part")
    seed = cfg.seed if seed is None else seed
    part, val = datasets["part"], datasets.get("val")
    C = part.K + 1
    net = build_segnet(3, C, cfg.width, seed=[seed, 11])
    opt = _optimizer(net, "adam", cfg.finetune_lr)
    hist = TrainHistory("finetune")
    best = [None]
    for epoch in range(cfg.finetune_epochs):
        losses = []
        for idx in _batches(len(part), cfg.b_p, _rng(seed, 1, epoch)):
            losses.append(finetune_step(net, opt, part.images[idx], part.parts[idx]))
        rec = dict(epoch=epoch + 1, lr=opt.lr, loss_total=np.mean(losses), loss_part=np.mean(losses))
        if val is not None and len(val):
            ce, mi = evaluate_parts(net, val, C)
            rec.update(val_ce=ce, val_miou=mi)
            _select(hist, net, epoch + 1, mi, best, lower_is_better=False)
        hist.add(**rec)
    if hist.best_state is not None:
        net.load_state_dict(hist.best_state)
    return net, hist


# ---------------------------------------------------------------------------
# EM steps


def e_step(batch: Split, bundle: ModelBundle, cfg: EMConfig, opt_q: Optimizer) -> dict:
    """One gradient update of the posterior network; part/keypoint nets stay fixed."""
    if bundle is None or bundle.posterior is None:
        raise ValueError("bundle is not initialised")
    x = batch.images
    with no_grad():
        mu = part_forward(x, bundle.part).data
    with frozen(bundle.part, bundle.keypoint, bundle.mask):
        mu_q = posterior_forward(x, *coarse_inputs(batch, cfg.use_mask, cfg.use_kp), bundle.posterior)
        terms = {}
        total = None

        def add(name, weight, value):
            nonlocal total
            terms[name] = value.item()
            scaled = ad.scale(value, weight)
            total = scaled if total is None else ad.add(total, scaled)

        if cfg.alpha > 0:
            if cfg.part_term == "ce":
                add("loss_part", cfg.alpha, loss_ce_parts(mu_q, mu))
            else:
                add("loss_part", cfg.alpha, ad.mean(ad.sum(ad.abs(ad.sub(mu_q, Tensor(mu))), axes=1)))
        if cfg.use_kp and cfg.lambda1 > 0:
            mu_kp = keypoint_forward(mu_q, bundle.keypoint)
            add("loss_kp", cfg.lambda1, loss_kp_l1(mu_kp, batch.heatmaps, batch.keypoints[..., 2]))
        if cfg.use_mask and cfg.lambda2 > 0:
            if bundle.mask is not None:
                mu_mask = mask_model_forward(mu_q, bundle.mask)
            else:
                mu_mask = mask_marginalize(mu_q)
            add("loss_mask", cfg.lambda2, loss_mask_binomial(mu_mask, batch.masks))
        if cfg.gamma > 0:
            add("loss_entropy", cfg.gamma, loss_neg_entropy(mu_q))
        if total is None:
            return {"loss_total": 0.0}
        opt_q.zero_grad()
        total.backward()
        opt_q.step()
    terms["loss_total"] = total.item()
    return terms


def m_step(
    batch: Split,
    batch_part: Split,
    bundle: ModelBundle,
    cfg: EMConfig,
    opt_part: Optimizer,
    opt_kp: Optimizer | None,
    opt_mask: Optimizer | None = None,
) -> dict:
    """Update the part model on labels + posterior modes, then the coarse models."""
    if bundle is None or bundle.posterior is None:
        raise ValueError("bundle is not initialised")
    with no_grad():
        pseudo = mode(posterior_forward(batch.images, *coarse_inputs(batch, cfg.use_mask, cfg.use_kp), bundle.posterior))
    terms = {}
    C = bundle.K + 1

    loss = ad.scale(loss_ce_parts(part_forward(batch_part.images, bundle.part), batch_part.parts), cfg.delta1)
    terms["loss_part"] = loss.item()
    if cfg.delta2 > 0:
        pl = loss_ce_parts(part_forward(batch.images, bundle.part), pseudo)
        terms["loss_pseudo"] = pl.item()
        loss = ad.add(loss, ad.scale(pl, cfg.delta2))
    opt_part.zero_grad()
    loss.backward()
    opt_part.step()
    terms["loss_total"] = loss.item()

    y_hard = one_hot(pseudo, C)
    if cfg.use_kp and cfg.update_kp and opt_kp is not None:
        kl = loss_kp_l1(keypoint_forward(y_hard, bundle.keypoint), batch.heatmaps, batch.keypoints[..., 2])
        opt_kp.zero_grad()
        kl.backward()
        opt_kp.step()
        terms["loss_kp"] = kl.item()
    if bundle.mask is not None and cfg.use_mask and opt_mask is not None:
        ml = loss_mask_binomial(mask_model_forward(y_hard, bundle.mask), batch.masks)
        opt_mask.zero_grad()
        ml.backward()
        opt_mask.step()
        terms["loss_mask"] = ml.item()
    return terms


# ---------------------------------------------------------------------------
# initialisation


def coarse_inputs(split: Split, use_mask: bool = True, use_kp: bool = True):
    """Mask and heatmaps for the posterior, blanked for label types that are unavailable."""
    mask = split.masks if use_mask else np.zeros(split.masks.shape)
    heatmaps = split.heatmaps if use_kp else np.zeros(split.heatmaps.shape)
    return mask, heatmaps


def train_posterior(datasets: dict, cfg: BaselineConfig, seed: int, use_mask: bool = True, use_kp: bool = True):
    """Supervised posterior on the part-labelled split: (image, mask, heatmaps) -> parts.

    Keeps the epoch with the lowest validation cross-entropy.
    """
    _need(datasets, "part")
    part, val = datasets["part"], datasets.get("val")
    C = part.K + 1
    net = build_split_posterior(3, C, C, cfg.width, seed=[seed, 12])
    opt = _optimizer(net, "adam", cfg.posterior_lr)
    best, best_state = None, None
    for epoch in range(cfg.posterior_epochs):
        for idx in _batches(len(part), cfg.b_p, _rng(seed, 2, epoch)):
            batch = part.subset(idx)
            probs = posterior_forward(batch.images, *coarse_inputs(batch, use_mask, use_kp), net)
            loss = loss_ce_parts(probs, batch.parts)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if val is not None and len(val):
            with no_grad():
                probs = posterior_forward(val.images, *coarse_inputs(val, use_mask, use_kp), net)
                ce = loss_ce_parts(probs, val.parts).item()
            if best is None or ce < best:
                best, best_state = ce, net.state_dict()
    if best_state is not None:
        net.load_state_dict(best_state)
    return net


# Heatmaps are almost entirely zero.  Starting the sigmoid near the mean
# target, and warming up with squared error, keeps the l1 objective from
# driving every unit dead before the peaks are found (l1's per-pixel median
# is 0 until features can isolate the peak pixels).
KP_OUTPUT_BIAS = -4.6


def build_keypoint_net(K: int, width: int, seed) -> SegNet:
    net = build_segnet(K + 1, K, width, seed=seed)
    net.parameters()[-1].data[:] = KP_OUTPUT_BIAS
    return net


def train_keypoint_model(datasets: dict, cfg: BaselineConfig, seed: int, part_net: SegNet | None = None):
    """Two stages: predicted parts of the coarse split, then ground-truth parts.

    The first ``kp_warmup_epochs`` epochs of each stage use squared error,
    the rest l1.
    """
    _need(datasets, "part")
    part = datasets["part"]
    K = part.K
    net = build_keypoint_net(K, cfg.width, [seed, 13])
    stages = []
    coarse = datasets.get("coarse")
    if part_net is not None and coarse is not None and len(coarse) and cfg.kp_epochs > 0:
        y_pred = predict_proba(part_net, coarse.images).argmax(axis=1)
        stages.append((coarse, y_pred, cfg.kp_epochs, cfg.b, cfg.kp_lr, 3))
    stages.append((part, part.parts, cfg.kp_finetune_epochs, cfg.b_p, cfg.kp_finetune_lr, 4))
    for split, labels, epochs, bs, lr, tag in stages:
        opt = _optimizer(net, "adam", lr)
        for epoch in range(epochs):
            loss_fn = loss_kp_squared if epoch < cfg.kp_warmup_epochs else loss_kp_l1
            for idx in _batches(len(split), bs, _rng(seed, tag, epoch)):
                loss = loss_fn(keypoint_forward(one_hot(labels[idx], K + 1), net), split.heatmaps[idx],
                               split.keypoints[idx, :, 2])
                opt.zero_grad()
                loss.backward()
                opt.step()
    return net


def train_mask_model(datasets: dict, cfg: BaselineConfig, seed: int) -> SegNet:
    part = datasets["part"]
    K = part.K
    net = build_segnet(K + 1, 1, cfg.width, seed=[seed, 14])
    opt = _optimizer(net, "adam", cfg.kp_finetune_lr * 10)
    for epoch in range(cfg.kp_finetune_epochs):
        for idx in _batches(len(part), cfg.b_p, _rng(seed, 5, epoch)):
            loss = loss_mask_binomial(mask_model_forward(one_hot(part.parts[idx], K + 1), net), part.masks[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return net


def init_bundle(
    datasets: dict,
    cfg: EMConfig,
    base: BaselineConfig | None = None,
    finetuned: SegNet | None = None,
    keypoint: SegNet | None = None,
) -> ModelBundle:
    """Fine-tuned part model, supervised posterior, two-stage keypoint model.

    ``finetuned`` and ``keypoint`` let callers share those stages between
    EM variants; both are copied, never mutated.  The posterior only sees
    the coarse label types the config enables.
    """
    _need(datasets, "part")
    base = base or BaselineConfig(seed=cfg.seed)
    seed = cfg.seed
    K = datasets["part"].K
    if finetuned is None:
        finetuned, _ = train_finetune(datasets, base, seed=seed)
    part_net = build_segnet(3, K + 1, base.width, seed=[seed, 11])
    part_net.load_state_dict(finetuned.state_dict())
    posterior = train_posterior(datasets, base, seed, use_mask=cfg.use_mask, use_kp=cfg.use_kp)
    if keypoint is None:
        keypoint = train_keypoint_model(datasets, base, seed, part_net)
    else:
        shared = keypoint
        keypoint = build_keypoint_net(K, base.width, [seed, 13])
        keypoint.load_state_dict(shared.state_dict())
    mask = train_mask_model(datasets, base, seed) if cfg.learned_mask else None
    return ModelBundle(part=part_net, posterior=posterior, keypoint=keypoint, mask=mask)


# ---------------------------------------------------------------------------
# EM


def train_em(datasets: dict, bundle: ModelBundle, cfg: EMConfig) -> TrainHistory:
    """Alternate E and M steps; keep the part model with lowest validation CE."""
    _need(datasets, "part", "coarse")
    if not (cfg.use_kp or cfg.use_mask):
        raise ConfigError("EM needs at least one coarse supervision term")
    part, coarse, val = datasets["part"], datasets["coarse"], datasets.get("val")
    C = part.K + 1
    kind = cfg.optimizer
    opt_q = _optimizer(bundle.posterior, kind, cfg.lr_posterior, cfg.momentum, cfg.weight_decay)
    opt_part = _optimizer(bundle.part, kind, cfg.lr_part, cfg.momentum, cfg.weight_decay)
    opt_kp = _optimizer(bundle.keypoint, kind, cfg.lr_coarse, cfg.momentum, cfg.weight_decay)
    opt_mask = (
        _optimizer(bundle.mask, kind, cfg.lr_coarse, cfg.momentum, cfg.weight_decay) if bundle.mask is not None else None
    )
    part_cycle = _Cycler(len(part), cfg.b_p, cfg.seed, 7)
    hist = TrainHistory("em")
    best = [None]
    best_bundle = None
    if val is not None and len(val):
        ce0, _ = evaluate_parts(bundle.part, val, C)
        best[0], best_bundle, hist.best_epoch = ce0, bundle.state(), 0
    for epoch in range(cfg.epochs):
        acc: dict[str, list] = {}
        for idx in _batches(len(coarse), cfg.b, _rng(cfg.seed, 6, epoch)):
            cb = coarse.subset(idx)
            pb = part.subset(part_cycle.next())
            e_terms = e_step(cb, bundle, cfg, opt_q)
            m_terms = m_step(cb, pb, bundle, cfg, opt_part, opt_kp, opt_mask)
            for k, v in m_terms.items():
                acc.setdefault("m_" + k, []).append(v)
            for k, v in e_terms.items():
                acc.setdefault("e_" + k, []).append(v)
        rec = dict(
            epoch=epoch + 1,
            lr=cfg.lr_part,
            loss_total=_avg(acc, "e_loss_total") + _avg(acc, "m_loss_total"),
            loss_part=_avg(acc, "m_loss_part"),
            loss_pseudo=_avg(acc, "m_loss_pseudo"),
            loss_kp=_avg(acc, "e_loss_kp"),
            loss_mask=_avg(acc, "e_loss_mask"),
            loss_entropy=_avg(acc, "e_loss_entropy"),
        )
        if val is not None and len(val):
            ce, mi = evaluate_parts(bundle.part, val, C)
            rec.update(val_ce=ce, val_miou=mi)
            if ce < best[0]:
                best[0], best_bundle, hist.best_epoch = ce, bundle.state(), epoch + 1
        hist.add(**rec)
        log.info("em epoch %d: %s", epoch + 1, rec)
    if best_bundle is not None:
        bundle.load_state(best_bundle)
    hist.best_state = bundle.state()
    return hist


def _avg(acc, key) -> float:
    v = acc.get(key)
    return float(np.mean(v)) if v else float("nan")


# ---------------------------------------------------------------------------
# baselines using coarse labels


def _warm_start(net: Network, datasets: dict, cfg: BaselineConfig, seed: int, finetuned: SegNet | None) -> None:
    """Copy a fine-tuned part model into the matching parameters of ``net``."""
    if not cfg.warm_start:
        return
    if finetuned is None:
        finetuned, _ = train_finetune(datasets, cfg, seed=seed)
    for k, v in finetuned.state_dict().items():
        if k not in net.params or net.params[k].shape != v.shape:
            raise ValueError(f"cannot warm-start parameter {k}")
        net.params[k].data = v.copy()


def train_multitask(
    datasets: dict, cfg: BaselineConfig, seed: int | None = None, finetuned: SegNet | None = None
) -> tuple[MultiTaskNet, TrainHistory]:
    """Shared encoder, part + keypoint decoders, mask loss on the part marginal.

    With ``cfg.warm_start`` the encoder and part decoder start from a
    fine-tuned part model (``finetuned``, trained here if not given).
    """
    _need(datasets, "part")
    seed = cfg.seed if seed is None else seed
    part, val = datasets["part"], datasets.get("val")
    coarse = datasets.get("coarse")
    K = part.K
    net = MultiTaskNet(3, K + 1, K, cfg.width, seed=[seed, 21])
    list(net.kp_decoder.params.values())[-1].data[:] = KP_OUTPUT_BIAS
    _warm_start(net, datasets, cfg, seed, finetuned)
    opt = _optimizer(net, cfg.baseline_optimizer, cfg.multitask_lr, cfg.momentum, cfg.weight_decay)
    part_cycle = _Cycler(len(part), cfg.b_p, seed, 8)
    have_coarse = coarse is not None and len(coarse) > 0
    steps_per_epoch = -(-len(coarse) // cfg.b) if have_coarse else -(-len(part) // cfg.b_p)
    hist = TrainHistory("multitask")
    best = [None]
    for epoch in range(cfg.multitask_epochs):
        opt.lr = cosine_lr(epoch, cfg.multitask_epochs, cfg.multitask_lr)
        acc: dict[str, list] = {}
        coarse_batches = _batches(len(coarse), cfg.b, _rng(seed, 9, epoch)) if have_coarse else None
        for _ in range(steps_per_epoch):
            pb = part.subset(part_cycle.next())
            logits, kp_logits = net(Tensor(pb.images))
            probs = ad.softmax_channel(logits)
            lp = loss_ce_parts(probs, pb.parts)
            lk = loss_kp_l1(ad.sigmoid(kp_logits), pb.heatmaps, pb.keypoints[..., 2])
            lm = loss_mask_binomial(mask_marginalize(probs), pb.masks)
            if coarse_batches is not None:
                cb = coarse.subset(next(coarse_batches))
                c_logits, c_kp = net(Tensor(cb.images))
                lk = ad.add(lk, loss_kp_l1(ad.sigmoid(c_kp), cb.heatmaps, cb.keypoints[..., 2]))
                lm = ad.add(lm, loss_mask_binomial(mask_marginalize(ad.softmax_channel(c_logits)), cb.masks))
            loss = ad.add(ad.add(lp, ad.scale(lk, cfg.multitask_kp_weight)), lm)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in (("loss_total", loss), ("loss_part", lp), ("loss_kp", lk), ("loss_mask", lm)):
                acc.setdefault(k, []).append(v.item())
        rec = dict(epoch=epoch + 1, lr=opt.lr, **{k: float(np.mean(v)) for k, v in acc.items()})
        if val is not None and len(val):
            ce, mi = evaluate_parts(net, val, K + 1)
            rec.update(val_ce=ce, val_miou=mi)
            _select(hist, net, epoch + 1, mi, best, lower_is_better=False)
        hist.add(**rec)
    if hist.best_state is not None:
        net.load_state_dict(hist.best_state)
    return net, hist


def train_pseudosup(
    datasets: dict,
    cfg: BaselineConfig,
    seed: int | None = None,
    finetuned: tuple[SegNet, SegNet] | None = None,
) -> tuple[SegNet, TrainHistory]:
    """Two differently seeded part models cross-train on each other's hard labels."""
    _need(datasets, "part")
    seed = cfg.seed if seed is None else seed
    part, val = datasets["part"], datasets.get("val")
    coarse = datasets.get("coarse")
    C = part.K + 1
    if finetuned is None:
        finetuned = (train_finetune(datasets, cfg, seed=seed)[0], train_finetune(datasets, cfg, seed=seed + 1000)[0])
    nets = []
    for i, src in enumerate(finetuned):
        n = build_segnet(3, C, cfg.width, seed=[seed, 31 + i])
        n.load_state_dict(src.state_dict())
        nets.append(n)
    opts = [_optimizer(n, cfg.baseline_optimizer, cfg.pseudosup_lr, cfg.momentum, cfg.weight_decay) for n in nets]
    part_cycle = _Cycler(len(part), cfg.b_p, seed, 10)
    have_coarse = coarse is not None and len(coarse) > 0
    steps = -(-len(coarse) // cfg.b) if have_coarse else -(-len(part) // cfg.b_p)
    hist = TrainHistory("pseudosup")
    best = [None]
    best_net = [None]
    for epoch in range(cfg.pseudosup_epochs):
        lr = cosine_lr(epoch, cfg.pseudosup_epochs, cfg.pseudosup_lr)
        for o in opts:
            o.lr = lr
        coarse_batches = _batches(len(coarse), cfg.b, _rng(seed, 11, epoch)) if have_coarse else None
        acc: dict[str, list] = {}
        for _ in range(steps):
            pb = part.subset(part_cycle.next())
            cb = coarse.subset(next(coarse_batches)) if coarse_batches is not None else None
            pseudo = None
            if cb is not None:
                # both label sets come from the pre-update networks
                pseudo = [mode(predict_proba(n, cb.images)) for n in nets]
            for i, (n, o) in enumerate(zip(nets, opts)):
                loss = loss_ce_parts(part_forward(pb.images, n), pb.parts)
                acc.setdefault("loss_part", []).append(loss.item())
                if pseudo is not None:
                    lp = loss_ce_parts(part_forward(cb.images, n), pseudo[1 - i])
                    acc.setdefault("loss_pseudo", []).append(lp.item())
                    loss = ad.add(loss, lp)
                o.zero_grad()
                loss.backward()
                o.step()
                acc.setdefault("loss_total", []).append(loss.item())
        rec = dict(epoch=epoch + 1, lr=lr, **{k: float(np.mean(v)) for k, v in acc.items()})
        if val is not None and len(val):
            scores = [evaluate_parts(n, val, C) for n in nets]
            j = int(np.argmax([s[1] for s in scores]))
            rec.update(val_ce=scores[j][0], val_miou=scores[j][1])
            if best[0] is None or scores[j][1] > best[0]:
                best[0], best_net[0], hist.best_epoch = scores[j][1], nets[j].state_dict(), epoch + 1
        hist.add(**rec)
    out = nets[0]
    if best_net[0] is not None:
        out.load_state_dict(best_net[0])
    hist.best_state = out.state_dict()
    return out, hist


def pointsup_labels(keypoints: np.ndarray, H: int, W: int, window: int = 5) -> np.ndarray:
    """Sparse part labels from keypoints: a window x window square per visible keypoint.

    Returns an H x W int map with -1 for unlabelled pixels.  Overlaps go to the
    nearest keypoint (squared Euclidean), ties to the lower part id.
    """
    keypoints = np.asarray(keypoints)
    half = window // 2
    labels = np.full((H, W), -1, dtype=np.int64)
    best_d = np.full((H, W), np.inf)
    rows, cols = np.indices((H, W))
    for k, (r, c, vis) in enumerate(keypoints):
        if not vis:
            continue
        inside = (np.abs(rows - r) <= half) & (np.abs(cols - c) <= half)
        d = (rows - r) ** 2 + (cols - c) ** 2
        take = inside & (d < best_d)  # strict: earlier (lower) part id wins ties
        labels[take] = k + 1
        best_d[take] = d[take]
    return labels


def train_pointsup(
    datasets: dict, cfg: BaselineConfig, seed: int | None = None, finetuned: SegNet | None = None
) -> tuple[SegNet, TrainHistory]:
    """CE on dilated keypoint labels + mask-marginal CE + dense CE where parts exist."""
    _need(datasets, "part")
    seed = cfg.seed if seed is None else seed
    part, val = datasets["part"], datasets.get("val")
    coarse = datasets.get("coarse")
    K = part.K
    H, W = part.images.shape[2:]
    net = build_segnet(3, K + 1, cfg.width, seed=[seed, 41])
    _warm_start(net, datasets, cfg, seed, finetuned)
    opt = _optimizer(net, cfg.baseline_optimizer, cfg.pointsup_lr, cfg.momentum, cfg.weight_decay)
    have_coarse = coarse is not None and len(coarse) > 0
    if have_coarse:
        point_maps = np.stack([pointsup_labels(k, H, W) for k in coarse.keypoints])
    part_cycle = _Cycler(len(part), cfg.b_p, seed, 12)
    steps = -(-len(coarse) // cfg.b) if have_coarse else -(-len(part) // cfg.b_p)
    hist = TrainHistory("pointsup")
    best = [None]
    for epoch in range(cfg.pointsup_epochs):
        opt.lr = cosine_lr(epoch, cfg.pointsup_epochs, cfg.pointsup_lr)
        coarse_batches = _batches(len(coarse), cfg.b, _rng(seed, 13, epoch)) if have_coarse else None
        acc: dict[str, list] = {}
        for _ in range(steps):
            pb = part.subset(part_cycle.next())
            loss = ad.scale(loss_ce_parts(part_forward(pb.images, net), pb.parts), cfg.dense_weight)
            acc.setdefault("loss_part", []).append(loss.item())
            if coarse_batches is not None:
                idx = next(coarse_batches)
                cb = coarse.subset(idx)
                probs = part_forward(cb.images, net)
                pts = point_maps[idx]
                lpt = loss_ce_parts(probs, np.maximum(pts, 0), weights=(pts >= 0).astype(np.float64))
                lm = loss_mask_binomial(mask_marginalize(probs), cb.masks)
                acc.setdefault("loss_points", []).append(lpt.item())
                acc.setdefault("loss_mask", []).append(lm.item())
                loss = ad.add(loss, ad.add(ad.scale(lpt, cfg.point_weight), ad.scale(lm, cfg.mask_weight)))
            opt.zero_grad()
            loss.backward()
            opt.step()
            acc.setdefault("loss_total", []).append(loss.item())
        rec = dict(epoch=epoch + 1, lr=opt.lr, **{k: float(np.mean(v)) for k, v in acc.items()})
        if val is not None and len(val):
            ce, mi = evaluate_parts(net, val, K + 1)
            rec.update(val_ce=ce, val_miou=mi)
            _select(hist, net, epoch + 1, mi, best, lower_is_better=False)
        hist.add(**rec)
    if hist.best_state is not None:
        net.load_state_dict(hist.best_state)
    return net, hist


def config_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def config_to_dict(obj) -> dict:
    return asdict(obj)
