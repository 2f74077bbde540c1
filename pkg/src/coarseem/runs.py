"""Run directories: training entry points, checkpoint evaluation and reports.

A run directory holds ``model.ckpt``, ``history.csv``, ``config.ini``, one
``eval_<split>.csv`` per evaluated split and ``manifest.json``.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .config import RunConfig, dumps
from .metrics import heatmap_argmax, iou_per_class, pck
from .models import ModelBundle
from .nn import CheckpointFormatError, MultiTaskNet, SegNet, load_checkpoint, save_checkpoint
from .synthgen import PART_NAMES, corpus_hash, generate_benchmark, load_dataset, make_dataset
from .training import (
    ConfigError,
    _fmt,
    evaluate_keypoints,
    init_bundle,
    predict_proba,
    train_em,
    train_finetune,
    train_keypoint_model,
    train_multitask,
    train_pointsup,
    train_pseudosup,
)

log = logging.getLogger(__name__)

METHODS = ("em", "finetune", "multitask", "pseudosup", "pointsup")
EVAL_SPLITS = ("val", "test")
MANIFEST = "manifest.json"


class ManifestError(ValueError):
    pass


def method_label(method: str, use_kp: bool = True, use_mask: bool = True) -> str:
    if method != "em":
        return method
    if use_kp and use_mask:
        return "em(kp+mask)"
    return "em(kp-only)" if use_kp else "em(mask-only)"


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str
    config: str
    seed: int
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    hashes: dict[str, str] = field(default_factory=dict)
    corpus_hash: str = ""
    extra: dict = field(default_factory=dict)

    def finalize(self, run_dir, outputs) -> None:
        run_dir = Path(run_dir)
        self.outputs = sorted(outputs)
        self.hashes = {name: file_sha256(run_dir / name) for name in self.outputs}
        self.finished = _now()
        (run_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, run_dir, verify: bool = True) -> "RunManifest":
        run_dir = Path(run_dir)
        data = json.loads((run_dir / MANIFEST).read_text())
        try:
            man = cls(**data)
        except TypeError as exc:
            raise ManifestError(f"{run_dir}: malformed manifest") from exc
        if verify:
            for name, digest in man.hashes.items():
                if file_sha256(run_dir / name) != digest:
                    raise ManifestError(f"{run_dir}: hash mismatch for {name}")
        return man


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# checkpoints of any method


def save_model(path, model, method: str, label: str) -> None:
    meta = {"method": method, "label": label}
    if isinstance(model, ModelBundle):
        model.save(path, meta)
        return
    kind = "multitask" if isinstance(model, MultiTaskNet) else "segnet"
    meta.update(kind=kind, **{k: v for k, v in model.config.items()})
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    """Returns (model, meta); model is a ModelBundle, SegNet or MultiTaskNet."""
    params, meta = load_checkpoint(path)
    kind = meta.get("kind")
    try:
        if kind == "bundle":
            return ModelBundle.load(path), meta
        if kind == "segnet":
            net = SegNet(int(meta["in_channels"]), int(meta["out_channels"]), int(meta["width"]))
        elif kind == "multitask":
            net = MultiTaskNet(int(meta["in_channels"]), int(meta["part_channels"]), int(meta["kp_channels"]),
                               int(meta["width"]))
        else:
            raise CheckpointFormatError(f"{path}: unknown checkpoint kind {kind!r}")
        net.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: {exc}") from exc
    return net, meta


def _part_net(model):
    return model.part if isinstance(model, ModelBundle) else model


def _model_pck(model, split, threshold: float) -> float:
    if isinstance(model, ModelBundle):
        return evaluate_keypoints(model.keypoint, split, threshold)
    if isinstance(model, MultiTaskNet):
        with no_grad():
            hm = np.concatenate([model(Tensor(split.images[s : s + 64]))[1].data for s in range(0, len(split), 64)])
        H, W = split.images.shape[2:]
        return pck(heatmap_argmax(hm), split.keypoints[..., :2], split.keypoints[..., 2], threshold, H, W)
    return float("nan")


def evaluate_model(model, split, threshold: float = 0.1) -> dict:
    """Per-class IoU, mIoU and PCK (keypoint-capable models only) on a labelled split."""
    if split.parts is None:
        raise ValueError("split has no part labels to evaluate against")
    C = split.K + 1
    pred = predict_proba(_part_net(model), split.images).argmax(axis=1)
    ious = iou_per_class(pred, split.parts, C)
    present = ~np.isnan(ious)
    return {
        "iou": ious,
        "miou": float(ious[present].mean()) if present.any() else 1.0,
        "pck": _model_pck(model, split, threshold),
    }


def class_names(C: int) -> list[str]:
    return ["background", *PART_NAMES[: C - 1]]


def write_eval_csv(result: dict, path) -> None:
    names = class_names(len(result["iou"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "iou", "pck"])
        for n, v in zip(names, result["iou"]):
            w.writerow([n, _fmt(v), ""])
        w.writerow(["mean", _fmt(result["miou"]), _fmt(result["pck"])])


def read_eval_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["name", "iou", "pck"] or rows[-1][0] != "mean":
        raise ValueError(f"{path}: not an evaluation CSV")
    return {"miou": float(rows[-1][1]), "pck": float(rows[-1][2]),
            "iou": np.array([float(r[1]) for r in rows[1:-1]])}


# ---------------------------------------------------------------------------
# training runs


@dataclass
class SharedStages:
    """Stages that several runs of one seed can reuse; filled lazily.

    Every stage is a pure function of (datasets, config, seed), so sharing
    only saves time: results match independent runs exactly.
    """

    finetune: tuple | None = None
    finetuned_second: SegNet | None = None
    keypoint: SegNet | None = None

    def finetuned(self, datasets: dict, cfg: RunConfig) -> SegNet:
        if self.finetune is None:
            self.finetune = train_finetune(datasets, cfg.baseline, seed=cfg.baseline.seed)
        return self.finetune[0]


def train_method(method: str, datasets: dict, cfg: RunConfig, use_kp: bool = True, use_mask: bool = True,
                 shared: SharedStages | None = None):
    """Train one method; returns (model, history)."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if method != "em" and not (use_kp and use_mask):
        raise ConfigError("--no-kp / --no-mask apply to method em only")
    if not (use_kp or use_mask):
        raise ConfigError("EM needs at least one coarse supervision term")
    shared = shared or SharedStages()
    base = cfg.baseline
    seed = base.seed
    if method == "finetune":
        shared.finetuned(datasets, cfg)
        return shared.finetune
    if method == "em":
        em_cfg = replace(cfg.em, use_kp=use_kp, use_mask=use_mask)
        ft = shared.finetuned(datasets, cfg)
        if shared.keypoint is None:
            shared.keypoint = train_keypoint_model(datasets, base, seed, ft)
        bundle = init_bundle(datasets, em_cfg, base, finetuned=ft, keypoint=shared.keypoint)
        return bundle, train_em(datasets, bundle, em_cfg)
    if method in ("multitask", "pointsup"):
        ft = shared.finetuned(datasets, cfg) if base.warm_start else None
        trainer = train_multitask if method == "multitask" else train_pointsup
        return trainer(datasets, base, seed=seed, finetuned=ft)
    ft = shared.finetuned(datasets, cfg)
    if shared.finetuned_second is None:
        shared.finetuned_second, _ = train_finetune(datasets, base, seed=seed + 1000)
    return train_pseudosup(datasets, base, seed=seed, finetuned=(ft, shared.finetuned_second))


def write_run(run_dir, method: str, datasets: dict, cfg: RunConfig, use_kp: bool = True, use_mask: bool = True,
              shared: SharedStages | None = None, command: str = "train", config_path: str = "",
              data_hash: str = "") -> RunManifest:
    """Train, save the checkpoint and history, evaluate on val/test, write the manifest."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    label = method_label(method, use_kp, use_mask)
    manifest = RunManifest(command=command, config_path=str(config_path), config=dumps(cfg),
                           seed=cfg.baseline.seed, started=_now(), corpus_hash=data_hash,
                           extra={"method": method, "label": label})
    t0 = time.process_time()
    model, hist = train_method(method, datasets, cfg, use_kp, use_mask, shared)
    outputs = ["model.ckpt", "history.csv", "config.ini"]
    save_model(run_dir / "model.ckpt", model, method, label)
    hist.checkpoint_path = str(run_dir / "model.ckpt")
    hist.write_csv(run_dir / "history.csv")
    (run_dir / "config.ini").write_text(dumps(cfg))
    for split in EVAL_SPLITS:
        if split in datasets and datasets[split] is not None and len(datasets[split]):
            res = evaluate_model(model, datasets[split], cfg.eval.pck_threshold)
            write_eval_csv(res, run_dir / f"eval_{split}.csv")
            outputs.append(f"eval_{split}.csv")
            manifest.extra[f"{split}_miou"] = res["miou"]
    manifest.extra.update(best_epoch=hist.best_epoch, cpu_seconds=round(time.process_time() - t0, 1))
    manifest.finalize(run_dir, outputs)
    log.info("%s seed %d: %s", label, cfg.baseline.seed, {k: manifest.extra.get(f"{k}_miou") for k in EVAL_SPLITS})
    return manifest


# ---------------------------------------------------------------------------
# reports


REPORT_COLUMNS = ("method", "n_runs", *[f"{s}_{stat}" for s in EVAL_SPLITS for stat in ("mean", "std")])


def collect_runs(run_dirs) -> dict[str, list[dict]]:
    """Group evaluation results by method label, preserving first-seen order.

    Raises FileNotFoundError when a run lacks its history or evaluations.
    """
    groups: dict[str, list[dict]] = {}
    for d in run_dirs:
        d = Path(d)
        if not (d / "history.csv").is_file():
            raise FileNotFoundError(f"{d}: missing history.csv")
        man = RunManifest.read(d)
        res = {}
        for split in EVAL_SPLITS:
            p = d / f"eval_{split}.csv"
            if not p.is_file():
                raise FileNotFoundError(f"{d}: missing {p.name}")
            res[split] = read_eval_csv(p)["miou"]
        groups.setdefault(man.extra.get("label", man.extra.get("method", d.name)), []).append(res)
    return groups


def report_rows(groups: dict[str, list[dict]]) -> list[dict]:
    rows = []
    for label, runs in groups.items():
        row = {"method": label, "n_runs": len(runs)}
        for split in EVAL_SPLITS:
            vals = 100.0 * np.array([r[split] for r in runs])
            row[f"{split}_mean"] = float(vals.mean())
            row[f"{split}_std"] = float(vals.std())
        rows.append(row)
    return rows


def write_report_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["method"], r["n_runs"], *[_fmt(r[c]) for c in REPORT_COLUMNS[2:]]])


def format_report(rows: list[dict]) -> str:
    """Aligned text table, mIoU in points as mean +/- std."""
    header = ["method", "runs", *EVAL_SPLITS]
    body = [[r["method"], str(r["n_runs"]),
             *[f"{r[f'{s}_mean']:.2f} +/- {r[f'{s}_std']:.2f}" for s in EVAL_SPLITS]] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(line, widths)).rstrip() for line in [header, *body]]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# multi-seed benchmark

BENCH_RUNS = (
    ("finetune", True, True),
    ("em", True, True),
    ("em", True, False),
    ("em", False, True),
    ("multitask", True, True),
    ("pseudosup", True, True),
    ("pointsup", True, True),
)


def run_name(method: str, use_kp: bool, use_mask: bool) -> str:
    return method_label(method, use_kp, use_mask).replace("(", "_").replace(")", "").replace("+", "_")


def run_benchmark(cfg: RunConfig, seeds, out_root, runs=BENCH_RUNS, write_data: bool = True) -> list[Path]:
    """Every method on freshly generated data per seed; stages shared within a seed.

    Returns the run directories in (seed, method) order.
    """
    out_root = Path(out_root)
    dirs = []
    for seed in seeds:
        scfg = cfg.with_seed(seed)
        seed_dir = out_root / f"seed{seed}"
        d = scfg.data
        if write_data:
            make_dataset(d.gen, d.n_part, d.n_coarse, d.n_val, d.n_test, out_dir=seed_dir / "data")
            datasets = load_dataset(seed_dir / "data", sigma=d.gen.heatmap_sigma)
            data_hash = corpus_hash(seed_dir / "data")
        else:
            datasets = generate_benchmark(d.gen, d.n_part, d.n_coarse, d.n_val, d.n_test)
            data_hash = ""
        shared = SharedStages()
        for method, use_kp, use_mask in runs:
            run_dir = seed_dir / run_name(method, use_kp, use_mask)
            write_run(run_dir, method, datasets, scfg, use_kp, use_mask, shared, command="bench",
                      data_hash=data_hash)
            dirs.append(run_dir)
    return dirs
