"""Command line: gen, train, eval, gradcheck, oracle, report and bench.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 format error, 5 check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import oracles
from .config import RunConfig, default_config_path, dumps, load_config
from .gradcheck import TOLERANCE, run_gradcheck
from .nn import CheckpointFormatError
from .runs import (
    EVAL_SPLITS,
    METHODS,
    ManifestError,
    RunManifest,
    _now,
    collect_runs,
    evaluate_model,
    format_report,
    load_model,
    report_rows,
    run_benchmark,
    write_eval_csv,
    write_report_csv,
    write_run,
)
from .synthgen import SPLITS, DataFormatError, corpus_hash, load_dataset, load_split, make_dataset
from .training import ConfigError, EMConfig, _fmt

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FORMAT, EXIT_CHECK = 0, 2, 3, 4, 5

log = logging.getLogger("coarseem")


class CheckFailed(Exception):
    pass


def _config(args) -> RunConfig:
    path = args.config or default_config_path()
    cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    d = cfg.data
    started = _now()
    info = make_dataset(d.gen, d.n_part, d.n_coarse, d.n_val, d.n_test, out_dir=out)
    man = RunManifest(command="gen", config_path=str(args.config or default_config_path()), config=dumps(cfg),
                      seed=d.gen.seed, started=started, corpus_hash=info["hash"])
    man.finalize(out, [f"{s}/{f}" for s in SPLITS for f in ("manifest.txt", "data.bin")])
    print(info["hash"])
    return EXIT_OK


def cmd_train(args) -> int:
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    if args.method != "em" and (args.no_kp or args.no_mask):
        raise ConfigError("--no-kp / --no-mask are only valid for method em")
    if args.no_kp and args.no_mask:
        raise ConfigError("--no-kp together with --no-mask leaves EM without coarse supervision")
    cfg = _config(args)
    datasets = load_dataset(args.data, sigma=cfg.data.gen.heatmap_sigma)
    man = write_run(args.out, args.method, datasets, cfg, not args.no_kp, not args.no_mask,
                    command="train", config_path=str(args.config or default_config_path()),
                    data_hash=corpus_hash(args.data))
    print(" ".join(f"{s}_miou={man.extra[f'{s}_miou']:.4f}" for s in EVAL_SPLITS if f"{s}_miou" in man.extra))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    split_dir = Path(args.data) / args.split if args.data else Path(args.split)
    split = load_split(split_dir)
    threshold = args.pck_threshold
    if split.parts is None:
        raise ConfigError(f"split {split_dir} carries no part labels")
    res = evaluate_model(model, split, threshold)
    write_eval_csv(res, args.out)
    print(f"{res['miou']:.6f}")
    return EXIT_OK


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed or 0)
    failed = [r for r in results if not r[2]]
    if args.out:
        _write_rows(args.out, ("check", "rel_err", "passed"), [(n, _fmt(e), int(p)) for n, e, p in results])
    for name, err, ok in results:
        log.info("%-32s %.3e %s", name, err, "ok" if ok else "FAIL")
    if failed:
        for name, err, _ in failed:
            print(f"FAIL {name}: relative error {err:.3e} >= {TOLERANCE}", file=sys.stderr)
        if not args.out:
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(("check", "rel_err", "passed"))
            w.writerows([(n, _fmt(e), int(p)) for n, e, p in results])
        raise CheckFailed(f"{len(failed)} gradient checks failed")
    print(f"all {len(results)} gradient checks passed (max rel. err {max(e for _, e, _ in results):.2e})")
    return EXIT_OK


def oracle_rows(n_instances: int, seed: int, cfg: EMConfig, q_per_instance: int = 100):
    """Jensen-bound rows: (instance_id, q kind, elbo, loglik, gap) with gap = loglik - elbo."""
    rows = []
    for i in range(n_instances):
        inst = oracles.random_instance(seed, instance_id=i)
        lj = oracles.all_log_joints(inst, cfg)
        L = oracles._logsumexp(lj)
        post = np.exp(lj - L)
        rows.append((i, "posterior", oracles.elbo(post, inst, cfg, lj), L))
        rng = np.random.default_rng([seed, i, 1])
        for j in range(q_per_instance):
            conc = 0.5 if j % 2 else 5.0
            q = rng.dirichlet(np.full(len(lj), conc)) if j % 2 else post * rng.dirichlet(np.full(len(lj), conc))
            q = q / q.sum()
            rows.append((i, f"random{j}", oracles.elbo(q, inst, cfg, lj), L))
    return rows


def cmd_oracle(args) -> int:
    cfg = _config(args).em
    seed = args.seed or 0
    rows = oracle_rows(args.n_instances, seed, cfg)
    bad = []
    table = []
    for inst_id, kind, e, L in rows:
        gap = L - e
        table.append((inst_id, kind, _fmt(e), _fmt(L), _fmt(gap)))
        if gap < -1e-9 or (kind == "posterior" and abs(gap) >= 1e-9):
            bad.append((inst_id, kind, gap))
    if args.out:
        _write_rows(args.out, ("instance_id", "q", "elbo", "loglik", "gap"), table)
    if bad:
        for inst_id, kind, gap in bad[:20]:
            print(f"VIOLATION instance {inst_id} q={kind}: gap {gap:.3e}", file=sys.stderr)
        raise CheckFailed(f"{len(bad)} bound violations")
    print(f"{args.n_instances} instances, {len(rows)} bound checks passed")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = report_rows(collect_runs(args.run_dirs))
    if args.out:
        write_report_csv(rows, args.out)
    print(format_report(rows))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    seeds = args.seeds if args.seeds else list(cfg.eval.seeds)
    dirs = run_benchmark(cfg, seeds, args.out)
    rows = report_rows(collect_runs(dirs))
    write_report_csv(rows, Path(args.out) / "report.csv")
    print(format_report(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="coarseem", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write the synthetic benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train one method into a run directory")
    t.add_argument("method")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--no-kp", action="store_true", help="em only: drop the keypoint term")
    t.add_argument("--no-mask", action="store_true", help="em only: drop the mask term")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="per-class IoU, mIoU and PCK of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset root; --split is then a split name")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--pck-threshold", type=float, default=0.1)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("oracle", parents=[common], help="exact bound checks on tiny instances")
    o.add_argument("n_instances", type=int, nargs="?", default=50)
    o.add_argument("--config")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("report", parents=[common], help="mean +/- std mIoU table over run directories")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("bench", parents=[common], help="all methods over several seeds, then report")
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", type=int, nargs="*")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = int(os.environ.get("COARSEEM_THREADS", "1"))
    try:
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointFormatError, DataFormatError, ManifestError, json.JSONDecodeError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
