import csv
import hashlib

import numpy as np
import pytest

from coarseem import autodiff as ad
from coarseem.autodiff import Tensor
from coarseem.cli import main
from coarseem.config import dumps, write_config
from coarseem.runs import MANIFEST, RunManifest

from conftest import tiny_config


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def data_dir(tmp_path, tiny_ini):
    out = tmp_path / "data"
    assert main(["gen", "--config", str(tiny_ini), "--out", str(out)]) == 0
    return out


def test_gen_is_reproducible_and_writes_a_manifest(tmp_path, tiny_ini, data_dir, capsys):
    first = RunManifest.read(data_dir).corpus_hash
    capsys.readouterr()
    assert main(["gen", "--config", str(tiny_ini), "--out", str(tmp_path / "again")]) == 0
    assert capsys.readouterr().out.strip() == first
    man = RunManifest.read(data_dir)
    assert man.corpus_hash == first and len(man.outputs) == 8


def test_seed_flag_changes_the_corpus(tmp_path, tiny_ini, data_dir, capsys):
    first = RunManifest.read(data_dir).corpus_hash
    capsys.readouterr()
    assert main(["gen", "--config", str(tiny_ini), "--seed", "5", "--out", str(tmp_path / "s5")]) == 0
    assert capsys.readouterr().out.strip() != first


def test_missing_config_key_exits_2_and_names_it(tmp_path, capsys):
    text = dumps(tiny_config())
    bad = tmp_path / "bad.ini"
    bad.write_text("\n".join(line for line in text.splitlines() if not line.startswith("n_coarse")))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "n_coarse" in capsys.readouterr().err


def test_missing_config_file_exits_3(tmp_path):
    assert main(["gen", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "d")]) == 3


def test_default_config_ships_with_the_package(tmp_path):
    from coarseem.config import default_config_path

    assert default_config_path().is_file()


@pytest.mark.parametrize(
    "argv",
    [["em", "--no-kp", "--no-mask"], ["finetune", "--no-kp"], ["nosuchmethod"]],
)
def test_train_argument_errors_exit_2(tmp_path, tiny_ini, data_dir, argv):
    method, *flags = argv
    code = main(["train", method, *flags, "--config", str(tiny_ini), "--data", str(data_dir),
                 "--out", str(tmp_path / "run")])
    assert code == 2


def test_train_writes_one_history_row_per_epoch(tmp_path, tiny_ini, data_dir):
    run = tmp_path / "em"
    assert main(["train", "em", "--no-mask", "--config", str(tiny_ini), "--data", str(data_dir),
                 "--out", str(run)]) == 0
    rows = _rows(run / "history.csv")
    assert len(rows) - 1 == tiny_config().em.epochs
    man = RunManifest.read(run)
    assert man.extra["label"] == "em(kp-only)"
    assert sorted(p.name for p in run.iterdir()) == sorted([*man.outputs, MANIFEST])


def test_training_is_byte_reproducible(tmp_path, tiny_ini, data_dir):
    runs = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["train", "em", "--config", str(tiny_ini), "--data", str(data_dir), "--out", str(run)]) == 0
        runs.append(run)
    for f in ("history.csv", "eval_val.csv", "eval_test.csv", "model.ckpt"):
        assert _sha(runs[0] / f) == _sha(runs[1] / f)


def test_eval_and_its_error_paths(tmp_path, tiny_ini, data_dir, capsys):
    run = tmp_path / "mt"
    assert main(["train", "multitask", "--config", str(tiny_ini), "--data", str(data_dir), "--out", str(run)]) == 0
    capsys.readouterr()
    out = tmp_path / "eval.csv"
    assert main(["eval", str(run / "model.ckpt"), "--data", str(data_dir), "--split", "test", "--out", str(out)]) == 0
    printed = float(capsys.readouterr().out)
    rows = _rows(out)
    assert rows[0] == ["name", "iou", "pck"] and len(rows) == 1 + 6 + 1
    assert rows[-1][0] == "mean" and float(rows[-1][1]) == pytest.approx(printed, abs=1e-6)
    assert 0 <= float(rows[-1][2]) <= 100
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage header\n" + (run / "model.ckpt").read_bytes())
    assert main(["eval", str(bad), "--data", str(data_dir), "--out", str(out)]) == 4
    assert main(["eval", str(tmp_path / "missing.ckpt"), "--data", str(data_dir), "--out", str(out)]) == 3
    assert main(["eval", str(run / "model.ckpt"), "--data", str(data_dir), "--split", "coarse",
                 "--out", str(out)]) == 2


def test_report_orders_methods_and_gives_zero_std_for_one_run(tmp_path, tiny_ini, data_dir, capsys):
    dirs = []
    for method in ("pointsup", "finetune"):
        run = tmp_path / method
        assert main(["train", method, "--config", str(tiny_ini), "--data", str(data_dir), "--out", str(run)]) == 0
        dirs.append(str(run))
    capsys.readouterr()
    out = tmp_path / "report.csv"
    assert main(["report", *dirs, "--out", str(out)]) == 0
    rows = _rows(out)
    assert [r[0] for r in rows[1:]] == ["pointsup", "finetune"]
    std_cols = [i for i, h in enumerate(rows[0]) if h.endswith("_std")]
    assert all(float(r[i]) == 0.0 for r in rows[1:] for i in std_cols)
    (tmp_path / "finetune" / "history.csv").unlink()
    assert main(["report", *dirs]) == 3


def test_tampered_run_is_a_format_error(tmp_path, tiny_ini, data_dir):
    run = tmp_path / "ft"
    assert main(["train", "finetune", "--config", str(tiny_ini), "--data", str(data_dir), "--out", str(run)]) == 0
    with open(run / "eval_test.csv", "a") as fh:
        fh.write("x\n")
    assert main(["report", str(run)]) == 4


def test_gradcheck_passes_and_writes_csv(tmp_path):
    out = tmp_path / "gc.csv"
    assert main(["gradcheck", "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["check", "rel_err", "passed"] and all(r[2] == "1" for r in rows[1:])


def test_corrupted_backward_fails_gradcheck(monkeypatch, capsys):
    def broken_sigmoid(a):
        out = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._from_op(out, (a,), lambda g: (g * out,), "sigmoid")

    monkeypatch.setattr(ad, "sigmoid", broken_sigmoid)
    assert main(["gradcheck"]) == 5
    captured = capsys.readouterr()
    assert "FAIL sigmoid" in captured.err and "check,rel_err,passed" in captured.out


def test_oracle_gap_column(tmp_path):
    out = tmp_path / "oracle.csv"
    assert main(["oracle", "5", "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["instance_id", "q", "elbo", "loglik", "gap"]
    gaps = np.array([float(r[4]) for r in rows[1:]])
    assert len(gaps) == 5 * 101 and gaps.min() >= -1e-9
    post = np.array([float(r[4]) for r in rows[1:] if r[1] == "posterior"])
    assert np.abs(post).max() < 1e-9


def test_bench_writes_report(tmp_path, tiny_ini, capsys):
    cfg = tiny_config()
    write_config(cfg, tiny_ini)
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(tiny_ini), "--out", str(out), "--seeds", "0"]) == 0
    rows = _rows(out / "report.csv")
    assert [r[0] for r in rows[1:]] == ["finetune", "em(kp+mask)", "em(kp-only)", "em(mask-only)",
                                        "multitask", "pseudosup", "pointsup"]
    assert "em(kp+mask)" in capsys.readouterr().out
