import json
import subprocess
import sys

import pytest

from memformer import cli
from memformer import experiments as EX
from memformer import io
from memformer.tasks import load_batch_csv

TINY = ["--steps", "3", "--runs", "2", "--batch-size", "8"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_list(capsys):
    code, out, _ = run(capsys, "list")
    assert code == 0
    lines = out.strip().splitlines()
    assert [l.split()[0] for l in lines] == list(EX.PRESETS)
    assert all(len(l.split(None, 1)) == 2 for l in lines)


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--no-such-flag"], ["train", "--steps", "x"]])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and "usage" in err


def test_unknown_figure_exit_2(capsys):
    code, _, err = run(capsys, "reproduce", "fig9z")
    assert code == 2 and "fig9z" in err


def test_verify_exit_0(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "--seeds", "5", "--instances", "20", "--json", str(tmp_path / "v.json"))
    assert code == 0
    assert "FAIL" not in out and out.count("PASS") >= 10
    reports = json.loads((tmp_path / "v.json").read_text())
    assert all(r["passed"] for r in reports)


def test_reproduce_writes_csv_svg_json(capsys, tmp_path):
    code, out, _ = run(capsys, "reproduce", "fig1a", "--out-dir", str(tmp_path), "--seed", "3", *TINY)
    assert code == 0 and "fig1a" in out
    text = (tmp_path / "fig1a.csv").read_text()
    assert text.splitlines()[0] == "layer,curve_name,mean_log_loss,stderr"
    curves = io.read_curves_csv(tmp_path / "fig1a.csv")
    assert len(curves) == 3 and all(len(rows) == 4 for rows in curves.values())
    assert (tmp_path / "fig1a.svg").exists()
    meta = json.loads((tmp_path / "fig1a.json").read_text())
    assert {m["config"]["seed"] for m in meta["models"]} == {3}


def test_baseline_dump_tasks(capsys, tmp_path):
    code, out, _ = run(capsys, "baseline", "--method", "nag", "--runs", "2", "--out-dir", str(tmp_path), "--dump-tasks")
    assert code == 0 and out.startswith("nag:")
    assert len(io.read_curves_csv(tmp_path / "nag.csv")["nag"]) == 4
    batch = load_batch_csv(tmp_path / "tasks_run1.csv")
    assert batch.X.shape == (1000, 5, 20)


def test_train_then_eval(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--variant", "memformer_cgd", "--out-dir", str(tmp_path), *TINY)
    assert code == 0 and out.count("run ") == 2
    for f in ("run0.json", "run1_checkpoint.json", "train_curves.csv", "train_curves.svg"):
        assert (tmp_path / f).exists()
    code, out, _ = run(capsys, "eval", str(tmp_path / "run0_checkpoint.json"))
    assert code == 0 and len(out.strip().splitlines()) == 4
    # evaluation on run 0's batch reproduces the recorded losses
    rec = json.loads((tmp_path / "run0.json").read_text())
    printed = [float(l.split()[3]) for l in out.strip().splitlines()]
    assert printed == pytest.approx(rec["eval_layer_loss"], rel=1e-5)


def test_missing_checkpoint_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "eval", str(tmp_path / "nope.json"))
    assert code == 1 and "error" in err


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "memformer.cli", "list"], capture_output=True, text=True)
    assert r.returncode == 0 and "fig6b" in r.stdout
