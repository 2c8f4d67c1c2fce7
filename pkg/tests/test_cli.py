import csv
import json
import subprocess
import sys

import pytest

from slalab.cli import EXIT_MISMATCH, EXIT_RUNTIME, EXIT_USAGE, main, ppc_from_dict, ppc_to_dict
from slalab.data import import_task

SPEC = {"n_source_per_class": 40, "n_unlabeled_per_class": 40, "n_test_per_class": 20}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(SPEC))
    assert main(["gen-task", "--spec", str(d / "spec.json"), "--seed", "1",
                 "--out", str(d / "task.json")]) == 0
    return d


@pytest.fixture(scope="module")
def sla_run(workdir):
    out = workdir / "sla"
    assert main(["train", "--task", str(workdir / "task.json"), "--mode", "sla", "--warmup",
                 "100", "--interval", "100", "--iters", "300", "--seed", "2",
                 "--out", str(out)]) == 0
    return out


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_task_file(workdir):
    task = import_task(workdir / "task.json")
    assert task.seed == 1 and task.n_shot == 3 and len(task.source_y) == 200


def test_train_artifacts(sla_run):
    names = {p.name for p in sla_run.iterdir()}
    assert {"metrics.csv", "kl.csv", "refresh.csv", "summary.json", "model.json",
            "ppc.json"} <= names
    metrics = _csv(sla_run / "metrics.csv")
    assert [int(r["step"]) for r in metrics] == [100, 200, 300]
    assert len(_csv(sla_run / "kl.csv")) == 300
    assert [int(r["step"]) for r in _csv(sla_run / "refresh.csv")] == [101, 201]
    summary = json.loads((sla_run / "summary.json").read_text())
    assert summary["mode"] == "sla" and summary["config"]["sla"]["warmup"] == 100
    assert summary["final"]["step"] == 300 and summary["checkpoint"] == "model.json"
    assert summary["audit_accesses"] == []


def test_ppc_json_round_trip(sla_run):
    doc = json.loads((sla_run / "ppc.json").read_text())
    assert ppc_to_dict(ppc_from_dict(doc)) == doc


def test_evaluate_and_audit(workdir, sla_run, capsys):
    capsys.readouterr()
    assert main(["evaluate", "--task", str(workdir / "task.json"),
                 "--model", str(sla_run / "model.json")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("true_class,worst,pred_0") and len(out) == 6
    assert main(["audit-centers", "--task", str(workdir / "task.json"),
                 "--model", str(sla_run / "model.json"), "--out",
                 str(workdir / "audit.csv")]) == 0
    rows = _csv(workdir / "audit.csv")
    assert rows[-1]["class"] == "mean" and len(rows) == 6


def test_kl_trace_matches_train_output(sla_run, workdir):
    assert main(["kl-trace", "--run", str(sla_run), "--out", str(workdir / "kl2.csv")]) == 0
    assert (workdir / "kl2.csv").read_bytes() == (sla_run / "kl.csv").read_bytes()


def test_label_summary(workdir, sla_run):
    assert main(["label-summary", "--task", str(workdir / "task.json"), "--run", str(sla_run),
                 "--out", str(workdir / "labels.csv")]) == 0
    rows = _csv(workdir / "labels.csv")
    assert len(rows) == 5 and "l1_adapted_to_ideal" in rows[0]


def test_ideal_mode_writes_oracle(workdir):
    out = workdir / "ideal"
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"oracle_iters": 100}))
    assert main(["train", "--task", str(workdir / "task.json"), "--mode", "ideal", "--iters",
                 "100", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "oracle.json").exists() and not (out / "ppc.json").exists()


def test_usage_errors(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--task", "x", "--mode", "bogus", "--out", "y"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    assert main(["train", "--task", str(workdir / "missing.json"), "--out", "y"]) == EXIT_USAGE
    assert main(["train", "--task", str(workdir / "task.json"), "--mode", "sla", "--warmup",
                 "500", "--iters", "100", "--out", str(workdir / "z")]) == EXIT_USAGE
    st_run = workdir / "st"
    assert main(["train", "--task", str(workdir / "task.json"), "--iters", "50",
                 "--out", str(st_run)]) == 0
    assert main(["label-summary", "--task", str(workdir / "task.json"),
                 "--run", str(st_run)]) == EXIT_USAGE


def test_runtime_errors(workdir):
    doc = json.loads((workdir / "task.json").read_text())
    doc["checksum"] = "0" * 64
    (workdir / "corrupt.json").write_text(json.dumps(doc))
    assert main(["train", "--task", str(workdir / "corrupt.json"),
                 "--out", str(workdir / "c")]) == EXIT_RUNTIME
    assert main(["train", "--task", str(workdir / "task.json"), "--lr", "1e308", "--iters", "50",
                 "--out", str(workdir / "blowup")]) == EXIT_RUNTIME


def _grid(workdir, name, configs, seeds=(0,)):
    doc = {"spec": SPEC, "task_seeds": list(seeds), "configs": configs}
    p = workdir / name
    p.write_text(json.dumps(doc))
    return p


def test_sweep_check_expected(workdir):
    grid = _grid(workdir, "g.json", [{"name": "st", "mode": "st", "total_iters": 100}])
    out = workdir / "sweep.csv"
    assert main(["sweep", "--grid", str(grid), "--out", str(out), "--runs-out",
                 str(workdir / "runs.csv")]) == 0
    row = _csv(out)[0]
    mean = float(row["test_mean"])
    good = {"me": {"tolerance": 0.01, "config_means": {"st": mean}}}
    bad = {"me": {"tolerance": 0.01, "config_means": {"st": mean + 0.05}}}
    (workdir / "good.json").write_text(json.dumps(good))
    (workdir / "bad.json").write_text(json.dumps(bad))
    args = ["sweep", "--grid", str(grid), "--out", str(out), "--key", "me", "--check-expected"]
    assert main(args + [str(workdir / "good.json")]) == 0
    assert main(args + [str(workdir / "bad.json")]) == EXIT_MISMATCH
    assert main(["sweep", "--grid", str(grid), "--check-expected", str(workdir / "good.json"),
                 "--key", "nope"]) == EXIT_USAGE


def test_console_script_entry_point(workdir):
    r = subprocess.run([sys.executable, "-m", "slalab.cli", "evaluate", "--task",
                        str(workdir / "task.json")], capture_output=True, text=True)
    assert r.returncode == EXIT_USAGE and "--model" in r.stderr
