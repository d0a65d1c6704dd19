import json

import pytest

from groupdro.cli import main
from groupdro.experiment import (
    Cell,
    ExperimentConfig,
    RunResult,
    run_benchmark,
    select_best,
    summarize_mode,
)

SPEC = {"d_core": 2, "mu_core": 1.0, "sigma": 1.0, "n_total": 200, "p_align": 0.8, "seed": 3}


def experiment(tmp_path, **overrides):
    data = {
        "dataset": SPEC,
        "arch": {"kind": "logistic"},
        "optimizer": {"eta_theta": 0.1, "eta_q": 0.05, "batch_size": 20, "epochs": 3},
        "n_val": 80,
        "n_test": 120,
        "output_dir": str(tmp_path / "out"),
    }
    data.update(overrides)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(data))
    return path


def test_generate_is_byte_identical(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SPEC))
    assert main(["generate", str(spec), "--out", str(tmp_path / "a"), "--n-val", "40", "--n-test", "50"]) == 0
    assert main(["generate", str(spec), "--out", str(tmp_path / "b"), "--n-val", "40", "--n-test", "50"]) == 0
    for name in ("train.csv", "val.csv", "test.csv", "spec.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    sidecar = json.loads((tmp_path / "a" / "spec.json").read_text())
    assert sidecar["spec"]["seed"] == 3 and sidecar["n_val"] == 40


def test_generate_rejects_bad_specs(tmp_path, capsys):
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({k: v for k, v in SPEC.items() if k != "p_align"}))
    assert main(["generate", str(missing), "--out", str(tmp_path / "x")]) == 1
    assert "p_align" in capsys.readouterr().err
    saturated = tmp_path / "sat.json"
    saturated.write_text(json.dumps({**SPEC, "p_align": 1.0}))
    assert main(["generate", str(saturated), "--out", str(tmp_path / "y")]) == 1


def test_train_writes_run_directory(tmp_path):
    cfg = experiment(tmp_path)
    assert main(["train", str(cfg), "--mode", "group_dro", "--seed", "4"]) == 0
    run = tmp_path / "out" / "group_dro_lam0_C0_ep3_s4"
    for name in ("config.json", "meta.json", "history.csv", "summary.json", "model.json"):
        assert (run / name).exists()
    summary = json.loads((run / "summary.json").read_text())
    assert len(summary["checkpoints"]) == 3
    assert all("worst_group_val_acc" in row for row in summary["checkpoints"])
    meta = json.loads((run / "meta.json").read_text())
    assert meta["seed"] == 4 and meta["version"]
    resolved = json.loads((run / "config.json").read_text())
    assert resolved["optimizer"]["mode"] == "group_dro" and resolved["optimizer"]["seed"] == 4


def test_train_is_reproducible_from_its_run_directory(tmp_path):
    cfg = experiment(tmp_path)
    assert main(["train", str(cfg), "--out", str(tmp_path / "first")]) == 0
    run = next((tmp_path / "first").iterdir())
    assert main(["train", str(run / "config.json"), "--out", str(tmp_path / "second")]) == 0
    again = tmp_path / "second" / run.name
    assert (run / "history.csv").read_bytes() == (again / "history.csv").read_bytes()
    assert (run / "model.json").read_bytes() == (again / "model.json").read_bytes()


def test_train_flags_override_config(tmp_path, capsys):
    cfg = experiment(tmp_path)
    assert main(["train", str(cfg), "--lambda", "0.5", "--epochs", "7", "--dry-run"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["optimizer"]["lambda"] == 0.5 and printed["optimizer"]["epochs"] == 7
    assert not (tmp_path / "out").exists()


def test_train_bad_dataset_path(tmp_path, capsys):
    cfg = experiment(tmp_path, dataset=str(tmp_path / "nowhere.csv"))
    assert main(["train", str(cfg)]) == 1
    assert "not found" in capsys.readouterr().err


def test_config_errors(tmp_path):
    assert main(["train", str(tmp_path / "absent.json")]) == 1
    bad = experiment(tmp_path, modes=["erm", "magic"])
    assert main(["benchmark", str(bad)]) == 1
    unknown = experiment(tmp_path, colour="red")
    assert main(["train", str(unknown)]) == 1


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = experiment(tmp_path, arch={"kind": "mlp1", "H": 3})
    assert main(["train", str(cfg), "--eta-theta", "1e200", "--momentum", "0"]) == 2
    assert "numerical error" in capsys.readouterr().err


def test_benchmark_table_and_determinism(tmp_path, capsys):
    cfg = experiment(tmp_path, lambdas=[0.0, 0.1], adjustments=[0.0, 1.0], seeds=[0, 1])
    assert main(["benchmark", str(cfg), "--out", str(tmp_path / "b1")]) == 0
    assert main(["benchmark", str(cfg), "--out", str(tmp_path / "b2")]) == 0
    table = (tmp_path / "b1" / "table.csv").read_text().splitlines()
    assert len(table) == 4
    assert [line.split(",")[0] for line in table[1:]] == ["erm", "upweight", "group_dro"]
    for name in ("table.csv", "metrics.csv"):
        assert (tmp_path / "b1" / name).read_bytes() == (tmp_path / "b2" / name).read_bytes()
    header = (tmp_path / "b1" / "metrics.csv").read_text().splitlines()[0]
    assert header == "run_id,mode,lambda,C,checkpoint,split,avg_acc,worst_acc,group,acc,loss"
    runs = sorted(p.name for p in (tmp_path / "b1" / "runs").iterdir())
    # C > 0 only for group_dro at one lambda: 3 modes x 2 lambdas + 1 adjusted cell, 2 seeds each
    assert len(runs) == 14
    assert sum("_C1_" in r for r in runs) == 2
    capsys.readouterr()
    assert main(["report", str(tmp_path / "b1")]) == 0
    assert "group_dro" in capsys.readouterr().out


def test_benchmark_parallel_matches_serial(tmp_path):
    cfg = ExperimentConfig.load(experiment(tmp_path, modes=["erm", "group_dro"], seeds=[0, 1]))
    serial = run_benchmark(cfg, tmp_path / "s", jobs=1)
    parallel = run_benchmark(cfg, tmp_path / "p", jobs=2)
    assert serial.table_csv() == parallel.table_csv()
    assert serial.metrics_csv() == parallel.metrics_csv()


def test_single_cell_per_mode_gives_three_rows(tmp_path):
    bench = run_benchmark(ExperimentConfig.load(experiment(tmp_path)))
    assert [row.mode for row in bench.table] == ["erm", "upweight", "group_dro"]


def test_selection_rule():
    assert select_best([0.6, 0.8, 0.7]) == 1
    assert select_best([0.5, 0.5]) == 0
    cells = [Cell("erm", lam, 0.0, 3) for lam in (0.0, 0.1, 1.0)]
    results = [RunResult(c.run_id(0), c, 0, checkpoint=2, val_worst=v, test_acc=[0.9, 0.5], test_sizes=[10, 10],
                         test_avg=0.8, test_worst=0.5) for c, v in zip(cells, (0.6, 0.8, 0.7))]
    row = summarize_mode("erm", cells, results)
    assert row.cell == cells[1]
    assert row.test_worst_std == pytest.approx((0.25 / 10) ** 0.5)


def test_failed_cell_gives_partial_exit(tmp_path, capsys):
    cfg = experiment(tmp_path, arch={"kind": "mlp1", "H": 3}, lambdas=[0.0],
                     optimizer={"eta_theta": 0.1, "batch_size": 20, "epochs": 2, "momentum": 0.0})
    data = json.loads(cfg.read_text())
    data["epochs"] = [2]
    cfg.write_text(json.dumps(data))
    assert main(["benchmark", str(cfg), "--eta-theta", "1e200", "--out", str(tmp_path / "b")]) == 3
    failures = json.loads((tmp_path / "b" / "failures.json").read_text())
    assert len(failures) == 3


def test_theory_only_counterexample(tmp_path, capsys):
    assert main(["theory", "--only", "counterexample", "--out", str(tmp_path / "t")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("PASS counterexample")
    report = json.loads((tmp_path / "t" / "theory.json").read_text())
    assert report["counterexample"]["dro_value"] == pytest.approx(0.6)
    assert main(["report", str(tmp_path / "t")]) == 0


def test_theory_tolerance_flag_propagates(tmp_path):
    assert main(["theory", "--only", "prop1", "--tol", "1e-12", "--out", str(tmp_path / "t")]) == 0
    assert json.loads((tmp_path / "t" / "theory.json").read_text())["tol"] == 1e-12


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GROUPDRO_OUTPUT_ROOT", str(tmp_path / "envroot"))
    assert main(["theory", "--only", "counterexample"]) == 0
    assert (tmp_path / "envroot" / "theory" / "theory.json").exists()


def test_report_on_run_directory(tmp_path, capsys):
    cfg = experiment(tmp_path)
    assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 0
    run = next((tmp_path / "r").iterdir())
    capsys.readouterr()
    assert main(["report", str(run)]) == 0
    assert "best checkpoint" in capsys.readouterr().out
    assert main(["report", str(tmp_path)]) == 1
