"""Command-line harness: exit codes, files, reproducibility."""
import json

import numpy as np
import pytest

from hlmrf.cli import EXIT_BUDGET, EXIT_ERROR, EXIT_OK, main


def gen(tmp_path, kind="many-components", seed=3, size=None):
    model = tmp_path / "model.json"
    samples = tmp_path / "samples.json"
    argv = ["gen-synthetic", "--kind", kind, "--seed", str(seed),
            "--out-model", str(model), "--out-samples", str(samples)]
    if size is not None:
        argv += ["--size", str(size)]
    assert main(argv) == EXIT_OK
    return model, samples


def test_gen_synthetic_writes_files(tmp_path, capsys):
    model, samples = gen(tmp_path)
    out = json.loads(capsys.readouterr().out)
    assert out["kind"] == "many-components"
    assert out["n_components"] == 8
    assert json.load(open(model))["n_y"] == out["n_y"]
    assert isinstance(json.load(open(samples)), list)


def test_infer_converges_and_is_reproducible(tmp_path, capsys):
    model, _ = gen(tmp_path)
    out_a = tmp_path / "a.json"
    out_b = tmp_path / "b.json"
    base = ["infer", "--model", str(model), "--delta", "1e-6",
            "--max-epochs", "20000"]
    assert main(base + ["--output", str(out_a)]) == EXIT_OK
    assert main(base + ["--output", str(out_b)]) == EXIT_OK
    a = json.load(open(out_a))
    b = json.load(open(out_b))
    assert a["converged"] is True
    assert a["y"] == b["y"]
    assert a["objective"] == b["objective"]
    assert a["final_gap"] <= 1e-6


def test_infer_variants_agree(tmp_path, capsys):
    model, _ = gen(tmp_path, kind="chain", size=20)
    results = {}
    for variant in ("serial", "cc", "lockfree"):
        out = tmp_path / f"{variant}.json"
        code = main(["infer", "--model", str(model), "--variant", variant,
                     "--delta", "1e-6", "--max-epochs", "20000",
                     "--workers", "2", "--output", str(out)])
        assert code == EXIT_OK
        results[variant] = json.load(open(out))
    ref = results["serial"]["objective"]
    for variant in ("cc", "lockfree"):
        rel = abs(results[variant]["objective"] - ref) / max(abs(ref), 1e-9)
        assert rel <= 1e-3


def test_infer_budget_exit_code(tmp_path, capsys):
    model, _ = gen(tmp_path, kind="chain", size=30)
    code = main(["infer", "--model", str(model), "--delta", "1e-12",
                 "--max-epochs", "1"])
    assert code == EXIT_BUDGET


def test_infer_missing_model_errors(tmp_path, capsys):
    code = main(["infer", "--model", str(tmp_path / "nope.json")])
    assert code == EXIT_ERROR
    assert "error:" in capsys.readouterr().err


def test_config_file_overrides_flags(tmp_path, capsys):
    model, _ = gen(tmp_path, kind="chain", size=30)
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"max_epochs": 1, "delta": 1e-12}))
    out = tmp_path / "out.json"
    code = main(["infer", "--model", str(model), "--max-epochs", "20000",
                 "--delta", "1e-3", "--config", str(config),
                 "--output", str(out)])
    assert code == EXIT_BUDGET
    assert json.load(open(out))["epochs"] == 1
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["infer", "--model", str(model),
                 "--config", str(bad)]) == EXIT_ERROR


def test_learn_writes_model_and_history(tmp_path, capsys):
    model, samples = gen(tmp_path, kind="chain", size=10)
    capsys.readouterr()
    out_model = tmp_path / "learned.json"
    history = tmp_path / "history.csv"
    code = main(["learn", "--model", str(model), "--samples", str(samples),
                 "--output", str(out_model), "--history", str(history),
                 "--loss", "energy", "--max-inner", "8", "--patience", "3",
                 "--delta", "1e-3"])
    assert code in (EXIT_OK, EXIT_BUDGET)
    summary = json.loads(capsys.readouterr().out)
    assert summary["loss"] == "energy"
    assert np.isfinite(summary["final_loss"])
    w = summary["w_sy"]
    assert abs(sum(w) - 1.0) <= 1e-9
    assert json.load(open(out_model))["w_sy"] == w
    lines = history.read_text().strip().splitlines()
    assert lines[0].startswith("epoch,")
    assert len(lines) == summary["epochs"] + 1


def test_learn_empty_samples_errors(tmp_path, capsys):
    model, _ = gen(tmp_path, kind="chain", size=8)
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    code = main(["learn", "--model", str(model), "--samples", str(empty),
                 "--output", str(tmp_path / "out.json")])
    assert code == EXIT_ERROR


def test_oracle_check_passes(tmp_path, capsys):
    out = tmp_path / "oracle.csv"
    code = main(["oracle-check", "--count", "4", "--seed", "0",
                 "--output", str(out)])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["ok"] is True
    assert summary["cases"] == 4
    assert summary["max_rel_objective_diff"] <= 1e-4
    assert len(out.read_text().strip().splitlines()) == 5


def test_bench_writes_all_sections(tmp_path, capsys):
    prefix = str(tmp_path / "bench")
    code = main(["bench", "--seed", "0", "--size", "12",
                 "--out-prefix", prefix, "--workers", "2"])
    assert code == EXIT_OK
    summary = json.load(open(prefix + "_summary.json"))
    assert summary["warm_start"]["warm_wins_fraction"] >= 0.9
    total_cold = summary["warm_start"]["cold_epochs_total"]
    total_warm = summary["warm_start"]["warm_epochs_total"]
    assert total_warm <= 0.5 * total_cold
    assert summary["epsilon_sweep"]["nonincreasing_as_eps_grows"] is True
    for part in ("warm", "eps", "variants"):
        lines = open(f"{prefix}_{part}.csv").read().strip().splitlines()
        assert len(lines) > 1
