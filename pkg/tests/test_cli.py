"""CLI subcommands: smoke runs, validation paths, idempotent outputs."""

from __future__ import annotations

import json
import math

import pytest
from click.testing import CliRunner

from fedsel.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def tiny_run_config(tmp_path, **overrides) -> str:
    cfg = {
        "population": {
            "client_count": 30,
            "class_count": 3,
            "feature_dim": 5,
            "label_concentration": 0.5,
            "sample_exponent": 1.8,
            "sample_min": 8,
            "sample_max": 40,
            "latency_log_mu": math.log(0.05),
            "latency_log_sigma": 0.8,
            "bandwidth_log_mu": math.log(1e4),
            "bandwidth_log_sigma": 0.5,
            "availability_min": 0.9,
            "availability_max": 1.0,
            "seed": 0,
            "test_samples": 200,
        },
        "selector": {"pacer_step": 5.0, "pacer_window": 3},
        "k": 4,
        "target": 0.5,
        "max_rounds": 6,
        "seeds": [1, 2],
        "policies": ["random", "guided"],
    }
    cfg.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_simulate_train_writes_tables_and_summary(runner, tmp_path):
    cfg = tiny_run_config(tmp_path)
    out = tmp_path / "out"
    result = runner.invoke(main, ["simulate-train", "--config", cfg,
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "summary.tsv").exists()
    for policy in ("random", "guided"):
        for seed in (1, 2):
            table = out / f"run_{policy}_seed{seed}.tsv"
            assert table.exists()
    summary = (out / "summary.tsv").read_text().splitlines()
    assert summary[0].startswith("policy\truns")
    assert len(summary) == 3  # two policies


def test_simulate_train_idempotent_outputs(runner, tmp_path):
    cfg = tiny_run_config(tmp_path)
    out = tmp_path / "out"
    runner.invoke(main, ["simulate-train", "--config", cfg, "--out", str(out)])
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    runner.invoke(main, ["simulate-train", "--config", cfg, "--out", str(out)])
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second


def test_simulate_train_max_rounds_zero_reports_not_reached(runner, tmp_path):
    cfg = tiny_run_config(tmp_path, max_rounds=0, target=0.99)
    out = tmp_path / "out"
    result = runner.invoke(main, ["simulate-train", "--config", cfg,
                                  "--out", str(out)])
    assert result.exit_code == 0
    assert "reached 0/2" in result.output


def test_simulate_train_rejects_bad_field(runner, tmp_path):
    cfg = tiny_run_config(tmp_path)
    out = tmp_path / "out"
    result = runner.invoke(main, ["simulate-train", "--config", cfg,
                                  "--out", str(out), "--k", "0"])
    assert result.exit_code != 0
    assert "k" in result.output


def test_simulate_train_missing_config_key(runner, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"population": {}}))
    result = runner.invoke(main, ["simulate-train", "--config", str(path),
                                  "--out", str(tmp_path / "o")])
    assert result.exit_code != 0
    assert "selector" in result.output


def test_estimate_count_worked_example(runner):
    result = runner.invoke(main, ["estimate-count", "--epsilon", "10",
                                  "--delta", "0.95", "--population", "1000",
                                  "--range-min", "0", "--range-max", "100"])
    assert result.exit_code == 0
    assert "n = 131" in result.output


def test_estimate_count_near_one_confidence_no_overflow(runner):
    result = runner.invoke(main, ["estimate-count", "--epsilon", "10",
                                  "--delta", "0.999999", "--population", "1000",
                                  "--range-min", "0", "--range-max", "100"])
    assert result.exit_code == 0
    n = int(result.output.split("n = ")[1].split()[0])
    assert 131 <= n <= 1000


def test_estimate_count_with_validation(runner):
    result = runner.invoke(main, ["estimate-count", "--epsilon", "10",
                                  "--delta", "0.95", "--population", "1000",
                                  "--range-min", "0", "--range-max", "100",
                                  "--validate", "1000", "--seed", "5"])
    assert result.exit_code == 0, result.output
    rate = float(result.output.split("violation rate = ")[1].split()[0])
    assert rate <= 0.05


def test_estimate_count_rejects_unit_confidence(runner):
    result = runner.invoke(main, ["estimate-count", "--epsilon", "10",
                                  "--delta", "1.0", "--population", "1000",
                                  "--range-min", "0", "--range-max", "100"])
    assert result.exit_code != 0


def write_query_files(tmp_path, budget=3):
    caps = tmp_path / "caps.tsv"
    caps.write_text("client_id\tcategory\tcount\n"
                    "a\t0\t5\na\t1\t1\nb\t1\t5\nc\t0\t2\nc\t1\t2\n")
    query = tmp_path / "query.json"
    query.write_text(json.dumps({"preference": [5, 5], "budget": budget}))
    return str(query), str(caps)


def test_compose_testset_writes_assignment(runner, tmp_path):
    query, caps = write_query_files(tmp_path)
    out = tmp_path / "assign.tsv"
    result = runner.invoke(main, ["compose-testset", "--query", query,
                                  "--capacities", caps, "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "makespan" in result.output
    assert out.exists()


def test_compose_testset_exact_dominates(runner, tmp_path):
    query, caps = write_query_files(tmp_path)
    out = tmp_path / "assign.tsv"
    result = runner.invoke(main, ["compose-testset", "--query", query,
                                  "--capacities", caps, "--out", str(out),
                                  "--exact"])
    assert result.exit_code == 0, result.output
    greedy_makespan = float(result.output.split("greedy: makespan = ")[1].split()[0])
    exact_makespan = float(result.output.split("exact: makespan = ")[1].split()[0])
    assert exact_makespan <= greedy_makespan + 1e-9


def test_compose_testset_infeasible_lists_shortfall(runner, tmp_path):
    caps = tmp_path / "caps.tsv"
    caps.write_text("client_id\tcategory\tcount\na\t0\t2\n")
    query = tmp_path / "query.json"
    query.write_text(json.dumps({"preference": [10], "budget": 1}))
    out = tmp_path / "assign.tsv"
    result = runner.invoke(main, ["compose-testset", "--query", str(query),
                                  "--capacities", str(caps), "--out", str(out)])
    assert result.exit_code != 0
    assert "short" in result.output
    assert not out.exists()


def test_bench_cover_table(runner, tmp_path):
    out = tmp_path / "bench.tsv"
    result = runner.invoke(main, ["bench-cover", "--sizes", "5,30",
                                  "--seeds", "0", "--categories", "3",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = out.read_text().splitlines()
    assert lines[0] == "n_clients\tseed\tgreedy_seconds\texact_seconds\tmakespan_ratio"
    assert len(lines) == 3
    # N=5 solved exactly: ratio >= 1; N=30 above the guard
    n5 = lines[1].split("\t")
    assert float(n5[4]) >= 1.0 - 1e-9
    assert lines[2].split("\t")[3] == "guarded"
