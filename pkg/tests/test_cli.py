import csv
import json
from pathlib import Path

import pytest

from symctl.cli import main
from symctl.problems import resolve_problem_path

SMALL_DI = resolve_problem_path("double_integrator.toml").read_text().replace(
    "state_half_lengths = [0.02, 0.02]", "state_half_lengths = [0.05, 0.05]").replace(
    "input_half_lengths = [0.05]", "input_half_lengths = [0.125]")


@pytest.fixture(scope="module")
def lazy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("lazy") / "run"
    assert main(["solve", "nonlinear.toml", "--solver", "lazy-ellipsoid", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def grid_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("grid")
    (d / "di.toml").write_text(SMALL_DI)
    out = d / "run"
    code = main(["solve", str(d / "di.toml"), "--out", str(out)])
    assert code in (0, 2)
    return out


def artifact_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.name != "timings.json"}


def test_solve_writes_artifacts(lazy_run):
    names = {p.name for p in lazy_run.iterdir()}
    assert {"problem.toml", "manifest.json", "timings.json", "controller.csv", "values.csv", "tree.csv",
            "model_header.json", "model_cells.csv", "model_transitions.csv", "model_inputs.csv"} <= names
    manifest = json.loads((lazy_run / "manifest.json").read_text())
    assert manifest["solver"] == "lazy-ellipsoid"
    assert manifest["summary"]["initial_covered_fraction"] == 1.0
    import hashlib

    for name, digest in manifest["artifacts"].items():
        assert hashlib.sha256((lazy_run / name).read_bytes()).hexdigest() == digest
    timings = json.loads((lazy_run / "timings.json").read_text())
    assert min(timings.values()) >= 0
    assert timings["total_s"] >= timings["abstraction_s"] + timings["synthesis_s"] - 1e-3


def test_solve_is_deterministic(lazy_run, tmp_path):
    again = tmp_path / "again"
    assert main(["solve", "nonlinear.toml", "--solver", "lazy-ellipsoid", "--out", str(again)]) == 0
    assert artifact_bytes(again) == artifact_bytes(lazy_run)


def test_default_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv("SYMCTL_OUTPUT_ROOT", str(tmp_path))
    assert main(["solve", "nonlinear", "--solver", "lazy-ellipsoid"]) == 0
    assert (tmp_path / "nonlinear-lazy-ellipsoid" / "manifest.json").exists()


def test_check_passes_and_vacuous(lazy_run, tmp_path, capsys):
    assert main(["check", str(lazy_run), "--samples", "2000", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "check_report.json").read_text())
    assert report["relation"] == "MCR" and report["violation_count"] == 0 and report["model_hash_matches"]
    assert main(["check", str(lazy_run), "--samples", "0", "--out", str(tmp_path)]) == 0
    assert "vacuous" in capsys.readouterr().out


def test_check_detects_corrupted_transitions(lazy_run, tmp_path):
    import shutil

    bad = tmp_path / "bad"
    shutil.copytree(lazy_run, bad)
    lines = (bad / "model_transitions.csv").read_text().splitlines()
    src, inp, succ = lines[1].split(",")
    lines[1] = ",".join([src, inp, str(len(lines) - 1)])  # redirect to the far end of the tree
    (bad / "model_transitions.csv").write_text("\n".join(lines) + "\n")
    assert main(["check", str(bad), "--samples", "3000"]) == 3
    report = json.loads((bad / "check_report.json").read_text())
    assert report["violation_count"] > 0 and not report["model_hash_matches"]


def test_check_missing_artifacts(tmp_path):
    assert main(["check", str(tmp_path)]) == 1


def test_grid_check_and_simulate(grid_run, tmp_path):
    assert main(["check", str(grid_run), "--samples", "3000"]) == 0
    assert json.loads((grid_run / "check_report.json").read_text())["relation"] == "FRR"
    out = tmp_path / "sim"
    assert main(["simulate", str(grid_run), "--x0", "0.0,0.0", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "trajectories.csv").open()))
    assert rows[0] == ["trajectory", "step", "x_0", "x_1", "u_0", "cost"] and len(rows) == 2
    assert (out / "plot.svg").read_text().startswith("<?xml")
    for layer in ("plot_cells.csv", "plot_sets.csv", "simulation.json"):
        assert (out / layer).exists()


def test_simulate_outside_domain_hint(grid_run, tmp_path, capsys):
    code = main(["simulate", str(grid_run), "--x0", "1.99,1.99", "--out", str(tmp_path)])
    assert code == 2
    assert "nearest domain cell" in capsys.readouterr().out


def test_simulate_sampled_runs_are_reproducible(lazy_run, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["simulate", str(lazy_run), "--sample-initial", "5", "--count", "20", "--out", str(d),
                     "--disturbance", "random:2"]) == 0
    assert artifact_bytes(a) == artifact_bytes(b)
    summary = json.loads((a / "simulation.json").read_text())
    assert all(t["satisfied"] and t["within_bound"] for t in summary["trajectories"])


def test_cells_cap_refusal(capsys, tmp_path):
    code = main(["solve", "nonlinear.toml", "--solver", "grid", "--cells-cap", "100", "--out", str(tmp_path)])
    assert code == 1
    assert "size estimate: 6400 cells, 774400 cell-input pairs" in capsys.readouterr().err


def test_bad_problem_file(tmp_path, capsys):
    (tmp_path / "p.toml").write_text("schema_version = 1\nname = 'x'\n")
    assert main(["solve", str(tmp_path / "p.toml"), "--out", str(tmp_path / "o")]) == 1
    assert "SchemaError" in capsys.readouterr().err


def test_bench_table(tmp_path):
    (tmp_path / "di.toml").write_text(SMALL_DI)
    (tmp_path / "list.txt").write_text("# name solver prior\ndi.toml grid both\nmissing.toml\n")
    assert main(["bench", str(tmp_path / "list.txt"), "--repetitions", "1", "--out", str(tmp_path / "b")]) == 0
    rows = list(csv.reader((tmp_path / "b" / "bench.csv").open()))
    assert rows[0] == ["name", "solver", "abstraction_s", "synthesis_s", "total_s"]
    assert [r[1] for r in rows[1:3]] == ["grid+prior", "grid-prior"]
    assert rows[3][2] == "nan"
    assert json.loads((tmp_path / "b" / "bench_failures.json").read_text())[0]["problem"] == "missing.toml"
    assert (tmp_path / "b" / "bench.txt").read_text().split()[:5] == rows[0]
