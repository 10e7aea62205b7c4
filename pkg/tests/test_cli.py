"""Command-line interface: subcommand plumbing and exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from zeromix.cli import main
from zeromix.harness import example_paths
from zeromix.models import load_dataset

STUDY_INI = """[model]
name = cortisol

[pattern]
pairs = (1,4), (3,4)

[init]
m = 50, 70, 1, 0.1
sigma_diag = 25, 49, 0.25, 0.0016
theta = 0.04

[study]
replicates = 2
individuals = 5
master_seed = 1
truth_m = 50, 70, 1.5, 0.08
truth_sigma = 20 -4.5 -0.3 0; -4.5 2.5 -0.1 -0.002; -0.3 -0.1 0.05 0; 0 -0.002 0 1e-5
truth_theta = 0.015
"""


def test_no_arguments_is_a_usage_error(capsys):
    assert main([]) == 1
    capsys.readouterr()


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "fit" in capsys.readouterr().out


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert main(["bogus"]) == 1
    capsys.readouterr()


def test_console_entry_point_is_installed():
    out = subprocess.run(["zeromix", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "fit" in out.stdout


def test_validate_passes(capsys):
    assert main(["validate"]) == 0
    assert "all checks passed" in capsys.readouterr().out


def test_icf_prints_the_constrained_optimum(tmp_path, capsys):
    mat = tmp_path / "xt.csv"
    mat.write_text("4,-3,3\n-3,4,-3\n3,-3,4\n")
    assert main(["icf", "--xtilde", str(mat), "--pattern", "(1,3)",
                 "--n", "100"]) == 0
    out = capsys.readouterr().out
    rows = [line.split(",") for line in out.splitlines()[:3]]
    sol = np.array([[float(v) for v in row] for row in rows])
    assert sol[0, 2] == 0.0
    assert sol[0, 1] == pytest.approx(-12.0 / 7.0, abs=1e-9)
    assert "objective" in out and "kkt" in out


def test_icf_rejects_bad_inputs(tmp_path, capsys):
    mat = tmp_path / "xt.csv"
    mat.write_text("4,-3,3\n-3,4,-3\n3,-3,4\n")
    assert main(["icf", "--xtilde", str(mat), "--pattern", "(1,1)"]) == 1
    assert main(["icf", "--xtilde", str(tmp_path / "missing.csv")]) == 1
    rect = tmp_path / "rect.csv"
    rect.write_text("1,2,3\n4,5,6\n")
    assert main(["icf", "--xtilde", str(rect)]) == 1
    capsys.readouterr()


def test_fit_rejects_missing_and_malformed_inputs(tmp_path, capsys):
    csv_path, ini_path = example_paths()
    assert main(["fit", "--data", str(tmp_path / "no.csv"),
                 "--config", ini_path]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("id,obs_index,design_value,y\n1,1,0.5\n")
    assert main(["fit", "--data", str(bad), "--config", ini_path]) == 1
    err = capsys.readouterr().err
    assert "row 2" in err


def test_simulate_writes_a_loadable_dataset(tmp_path, capsys):
    ini = tmp_path / "study.ini"
    ini.write_text(STUDY_INI)
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--config", str(ini), "--out", str(out),
                 "--n", "4", "--seed", "9"]) == 0
    data = load_dataset(out)
    assert data.n == 4 and data.n_obs == 7
    capsys.readouterr()


def test_simulate_requires_the_truth_section(tmp_path, capsys):
    csv_path, ini_path = example_paths()  # bundled config has no truth block
    assert main(["simulate", "--config", ini_path,
                 "--out", str(tmp_path / "x.csv")]) == 1
    assert "study" in capsys.readouterr().err


def test_fit_short_run_writes_report_and_trace(tmp_path, capsys):
    csv_path, _ = example_paths()
    ini = tmp_path / "quick.ini"
    ini.write_text("""[model]
name = cortisol

[pattern]
pairs = (1,4), (3,4)

[init]
m = 50, 70, 1, 0.1
sigma_diag = 25, 49, 0.25, 0.0016
theta = 0.04

[mcem]
chain_length = 80
burn_in = 10
warmup = 5
outer_tol = 1e-12
max_outer = 12
seed = 3
""")
    out_dir = tmp_path / "out"
    assert main(["fit", "--data", csv_path, "--config", str(ini),
                 "--out-dir", str(out_dir), "--no-se",
                 "--loglik-samples", "300"]) == 0
    capsys.readouterr()
    report = json.loads((out_dir / "report.json").read_text())
    assert report["iterations"] == 12 and report["converged"] is False
    sigma = np.array(report["params"]["sigma"])
    assert sigma[0, 3] == 0.0 and sigma[2, 3] == 0.0
    assert report["loglik"] is not None and report["mc_se"] > 0.0
    assert report["lr"] is not None and report["lr"]["df"] == 2
    assert report["se"] is None
    trace = (out_dir / "trace.csv").read_text().splitlines()
    assert len(trace) == 1 + 12


def test_study_one_replicate_emits_all_outputs(tmp_path, capsys):
    ini = tmp_path / "study.ini"
    ini.write_text(STUDY_INI.replace("chain_length = 80", ""))
    out_dir = tmp_path / "study"
    assert main(["study", "--config", str(ini), "--replicates", "1",
                 "--out-dir", str(out_dir)]) == 0
    capsys.readouterr()
    report = json.loads((out_dir / "report.json").read_text())
    assert report["n_replicates"] == 1
    table = (out_dir / "table1.csv").read_text().splitlines()
    assert len(table) == 1 + 15 + 1
    assert (out_dir / "qq.csv").read_text().startswith("u,p")
