import json
import subprocess
import sys

import numpy as np
import pytest

import covshift
from covshift import cli
from covshift.classifiers import FitError
from covshift.dataset import LabeledSample, write_csv
from covshift.models import ModelSpec
from covshift.simulation import generate


@pytest.fixture(scope="module")
def h0_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("h0")
    # one population split in two: the null holds and the marginals agree
    src, _, _ = generate(ModelSpec.make("A", "null"), 900, 1, seed=[11])
    write_csv(src.subset(np.arange(500)), d / "train.csv")
    write_csv(src.subset(np.arange(500, 900)), d / "test.csv")
    return d / "train.csv", d / "test.csv"


@pytest.fixture(scope="module")
def shifted_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("shift")
    tr, te, _ = generate(ModelSpec.make("A", "null"), 600, 300, seed=[12])
    write_csv(tr, d / "train.csv")
    write_csv(te, d / "test.csv")
    return d / "train.csv", d / "test.csv"


def _test_args(files, *extra):
    return ["test", "--train", str(files[0]), "--test", str(files[1]), "--threads", "1", *extra]


def _report(tmp_path, args, name="r.json"):
    out = tmp_path / name
    assert cli.main([*args, "--out", str(out)]) == 0
    return json.loads(out.read_text())


def test_alpha_out_of_range(h0_files, capsys):
    assert cli.main(_test_args(h0_files, "--alpha", "1.5")) == 2
    assert "alpha must be in (0,1)" in capsys.readouterr().err


def test_unknown_model_lists_valid(capsys):
    assert cli.main(["simulate", "--model", "E"]) == 2
    err = capsys.readouterr().err
    assert "'A', 'B', 'C', 'D'" in err


def test_missing_file_is_data_error(tmp_path, capsys):
    assert cli.main(["test", "--train", str(tmp_path / "a.csv"), "--test", str(tmp_path / "b.csv")]) == 3
    assert "no such file" in capsys.readouterr().err


def test_nan_cell_is_data_error(tmp_path, h0_files, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,y\n1,2\nNaN,3\n")
    assert cli.main(["test", "--train", str(bad), "--test", str(h0_files[1])]) == 3
    err = capsys.readouterr().err
    assert "line 3" in err and "x1" in err and "Traceback" not in err


def test_column_mismatch_is_data_error(tmp_path, h0_files):
    other = tmp_path / "o.csv"
    write_csv(LabeledSample(np.ones((5, 2)), np.zeros(5)), other)
    assert cli.main(["test", "--train", str(h0_files[0]), "--test", str(other)]) == 3


def test_infeasible_sizes_are_config_error(h0_files, capsys):
    assert cli.main(_test_args(h0_files, "--m", "100", "--k", "50")) == 2
    assert "[split]" in capsys.readouterr().err


def test_numeric_failure_exit_code(h0_files, monkeypatch, capsys):
    def boom(*a, **k):
        raise FitError("IRLS blew up")

    monkeypatch.setattr(cli, "run_test", boom)
    assert cli.main(_test_args(h0_files, "--b", "1")) == 4
    assert "[fit]" in capsys.readouterr().err


def test_h0_self_test_mostly_accepts(tmp_path):
    # one B=1 run per independent H0 source, so the runs are independent draws
    rejects = []
    for d in range(100):
        src, _, _ = generate(ModelSpec.make("A", "null"), 900, 1, seed=[500 + d])
        write_csv(src.subset(np.arange(500)), tmp_path / "tr.csv")
        write_csv(src.subset(np.arange(500, 900)), tmp_path / "te.csv")
        rep = _report(tmp_path, _test_args((tmp_path / "tr.csv", tmp_path / "te.csv"), "--b", "1", "--m", "5", "--seed", str(d)))
        rejects.append(rep["runs"][0]["reject"])
    # upper end of the exact 99% binomial band around 0.05 at 100 runs
    assert np.mean(rejects) <= 0.11


def test_b_seeds_are_consecutive(tmp_path, h0_files):
    rep = _report(tmp_path, _test_args(h0_files, "--b", "4", "--seed", "2"))
    assert rep["seeds"] == [2, 3, 4, 5] and [r["seed"] for r in rep["runs"]] == [2, 3, 4, 5]


def test_report_embeds_provenance(tmp_path, h0_files):
    rep = _report(tmp_path, _test_args(h0_files, "--b", "3", "--seed", "5"))
    assert rep["version"] == covshift.__version__
    assert rep["config"]["K"] == rep["runs"][0]["K"]
    assert rep["config"]["fit"]["learning_rate"] == 0.1
    assert rep["seeds"] == [5, 6, 7]
    assert len(rep["data"]["train"]["fingerprint"]) == 16
    assert all(r["data_fingerprint"] == rep["data_fingerprint"] for r in rep["runs"])
    assert rep["combined_p"] == pytest.approx(min(1.0, 2 * float(np.median(rep["p_values"]))))


def _strip_timing(rep):
    rep = json.loads(json.dumps(rep))
    for r in rep.get("runs", []):
        r.pop("timing")
    rep.pop("wall_time", None)
    return rep


def test_rerun_from_embedded_config_is_identical(tmp_path, h0_files):
    first = _report(tmp_path, _test_args(h0_files, "--b", "3", "--estimator", "ql", "--m", "4"), "a.json")
    c = first["config"]
    args = [
        "test", "--train", c["train"], "--test", c["test"], "--response", c["response"],
        "--m", str(c["m"]), "--k", str(c["K"]), "--alpha", str(c["alpha"]), "--estimator", c["estimator"],
        "--b", str(c["B"]), "--seed", str(c["seed"]), "--threads", "2",
    ]
    second = _report(tmp_path, args, "b.json")
    assert _strip_timing(first) == _strip_timing(second)


def test_equal_marginals_warning(tmp_path, shifted_files):
    rep = _report(tmp_path, _test_args(shifted_files, "--b", "1", "--equal-marginals"))
    assert any("1/(m+1)" in w for w in rep["warnings"])
    assert rep["runs"][0]["diagnostics"]["equal_marginals"] is True


def test_decision_never_changes_exit_code(tmp_path, shifted_files):
    # ignoring the covariate shift makes the test reject, but the command still succeeds
    rep = _report(tmp_path, _test_args(shifted_files, "--b", "1", "--equal-marginals"))
    assert rep["runs"][0]["reject"] is True


def test_test_csv_format(tmp_path, h0_files):
    out = tmp_path / "r.csv"
    assert cli.main([*_test_args(h0_files, "--b", "2", "--format", "csv"), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "seed,m,K,t,p_value,reject" and len(lines) == 3


def _run_file(path, p, fp="abc"):
    path.write_text(json.dumps({"p_value": p, "data_fingerprint": fp, "u_values": []}))
    return str(path)


def test_aggregate_three_runs(tmp_path, capsys):
    files = [_run_file(tmp_path / f"r{i}.json", p) for i, p in enumerate([0.01, 0.02, 0.03])]
    assert cli.main(["aggregate", *files]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["B"] == 3 and out["combined_p"] == pytest.approx(0.04)


def test_aggregate_single_and_directory(tmp_path, capsys):
    d = tmp_path / "runs"
    d.mkdir()
    _run_file(d / "only.json", 0.3)
    assert cli.main(["aggregate", str(d)]) == 0
    assert json.loads(capsys.readouterr().out)["combined_p"] == pytest.approx(0.6)


def test_aggregate_mismatched_data(tmp_path, capsys):
    a = _run_file(tmp_path / "a.json", 0.1, "aaaa")
    b = _run_file(tmp_path / "b.json", 0.2, "bbbb")
    assert cli.main(["aggregate", a, b]) == 3
    assert "different data" in capsys.readouterr().err


def test_aggregate_reads_test_reports(tmp_path, h0_files, capsys):
    rep_path = tmp_path / "rep.json"
    assert cli.main([*_test_args(h0_files, "--b", "3"), "--out", str(rep_path)]) == 0
    capsys.readouterr()
    assert cli.main(["aggregate", str(rep_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["combined_p"] == json.loads(rep_path.read_text())["combined_p"]


def test_aggregate_bad_json(tmp_path):
    bad = tmp_path / "x.json"
    bad.write_text("{not json")
    assert cli.main(["aggregate", str(bad)]) == 3


def test_simulate_csv_and_summary(tmp_path, capsys):
    out = tmp_path / "sim.csv"
    args = ["simulate", "--model", "a", "--n2", "100", "--m", "3", "--reps", "4", "--weights", "oracle", "estimated"]
    assert cli.main([*args, "--threads", "1", "--format", "csv", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("model,hypothesis,estimator,weight_mode,n2,m,K,reps,reject_frac")
    assert len(lines) == 3
    assert capsys.readouterr().err.count("model=A") == 2


def test_simulate_json_full_and_reproducible(tmp_path):
    args = ["simulate", "--model", "B", "--hypothesis", "alt", "--n2", "100", "--m", "3", "--reps", "3", "--full"]
    a = _report(tmp_path, [*args, "--threads", "1"], "a.json")
    b = _report(tmp_path, [*args, "--threads", "2"], "b.json")
    assert len(a["replications"]) == 3
    assert a["spec"]["beta"] and a["version"] == covshift.__version__
    assert _strip_timing(a) == _strip_timing(b)


def test_simulate_lambda_sweep(tmp_path):
    rep = _report(
        tmp_path,
        ["simulate", "--model", "A", "--p", "30", "--n2", "100", "--m", "3", "--reps", "2", "--threads", "1",
         "--estimator", "sparse-ll", "--l1-lambda", "2", "30"],
    )
    assert sorted({r["l1_lambda"] for r in rep["rows"]}) == [2.0, 30.0]


def test_console_script_has_no_traceback():
    proc = subprocess.run(
        [sys.executable, "-m", "covshift.cli", "simulate", "--model", "A", "--alpha", "2"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert "Traceback" not in proc.stderr and "alpha must be in (0,1)" in proc.stderr
