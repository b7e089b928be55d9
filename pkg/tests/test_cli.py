import json

import numpy as np
import pytest

from robsur import cli, robust
from robsur.errors import NumericFailure

pytestmark = pytest.mark.filterwarnings("ignore:degenerate bootstrap:RuntimeWarning")

EQUAL = ["--restrict", "equal 1:Shares 2:Shares", "--restrict", "equal 1:Capital 2:Capital"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_fit_mle_report(capsys):
    code, out, _ = run(capsys, "fit", "--estimator", "mle")
    assert code == 0
    rep = json.loads(out)
    assert rep["result"]["coefficients"]["GE:(Intercept)"] == pytest.approx(-42.270, abs=5e-4)
    assert rep["result"]["Sigma"][0][0] == pytest.approx(784.2, abs=0.05)
    cfg = rep["config"]
    assert cfg["tuning"]["c0"] == pytest.approx(3.4528816505, abs=1e-9)
    assert {"c1", "delta0", "delta1"} <= set(cfg["tuning"]) and cfg["seed"] == 0
    assert (cfg["n"], cfg["m"], cfg["p"]) == (20, 3, 9)


def test_report_is_byte_identical(capsys):
    a = run(capsys, "fit", "--seed", "5", "--n-subsamples", "300")[1]
    b = run(capsys, "fit", "--seed", "5", "--n-subsamples", "300")[1]
    assert a == b


def test_floats_roundtrip(capsys):
    rep = json.loads(run(capsys, "fit", "--estimator", "mle")[1])
    beta = np.array(list(rep["result"]["coefficients"].values()))
    from robsur.io import grunfeld
    from robsur.model import mle_fit
    assert np.array_equal(beta, mle_fit(grunfeld()).beta)


def test_test_diag(capsys):
    code, out, _ = run(capsys, "test-diag", "--estimator", "mm", "--N", "1000", "--seed", "42")
    t = json.loads(out)["result"]["test"]
    assert code == 0 and t["test"] == "LM_MM"
    assert t["statistic"] == pytest.approx(14.825, abs=0.001)
    assert abs(t["p_bootstrap"] - 0.019) < 0.03


def test_test_coef_mle_and_csv(capsys, tmp_path):
    csv = tmp_path / "reps.csv"
    code, out, _ = run(capsys, "test-coef", "--estimator", "mle", "--N", "50", "--csv", str(csv),
                       *EQUAL)
    rep = json.loads(out)
    assert code == 0
    assert rep["result"]["test"]["statistic"] == pytest.approx(6.728, abs=5e-4)
    assert rep["result"]["restriction"]["R"][0][1] == 1.0
    assert csv.read_text().startswith("replicate,Lambda_MLE")


def test_test_coef_mm_runs(capsys):
    code, out, _ = run(capsys, "test-coef", "--N", "100", *EQUAL)
    t = json.loads(out)["result"]["test"]
    assert code == 0 and t["test"] == "Lambda_MM" and t["df"] == 2


def test_ci_and_diagnose(capsys, tmp_path):
    code, out, _ = run(capsys, "ci", "--N", "300", "--methods", "AS", "BP")
    cis = json.loads(out)["result"]["intervals"]
    assert code == 0 and len(cis) == 18
    code, out, _ = run(capsys, "ci", "--estimator", "mle")
    assert code == 0 and json.loads(out)["result"]["intervals"][0]["method"] == "AS"
    code, out, _ = run(capsys, "diagnose", "--csv", str(tmp_path / "d.csv"))
    flagged = json.loads(out)["result"]["flagged"]
    assert flagged["vertical_outlier"] == ["1946", "1947", "1948"]
    assert flagged["bad_leverage"] == ["1954"]


def test_config_file_and_output(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"estimator": "mle", "seed": 9}))
    out = tmp_path / "r.json"
    code, stdout, _ = run(capsys, "fit", "--config", str(cfg), "--seed", "11", "-o", str(out))
    rep = json.loads(out.read_text())
    assert code == 0 and stdout == ""
    assert rep["config"]["estimator"] == "mle" and rep["config"]["seed"] == 11


def test_custom_dataset(capsys, tmp_path):
    rng = np.random.default_rng(0)
    n = 40
    a, b = rng.standard_normal(n), rng.standard_normal(n)
    y1, y2 = 1 + a + rng.standard_normal(n), 2 - b + rng.standard_normal(n)
    path = tmp_path / "d.csv"
    rows = ["y1,y2,a,b"] + [f"{u},{v},{w},{z}" for u, v, w, z in zip(y1, y2, a, b)]
    path.write_text("\n".join(rows) + "\n")
    blocks = json.dumps([{"response": "y1", "predictors": ["a"]},
                         {"response": "y2", "predictors": ["b"]}])
    code, out, _ = run(capsys, "fit", "--data", str(path), "--blocks", blocks)
    assert code == 0
    assert set(json.loads(out)["result"]["coefficients"]) == {
        "y1:(Intercept)", "y1:a", "y2:(Intercept)", "y2:b"}


def test_exit_codes(capsys, tmp_path, monkeypatch):
    code, _, err = run(capsys, "test-coef")
    assert code == 2 and json.loads(err)["error"] == "config"
    code, _, _ = run(capsys, "fit", "--breakdown", "0.7")
    assert code == 2
    code, _, _ = run(capsys, "ci", "--estimator", "s")
    assert code == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "fit", "--config", str(bad))[0] == 2
    bad.write_text(json.dumps({"colour": 1}))
    assert run(capsys, "fit", "--config", str(bad))[0] == 2
    # exact fit: both responses are exact linear functions of the predictor
    n = 30
    x = np.arange(n, dtype=float)
    path = tmp_path / "exact.csv"
    path.write_text("y1,y2,x\n" + "".join(f"{1 + 2 * v},{3 - v},{v}\n" for v in x))
    blocks = json.dumps([{"response": "y1", "predictors": ["x"]},
                         {"response": "y2", "predictors": ["x"]}])
    code, _, err = run(capsys, "fit", "--data", str(path), "--blocks", blocks)
    assert code == 4 and json.loads(err)["type"] == "ExactFitError"

    def boom(*a, **k):
        raise NumericFailure("forced")
    monkeypatch.setattr(robust, "fit", boom)
    code, _, err = run(capsys, "fit")
    assert code == 3 and json.loads(err)["error"] == "numeric"


def test_simulate(capsys, tmp_path):
    csv = tmp_path / "sim.csv"
    code, out, _ = run(capsys, "simulate", "--n", "40", "--reps", "2", "--N", "100",
                       "--tests", "LM_MLE", "Lambda_MLE", "--contamination", "0", "0.1",
                       "--csv", str(csv), "--out-dir", str(tmp_path / "reps"))
    rep = json.loads(out)
    assert code == 0 and len(rep["result"]["cells"]) == 4
    assert rep["config"]["scenarios"][1]["contamination"] == 0.1
    assert "3" in rep["config"]["tuning"]
    assert len(csv.read_text().splitlines()) == 1 + 4 * 2


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "robsur", "--version"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and r.stdout.startswith("robsur")
