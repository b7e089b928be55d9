import json

import numpy as np
import pytest
from scipy import stats

from robsur import simulation
from robsur.errors import ConfigError
from robsur.simulation import (ScenarioSpec, generate_scenario, run_coverage, run_level_power,
                               summary_json, write_repetitions_csv, write_results_csv)

# small n makes many linearized bootstrap scatters indefinite; those are skipped
pytestmark = pytest.mark.filterwarnings("ignore:degenerate bootstrap:RuntimeWarning")


def test_generator_is_deterministic():
    s = ScenarioSpec(n=50, seed=3)
    a, b = generate_scenario(s, 7), generate_scenario(s, 7)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.Xtilde, b.Xtilde)
    assert not np.array_equal(a.Y, generate_scenario(s, 8).Y)


def test_clean_errors_have_target_correlation():
    s = ScenarioSpec(n=1000, tau=0.5)
    d = generate_scenario(s, 0)
    E = d.residuals(s.beta)
    C = np.corrcoef(E, rowvar=False)
    assert np.all(np.abs(C[np.triu_indices(3, 1)] - 0.5) < 0.1)


def test_single_pair_and_identity_structures():
    sp = ScenarioSpec(sigma="single_pair", tau=0.3).Sigma
    assert sp[0, 1] == 0.3 and sp[0, 2] == 0 and sp[1, 2] == 0
    assert np.array_equal(ScenarioSpec(sigma="identity").Sigma, np.eye(3))


def test_contamination_layout():
    s = ScenarioSpec(n=100, contamination=0.10)
    d = generate_scenario(s, 0)
    clean = generate_scenario(ScenarioSpec(n=100), 0)
    for (X, y), (Xc, yc) in zip(d.blocks, clean.blocks):
        slopes = X[:, 1:]
        assert np.all((slopes[:10] >= -10) & (slopes[:10] <= -5))
        assert np.all(np.abs(slopes[10:]) < 6)
        assert np.all(y[:10] - X[:10] @ np.ones(3) > 10)
    assert d.n == 100


def test_t3_errors_heavy_tailed():
    d = generate_scenario(ScenarioSpec(n=2000, errors="t3"), 0)
    E = d.residuals(ScenarioSpec().beta)
    assert np.all(stats.kurtosis(E, axis=0, fisher=False) > 3)


def test_beta_default():
    s = ScenarioSpec(d=0.4)
    assert s.p == 9 and s.beta[-1] == 0.4 and np.all(s.beta[:-1] == 1)


@pytest.mark.parametrize("kw", [dict(contamination=0.5), dict(tau=1.0), dict(tau=-0.6),
                                dict(sigma="ar1"), dict(errors="cauchy"), dict(p_j=(3, 3)),
                                dict(repetitions=0)])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        ScenarioSpec(**kw)


def test_level_runner_resumes(tmp_path):
    spec = ScenarioSpec(n=40, repetitions=3, N_bootstrap=120, seed=1)
    tests = ("Lambda_MM", "LM_MM", "Lambda_MLE", "LM_MLE")
    res = run_level_power([spec], tests, out_dir=tmp_path)
    assert [r.quantity for r in res] == list(tests)
    for r in res:
        assert 0 <= r.rate <= 1 and r.repetitions + r.failures == 3
        assert r.se == pytest.approx(np.sqrt(r.rate * (1 - r.rate) / r.repetitions))
    files = sorted(tmp_path.rglob("rep*.json"))
    assert len(files) == 3
    # a stored repetition is reused rather than recomputed
    stored = json.loads(files[0].read_text())
    stored["LM_MLE"] = 0.0
    files[0].write_text(json.dumps(stored))
    again = run_level_power([spec], tests, out_dir=tmp_path)
    lm = [r for r in again if r.quantity == "LM_MLE"][0]
    assert lm.per_rep[0] == 0.0
    keep = [r for r in res if r.quantity == "Lambda_MM"][0]
    assert [r for r in again if r.quantity == "Lambda_MM"][0].per_rep == keep.per_rep
    write_results_csv(again, tmp_path / "cells.csv")
    write_repetitions_csv(again, tmp_path / "reps.csv")
    assert len((tmp_path / "reps.csv").read_text().splitlines()) == 1 + 4 * 3
    assert json.loads(summary_json(again))[0]["quantity"] == "Lambda_MM"


def test_coverage_runner():
    spec = ScenarioSpec(n=60, repetitions=2, N_bootstrap=150)
    res = run_coverage([spec])
    assert [r.quantity for r in res] == ["AS", "BP", "BCa"]
    for r in res:
        assert 0 <= r.rate <= 1 and r.mean_length > 0


def test_runner_rejects_unknown_names():
    with pytest.raises(ConfigError):
        run_level_power([ScenarioSpec(repetitions=1)], ["Wald"])
    with pytest.raises(ConfigError):
        run_coverage([ScenarioSpec(repetitions=1)], ["XX"])
