"""Acceptance suite: one test per release criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The desk-scale simulations (criteria 5-7) keep their per-repetition results in
``.acceptance_cache/<source hash>/`` so an interrupted run resumes; any change
to the package sources starts a fresh cache.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
import robsur
from robsur import robust
from robsur.errors import (ConfigError, DegenerateDesignError, DimensionError, ExactFitError,
                           InsufficientReplicatesError, NumericFailure, RankDeficiencyError,
                           SingularCovarianceError, SingularResampleError)
from robsur.frb import ThetaVector, frb_replicates, g_eval, grad_g, numeric_grad_g
from robsur.inference import (ci_percentile, lm_diag_test, lm_test_mle, lr_test_coef,
                              lr_test_mle, parse_restriction)
from robsur.model import Design, SurDataset, gls, mle_fit, ols_per_block
from robsur.rho import (RhoSpec, asymptotic_constants, tune_breakdown, tune_efficiency,
                        tuning_for)
from robsur.robust import FitConfig, m_scale, phi
from robsur.simulation import ScenarioSpec, run_coverage, run_level_power

from conftest import GRUNFELD_EQUAL, PAPER_MLE, PAPER_MM, random_sur

pytestmark = pytest.mark.filterwarnings("ignore:degenerate bootstrap:RuntimeWarning")

RESULTS = {}


def record(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[num] = line
    print(line)
    return ok


def _source_hash():
    h = hashlib.sha1()
    for p in sorted(Path(robsur.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="module")
def cache_dir():
    d = Path(__file__).resolve().parent.parent / ".acceptance_cache" / _source_hash()
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------
# 1. Gaussian Grunfeld results


def test_c1_grunfeld_mle(gdata):
    rs = parse_restriction(GRUNFELD_EQUAL, gdata)
    t0 = time.perf_counter()
    f = mle_fit(gdata)
    lm = lm_test_mle(gdata)
    lr = lr_test_mle(gdata, rs)
    dt = time.perf_counter() - t0
    beta_err = float(np.max(np.abs(f.beta - PAPER_MLE)))
    checks = {
        "beta": beta_err <= 0.0005 + 1e-9,
        "Sigma11": round(f.Sigma[0, 0], 1) == 784.2,
        "LM": abs(lm.statistic - 23.482) <= 0.0005,
        "Lambda": abs(lr.statistic - 6.728) <= 0.0005,
        "p": round(lr.p_asymptotic, 3) == 0.035,
        "runtime": dt < 1.0,
    }
    ok = all(checks.values())
    record(1, ok, f"max|beta-table|={beta_err:.5f} Sigma11={f.Sigma[0, 0]:.2f} "
                  f"LM={lm.statistic:.4f} Lambda={lr.statistic:.4f} p={lr.p_asymptotic:.4f} "
                  f"time={dt:.3f}s failed={[k for k, v in checks.items() if not v]}")
    assert ok, checks


# --------------------------------------------------------------------------
# 2. robust Grunfeld results


def test_c2_grunfeld_mm(gdata):
    rs = parse_restriction(GRUNFELD_EQUAL, gdata)
    t0 = time.perf_counter()
    beta_err, lms, lams, p_lm, p_lam = [], [], [], [], []
    for seed in range(5):
        f = robust.fit(gdata, FitConfig(n_subsamples=1000, seed=seed))
        beta_err.append(float(np.max(np.abs(f.beta_mm - PAPER_MM))))
        lm = lm_diag_test(gdata, "MM", N=1000, seed=seed, fit=f)
        lr = lr_test_coef(gdata, rs, "MM", N=1000, seed=seed, fit=f)
        lms.append(lm.statistic)
        lams.append(lr.statistic)
        p_lm.append(lm.p_bootstrap)
        p_lam.append(lr.p_bootstrap)
    dt = time.perf_counter() - t0
    checks = {
        "beta": max(beta_err) <= 0.02,
        "LM": all(abs(v - 14.825) <= 0.5 for v in lms),
        "Lambda": all(abs(v - 7.255) <= 0.3 for v in lams),
        "p_LM": all(abs(v - 0.019) <= 0.03 for v in p_lm),
        "p_Lambda": all(abs(v - 0.086) <= 0.03 for v in p_lam),
        "runtime": dt < 120,
    }
    ok = all(checks.values())
    record(2, ok, f"max|beta-table|={max(beta_err):.4f} LM={np.round(lms, 3).tolist()} "
                  f"Lambda={np.round(lams, 3).tolist()} pLM={np.round(p_lm, 3).tolist()} "
                  f"pLambda={np.round(p_lam, 3).tolist()} time={dt:.0f}s "
                  f"failed={[k for k, v in checks.items() if not v]}")
    assert ok, checks


# --------------------------------------------------------------------------
# 3. fast and robust bootstrap gates


def _generic_instance(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 4))
    n = int(rng.integers(20, 51))
    p_j = tuple(int(v) for v in rng.integers(1, 4, size=m))
    d = random_sur(n=n, m=m, p_j=p_j, seed=seed, tau=0.3 if m > 1 else 0.0)
    f = robust.fit(d, FitConfig(n_subsamples=200, seed=0))
    th = ThetaVector.from_fit(f)
    A = np.eye(m) + 0.05 * rng.standard_normal((m, m))
    th_off = ThetaVector(th.beta_mm + 0.05 * rng.standard_normal(th.k),
                         phi(A.T @ th.Gamma_mm @ A), A @ th.Sigma_s @ A.T,
                         th.beta_s + 0.05 * rng.standard_normal(th.k))
    return d, f, th, th_off


def test_c3_frb_gates(gdata):
    t0 = time.perf_counter()
    fixed, grad, ident = [], [], []
    fits = [(gdata, robust.fit(gdata, FitConfig(n_subsamples=1000, seed=0)))]
    for seed in range(20):
        d, f, th, th_off = _generic_instance(seed)
        fits.append((d, f))
        J = grad_g(th_off, d, f.tuning)
        Jn = numeric_grad_g(th_off, d, f.tuning)
        grad.append(float(np.max(np.abs(J - Jn)) / np.max(np.abs(J))))
    for d, f in fits:
        th = ThetaVector.from_fit(f)
        v = th.pack()
        fixed.append(float(np.max(np.abs(g_eval(th, d, f.tuning).pack() - v) / (1 + np.abs(v)))))
        reps = frb_replicates(f, d, 1, indices=np.arange(d.n)[None])
        ident.append(float(np.max(np.abs(reps.replicates[0] - reps.theta_hat))
                           / (1 + np.max(np.abs(reps.theta_hat)))))
    dt = time.perf_counter() - t0
    checks = {"fixed_point": max(fixed) < 1e-8, "grad": max(grad) < 1e-4,
              "identity": max(ident) < 1e-8, "runtime": dt < 60}
    ok = all(checks.values())
    record(3, ok, f"fixed point {max(fixed):.1e}, grad rel {max(grad):.1e}, "
                  f"identity {max(ident):.1e} over {len(fits)} fits, time={dt:.0f}s")
    assert ok, checks


# --------------------------------------------------------------------------
# 4. tuning constants against Monte Carlo


def test_c4_tuning_oracles():
    t0 = time.perf_counter()
    c0, c1 = tune_breakdown(0.5, 1), tune_efficiency(0.95, 1)
    e0 = abs(c0 - oracles.mc_breakdown_tuning(0.5, 1))
    e1 = abs(c1 - oracles.mc_efficiency_tuning(0.95, 1))
    zmax = 0.0
    for m in (1, 3):
        t = tuning_for(m)
        ac = asymptotic_constants(t.rho0, t.rho1, m)
        for name, (mean, se) in oracles.mc_constants(t.c0, t.c1, m).items():
            zmax = max(zmax, abs(getattr(ac, name) - mean) / se)
    dt = time.perf_counter() - t0
    checks = {"c0": abs(c0 - 1.5476) < 1e-3 and e0 < 1e-3,
              "c1": abs(c1 - 4.685) < 1e-3 and e1 < 1e-3,
              "constants": zmax < 3, "runtime": dt < 60}
    ok = all(checks.values())
    record(4, ok, f"c0={c0:.6f} (|oracle diff| {e0:.1e}) c1={c1:.6f} (|oracle diff| {e1:.1e}) "
                  f"max |z| constants={zmax:.2f} time={dt:.0f}s")
    assert ok, checks


# --------------------------------------------------------------------------
# 5-7. desk-scale simulations

DESK = dict(n=100, repetitions=300, N_bootstrap=500)
LEVEL_BAND = (0.02, 0.09)


def test_c5_level(cache_dir):
    t0 = time.perf_counter()
    lines, ok = [], True
    for cont in (0.0, 0.1):
        spec = ScenarioSpec(d=0.0, tau=0.0, contamination=cont, **DESK)
        for r in run_level_power([spec], ["Lambda_MM", "LM_MM"], out_dir=cache_dir):
            inside = LEVEL_BAND[0] <= r.rate <= LEVEL_BAND[1]
            ok &= inside
            lines.append(f"{r.quantity}@{cont:.0%}={r.rate:.3f}({r.repetitions})")
    record(5, ok, f"{' '.join(lines)} band={LEVEL_BAND} time={time.perf_counter() - t0:.0f}s")
    assert ok


def test_c6_power_contrast(cache_dir):
    lam = ScenarioSpec(d=0.4, tau=0.5, contamination=0.1, **DESK)
    lm = ScenarioSpec(d=0.0, tau=0.4, contamination=0.1, **DESK)
    r1 = {r.quantity: r.rate for r in
          run_level_power([lam], ["Lambda_MM", "Lambda_MLE"], out_dir=cache_dir)}
    r2 = {r.quantity: r.rate for r in
          run_level_power([lm], ["LM_MM", "LM_MLE"], out_dir=cache_dir)}
    gap = r1["Lambda_MM"] - r1["Lambda_MLE"]
    checks = {"Lambda": gap >= 0.3, "LM": r2["LM_MM"] > r2["LM_MLE"]}
    ok = all(checks.values())
    record(6, ok, f"Lambda_MM={r1['Lambda_MM']:.3f} Lambda_MLE={r1['Lambda_MLE']:.3f} "
                  f"(gap {gap:.3f}, need >= 0.3); LM_MM={r2['LM_MM']:.3f} "
                  f"LM_MLE={r2['LM_MLE']:.3f}")
    assert ok, checks


def test_c7_coverage(cache_dir):
    spec = ScenarioSpec(d=0.0, contamination=0.0, **DESK)
    r = run_coverage([spec], ["BP"], out_dir=cache_dir)[0]
    rel = abs(r.mean_length - 0.362) / 0.362
    checks = {"coverage": 0.92 <= r.rate <= 0.975, "length": rel <= 0.15}
    ok = all(checks.values())
    record(7, ok, f"BP coverage={r.rate:.3f} mean length={r.mean_length:.4f} "
                  f"({rel:.1%} from 0.362) reps={r.repetitions}")
    assert ok, checks


# --------------------------------------------------------------------------
# 8. degenerate inputs


def _perfect_fit():
    x = np.arange(30.0)
    X = np.column_stack([np.ones(30), x])
    return SurDataset(((X, 1 + 2 * x), (X, 3 - x)))


def _wide_design():
    # m = 4 equations with n = 3 observations and one shared coefficient
    return Design(np.ones((3, 4, 1)), np.arange(12.0).reshape(3, 4))


def _collinear():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(10)
    return SurDataset(((np.column_stack([np.ones(10), z, z]), rng.standard_normal(10)),))


def _one_row_resample():
    d = random_sur(n=30, m=2, p_j=(2, 2), seed=3)
    f = robust.fit(d, FitConfig(n_subsamples=100, seed=0))
    counts = np.zeros(d.n)
    counts[0] = 1
    g_eval(ThetaVector.from_fit(f), d, f.tuning, counts=counts)


ERROR_PATHS = {
    "exact fit": (lambda: robust.fit(_perfect_fit(), FitConfig(n_subsamples=50)), ExactFitError),
    "m >= n": (lambda: mle_fit(_wide_design()), SingularCovarianceError),
    "too few rows": (lambda: robust.fit(_wide_design()), DegenerateDesignError),
    "rank deficient": (lambda: ols_per_block(_collinear()), RankDeficiencyError),
    "singular resample": (_one_row_resample, SingularResampleError),
    "few replicates": (lambda: ci_percentile(np.zeros(10), 0, estimate=0.0),
                       InsufficientReplicatesError),
    "negative distance": (lambda: m_scale(np.array([1.0, -1.0]), RhoSpec(1.5), 0.5),
                          NumericFailure),
    "shape mismatch": (lambda: gls(random_sur(seed=1), np.eye(2)), DimensionError),
    "bad config": (lambda: FitConfig(n_subsamples=0), ConfigError),
}


def test_c8_degenerate_inputs():
    outcome = {}
    for name, (call, exc) in ERROR_PATHS.items():
        try:
            call()
            outcome[name] = "no error"
        except exc:
            outcome[name] = "ok"
        except Exception as e:          # wrong class
            outcome[name] = type(e).__name__
    bad = {k: v for k, v in outcome.items() if v != "ok"}
    ok = not bad
    record(8, ok, f"{len(outcome) - len(bad)}/{len(outcome)} error paths raise the "
                  f"expected class" + (f"; wrong: {bad}" if bad else ""))
    assert ok, bad
