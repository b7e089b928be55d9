import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robsur import inference, robust
from robsur.errors import ConfigError, InsufficientReplicatesError
from robsur.inference import (CiResult, bootstrap_pvalue, ci_asymptotic, ci_percentile,
                              frb_intervals, lm_diag_test, lm_test_mle, lr_test_coef,
                              lr_test_mle, parse_restriction, weighted_correlation)
from robsur.robust import FitConfig, RestrictionSpec

from conftest import GRUNFELD_EQUAL, random_sur

FAST = FitConfig(n_subsamples=200, seed=0)

# n = 20 Grunfeld resamples often give non positive definite linearized scatters
pytestmark = pytest.mark.filterwarnings("ignore:degenerate bootstrap:RuntimeWarning")


@pytest.fixture(scope="module")
def g_equal(gdata):
    return parse_restriction(GRUNFELD_EQUAL, gdata)


def test_parse_restriction(gdata):
    rs = parse_restriction(GRUNFELD_EQUAL, gdata)
    assert rs.R.shape == (2, 9)
    assert list(rs.R[0]) == [0, 1, 0, 0, -1, 0, 0, 0, 0]
    assert list(rs.R[1]) == [0, 0, 1, 0, 0, -1, 0, 0, 0]
    a = parse_restriction("coef W:Capital = 0.1", gdata)
    b = parse_restriction("coef block:2 var:2 = 0.1", gdata)
    assert np.array_equal(a.R, b.R) and a.q[0] == 0.1 and a.R[0, 5] == 1
    for bad in ["equal GE:Shares", "coef XX:Shares = 0", "coef GE:Nope = 0",
                "coef GE:Shares = abc", "foo GE:Shares", "equal GE:Shares GE:Shares"]:
        with pytest.raises(ConfigError):
            parse_restriction(bad, gdata)


def test_classical_grunfeld_tests(gdata, g_equal):
    lm = lm_test_mle(gdata)
    assert lm.statistic == pytest.approx(23.482, abs=0.0005)
    assert lm.df == 3 and lm.p_asymptotic <= 0.001
    lr = lr_test_mle(gdata, g_equal)
    assert lr.statistic == pytest.approx(6.728, abs=0.0005)
    assert round(lr.p_asymptotic, 3) == 0.035


def test_classical_bootstrap_pvalues(gdata, g_equal):
    lm = lm_test_mle(gdata, N=500, seed=1)
    assert lm.p_bootstrap < 0.02
    lr = lr_test_mle(gdata, g_equal, N=300, seed=1)
    assert 0.05 < lr.p_bootstrap < 0.35


def test_lm_mm_grunfeld(gdata, gfit):
    res = lm_diag_test(gdata, "MM", N=1000, seed=0, fit=gfit)
    assert res.statistic == pytest.approx(14.825, abs=0.001)
    assert res.p_asymptotic == pytest.approx(0.003, abs=0.0005)
    assert abs(res.p_bootstrap - 0.019) <= 0.03


def test_lm_mm_same_from_local_solution(gdata, gfit_local):
    res = lm_diag_test(gdata, "MM", N=0, fit=gfit_local)
    assert res.statistic == pytest.approx(14.825, abs=0.001)
    assert res.p_asymptotic == pytest.approx(0.003, abs=0.0005)


def test_lambda_mm_from_local_solution(gdata, gfit_local, g_equal):
    res = lr_test_coef(gdata, g_equal, "MM", N=1000, seed=0, fit=gfit_local)
    assert res.statistic == pytest.approx(7.255, abs=0.01)
    assert res.p_asymptotic == pytest.approx(0.057, abs=0.001)
    assert abs(res.p_bootstrap - 0.086) <= 0.03


def test_asymptotic_interval_grunfeld(gdata, gfit, gfit_local):
    for f in (gfit, gfit_local):
        ci = {c.parameter: c for c in ci_asymptotic(f, gdata)}["GE:Capital"]
        assert round(ci.lower, 3) == pytest.approx(0.117, abs=0.0011)
        assert round(ci.upper, 3) == pytest.approx(0.187, abs=0.0011)


def test_bootstrap_intervals_grunfeld_local(gdata, gfit_local):
    lo_bp, hi_bp, lo_bca, hi_bca = [], [], [], []
    for seed in range(5):
        cis = frb_intervals(gfit_local, gdata, N=1000, seed=seed, methods=("BP", "BCa"))
        by = {(c.parameter, c.method): c for c in cis}
        lo_bp.append(by["W:Capital", "BP"].lower)
        hi_bp.append(by["W:Capital", "BP"].upper)
        lo_bca.append(by["W:Capital", "BCa"].lower)
        hi_bca.append(by["W:Capital", "BCa"].upper)
    assert abs(np.median(lo_bp) + 0.117) < 0.03 and abs(np.median(hi_bp) - 0.282) < 0.03
    assert abs(np.median(lo_bca) + 0.123) < 0.03 and abs(np.median(hi_bca) - 0.280) < 0.03


def test_w_capital_significance_flips(gdata, gfit):
    cis = frb_intervals(gfit, gdata, N=1000, seed=0)
    by = {(c.parameter, c.method): c for c in cis}
    assert not by["W:Capital", "AS"].covers(0.0)
    assert by["W:Capital", "BP"].covers(0.0)
    assert by["W:Capital", "BCa"].covers(0.0)
    assert len(cis) == 27


def test_lambda_zero_when_restriction_holds_at_estimate():
    d = random_sur(n=60, seed=12)
    f = robust.fit(d, FAST)
    R = np.zeros((1, d.p))
    R[0, 2] = 1.0
    rs = RestrictionSpec(R=R, q=[f.beta_s[2]])
    res = lr_test_coef(d, rs, "S", N=0, fit=f)
    assert res.statistic == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("kind", ["S", "MM"])
def test_statistics_invariant_to_block_rescaling(kind):
    d = random_sur(n=60, seed=21)
    R = np.zeros((1, d.p))
    R[0, 1], R[0, 3] = 1, -1
    rs = RestrictionSpec(R=R)
    A = np.diag([3.0, 0.2, 7.0])
    d2 = d.with_Y(d.Y @ A)
    # rescaling changes the restriction's meaning unless the two coefficients share a scale
    A_eq = np.diag([3.0, 3.0, 7.0])
    d3 = d.with_Y(d.Y @ A_eq)
    lm1 = lm_diag_test(d, kind, N=0, config=FAST)
    lm2 = lm_diag_test(d2, kind, N=0, config=FAST)
    assert lm2.statistic == pytest.approx(lm1.statistic, rel=1e-6)
    l1 = lr_test_coef(d, rs, kind, N=0, config=FAST)
    l3 = lr_test_coef(d3, rs, kind, N=0, config=FAST)
    assert l3.statistic == pytest.approx(l1.statistic, rel=1e-5, abs=1e-8)


def test_skipped_replicates_are_reported(gdata, gfit):
    with pytest.warns(RuntimeWarning, match="degenerate bootstrap"):
        res = lm_diag_test(gdata, "MM", N=200, seed=0, fit=gfit)
    assert res.warning and res.n_effective < res.n_requested == 200


def test_lm_test_null_replicates_near_nominal():
    d = random_sur(n=80, seed=5, tau=0.0)
    res = lm_diag_test(d, "MM", N=300, seed=0, config=FAST)
    q95 = np.quantile(res.replicate_statistics, 0.95)
    assert 4.0 < q95 < 12.0
    assert res.n_effective == 300


def test_weighted_correlation():
    rng = np.random.default_rng(0)
    E = rng.standard_normal((50, 3))
    w = np.ones(50)
    C = weighted_correlation(E, w)
    # uncentered correlation (robust residuals have location zero)
    S = E.T @ E
    s = np.sqrt(np.diag(S))
    assert np.allclose(C, S / np.outer(s, s))


def test_bootstrap_pvalue():
    assert bootstrap_pvalue(1.0, [0.5, 2.0, 3.0]) == pytest.approx(3 / 5)
    assert bootstrap_pvalue(10.0, np.zeros(98)) == pytest.approx(1 / 100)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 0.99))
def test_percentile_interval_properties(seed, level):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(400)
    bp = ci_percentile(x, 0, level, "BP", estimate=0.0)
    wider = ci_percentile(x, 0, min(0.995, level + 0.004), "BP", estimate=0.0)
    assert bp.lower <= bp.upper
    assert wider.lower <= bp.lower and wider.upper >= bp.upper
    # median-unbiased estimate with no acceleration: BCa equals BP up to the z0 estimate
    bca = ci_percentile(x, 0, level, "BCa", estimate=float(np.median(x)))
    assert bca.lower == pytest.approx(bp.lower, abs=0.1)


def test_interval_errors():
    with pytest.raises(ConfigError):
        CiResult("b", 0.0, -1.0, 1.0, "AS", 1.5)
    with pytest.raises(ConfigError):
        CiResult("b", 0.0, -1.0, 1.0, "XX", 0.9)
    with pytest.raises(InsufficientReplicatesError):
        ci_percentile(np.zeros(50), 0, 0.95, "BP", estimate=0.0)
    with pytest.raises(ConfigError):
        ci_percentile(np.zeros(200), 0, 0.95, "ZZ", estimate=0.0)


def test_report_serialization(gdata, gfit, tmp_path):
    res = lm_diag_test(gdata, "MM", N=200, seed=0, fit=gfit)
    d = res.as_dict()
    assert d["test"] == "LM_MM" and "replicate_quantiles" in d
    assert '"LM_MM"' in res.to_json()
    res.to_csv(tmp_path / "lm.csv")
    assert len((tmp_path / "lm.csv").read_text().splitlines()) == res.n_effective + 1
