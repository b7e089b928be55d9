"""Grunfeld investment data: Gaussian versus robust SUR, tests, intervals, outliers.

Run with ``python3 demos/grunfeld_walkthrough.py``; takes a few seconds.
"""

import numpy as np

from robsur import robust
from robsur.diagnostics import BAD_LEVERAGE, VERTICAL, diagnose
from robsur.inference import (frb_intervals, lm_diag_test, lm_test_mle, lr_test_coef,
                              lr_test_mle, parse_restriction)
from robsur.io import grunfeld
from robsur.model import mle_fit

np.set_printoptions(precision=3, suppress=True)

data, years = grunfeld(with_years=True)
labels = data.coef_labels()
print(f"n={data.n} years, m={data.m} firms, p={data.p} coefficients\n")

mle = mle_fit(data)
fit = robust.fit(data, robust.FitConfig(n_subsamples=1000, seed=0))
print(f"{'coefficient':<16}{'MLE':>10}{'MM':>10}")
for lab, a, b in zip(labels, mle.beta, fit.beta_mm):
    print(f"{lab:<16}{a:>10.3f}{b:>10.3f}")

print("\nerror correlations (MLE then MM)")
print(mle.correlation)
S = fit.mm.Sigma
print(S / np.sqrt(np.outer(np.diag(S), np.diag(S))))

# are the errors correlated across firms?
print("\ndiagonal-covariance tests")
for res in (lm_test_mle(data), lm_diag_test(data, "MM", N=1000, seed=0, fit=fit)):
    print(f"  {res.name:<8} stat={res.statistic:7.3f}  p_asym={res.p_asymptotic:.2g}"
          f"  p_boot={'-' if res.p_bootstrap is None else round(res.p_bootstrap, 3)}")

# do GE and W share their slopes?
rs = parse_restriction(["equal 1:Shares 2:Shares", "equal 1:Capital 2:Capital"], data)
print("\nequal-slope tests for GE and W")
for res in (lr_test_mle(data, rs), lr_test_coef(data, rs, "MM", N=1000, seed=0, fit=fit)):
    print(f"  {res.name:<10} stat={res.statistic:7.3f}  p_asym={res.p_asymptotic:.2g}"
          f"  p_boot={'-' if res.p_bootstrap is None else round(res.p_bootstrap, 3)}")

print("\n95% intervals for the MM slopes")
for ci in frb_intervals(fit, data, N=1000, seed=0, methods=("AS", "BP", "BCa")):
    if "Intercept" not in ci.parameter:
        print(f"  {ci.parameter:<14} {ci.method:<4} [{ci.lower:8.3f}, {ci.upper:8.3f}]")

rep = diagnose(fit, data, labels=years)
print(f"\ncutoffs: residual {rep.residual_cutoff:.2f}, predictor {rep.predictor_cutoff:.2f}")
for cls in (VERTICAL, BAD_LEVERAGE):
    print(f"  {cls}: {[r.label for r in rep.flagged(cls)]}")
