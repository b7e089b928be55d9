"""Confidence intervals and hypothesis tests.

* asymptotic (AS), bootstrap percentile (BP) and BCa intervals for the MM
  regression coefficients, the latter two from FRB replicates;
* likelihood-ratio type tests of ``R beta = q`` based on the S-scale or the
  efficient MM-scale;
* robust Breusch-Pagan (LM) tests of a diagonal error covariance;
* their classical Gaussian counterparts.

Bootstrap p-values follow ``(#{T* > T} + 1) / (N + 2)`` with ties counted as
non-exceedances. Asymptotic p-values use a scaled chi-squared law whose
scaling constant is estimated from the empirical residual distances.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy import stats

from . import robust
from .errors import ConfigError, InsufficientReplicatesError, NumericFailure, RobSurError
from .frb import (FRBEngine, ThetaVector, _skip_report, counts_from_indices,
                  draw_resamples, frb_replicates)
from .model import SurDataset, as_design, mle_fit
from .rho import AsymptoticConstants, TuningConstants, empirical_constants, tuning_for
from .robust import (DIAGONAL, FitConfig, RestrictionSpec, RobustFit, m_scale,
                     mahalanobis_sq, mm_scale_value)

log = logging.getLogger(__name__)

METHODS = ("AS", "BP", "BCa")


# --------------------------------------------------------------------------
# result containers


@dataclass
class CiResult:
    parameter: str
    estimate: float
    lower: float
    upper: float
    method: str
    level: float

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ConfigError(f"confidence level must lie in (0, 1), got {self.level}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown interval method {self.method!r}")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def as_dict(self) -> dict:
        return {"parameter": self.parameter, "method": self.method, "level": self.level,
                "estimate": self.estimate, "lower": self.lower, "upper": self.upper}


@dataclass
class TestResult:
    name: str
    statistic: float
    df: int
    factor: float                       # chi-squared scaling of the asymptotic law
    p_asymptotic: float
    p_bootstrap: Optional[float] = None
    n_effective: int = 0
    n_requested: int = 0
    replicate_statistics: np.ndarray = field(default_factory=lambda: np.empty(0))
    warning: Optional[str] = None
    details: dict = field(default_factory=dict)

    __test__ = False                    # not a pytest class

    def as_dict(self) -> dict:
        out = {"test": self.name, "statistic": self.statistic, "df": self.df,
               "factor": self.factor, "p_asymptotic": self.p_asymptotic,
               "p_bootstrap": self.p_bootstrap, "N_effective": self.n_effective,
               "N_requested": self.n_requested}
        r = self.replicate_statistics
        if r.size:
            qs = (0.5, 0.9, 0.95, 0.99)
            out["replicate_quantiles"] = {str(q): float(np.quantile(r, q)) for q in qs}
        if self.warning:
            out["warning"] = self.warning
        out.update({k: v for k, v in self.details.items()})
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), default=_json_default)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replicate", self.name])
            for b, v in enumerate(self.replicate_statistics):
                w.writerow([b, repr(float(v))])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def bootstrap_pvalue(stat: float, replicates) -> float:
    r = np.asarray(replicates, dtype=float)
    return float((np.sum(r > stat) + 1) / (r.size + 2))


# --------------------------------------------------------------------------
# confidence intervals


def _z(level: float) -> float:
    return float(stats.norm.ppf(0.5 + level / 2))


def coefficient_asv(fit: RobustFit, data, constants: Optional[AsymptoticConstants] = None):
    """Estimated asymptotic covariance ``alpha1/(m eta1^2) E[x' Sigma^-1 x]^-1`` of the MM coefficients."""
    design = fit.param.design(as_design(data))
    m = design.m
    Sigma = fit.mm.Sigma
    if constants is None:
        E = design.residuals(fit.mm.beta)
        d = np.sqrt(np.maximum(mahalanobis_sq(E, np.linalg.inv(Sigma)), 0.0))
        t = fit.tuning
        constants = empirical_constants(d, t.rho0, t.rho1, m, t.delta0, t.delta1)
    Sinv = np.linalg.inv(Sigma)
    info = np.einsum("iap,ab,ibq->pq", design.x, Sinv, design.x) / design.n
    try:
        info_inv = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("empirical information matrix is singular") from exc
    return constants.alpha1 / (m * constants.eta1 ** 2) * info_inv


def ci_asymptotic(fit: RobustFit, data, constants: Optional[AsymptoticConstants] = None,
                  level: float = 0.95, labels: Optional[Sequence[str]] = None,
                  asv=None) -> list:
    """Normal-theory intervals ``beta_hat +- z sqrt(ASV / n)``.

    By default the constants are estimated from the empirical distances;
    pass quadrature ``constants`` to use their values at the normal model.
    """
    n = as_design(data).n
    if asv is None:
        asv = coefficient_asv(fit, data, constants)
    beta = fit.mm.beta
    labels = _coef_labels(data, beta.size, labels)
    se = np.sqrt(np.maximum(np.diag(np.asarray(asv, float)), 0.0) / n)
    z = _z(level)
    return [CiResult(labels[j], float(beta[j]), float(beta[j] - z * se[j]),
                     float(beta[j] + z * se[j]), "AS", level) for j in range(beta.size)]


def _coef_labels(data, k, labels):
    if labels is not None:
        return list(labels)
    if isinstance(data, SurDataset) and data.p == k:
        return data.coef_labels()
    return [f"b{j}" for j in range(k)]


def _order_stat(x, prob):
    """Order statistic at position ``(N+1) prob`` (linear interpolation, clamped)."""
    return float(np.quantile(x, np.clip(prob, 0.0, 1.0), method="weibull"))


def bca_acceleration(jackknife) -> float:
    """Acceleration from leave-one-out values of one parameter."""
    j = np.asarray(jackknife, dtype=float)
    dev = j.mean() - j
    den = 6.0 * np.sum(dev ** 2) ** 1.5
    return float(np.sum(dev ** 3) / den) if den > 0 else 0.0


def ci_percentile(replicates, parameter: int, level: float = 0.95, method: str = "BP",
                  *, estimate: Optional[float] = None, acceleration: float = 0.0,
                  label: Optional[str] = None, min_replicates: int = 100) -> CiResult:
    """Percentile (BP) or bias-corrected and accelerated (BCa) interval.

    ``replicates`` is a :class:`~robsur.frb.ReplicateSet` or a plain array of
    replicate values for the parameter.
    """
    if hasattr(replicates, "replicates"):
        x = replicates.column(parameter)
        if estimate is None:
            estimate = float(replicates.theta_hat[parameter])
        if label is None and replicates.labels:
            label = replicates.labels[parameter]
    else:
        x = np.asarray(replicates, dtype=float)
        if x.ndim == 2:
            x = x[:, parameter]
    if estimate is None:
        raise ConfigError("an estimate is needed for the percentile interval")
    N = x.size
    if N < min_replicates:
        raise InsufficientReplicatesError(f"need at least {min_replicates} replicates, got {N}")
    alpha = 1.0 - level
    aL, aR = alpha / 2, 1 - alpha / 2
    if method == "BCa":
        frac = np.mean(x < estimate)
        frac = min(max(frac, 0.5 / N), 1 - 0.5 / N)
        z0 = stats.norm.ppf(frac)
        a = acceleration

        def adj(p):
            zp = z0 + stats.norm.ppf(p)
            return float(stats.norm.cdf(z0 + zp / (1 - a * zp)))

        aL, aR = adj(aL), adj(aR)
    elif method != "BP":
        raise ConfigError(f"percentile method must be BP or BCa, got {method!r}")
    lo, hi = _order_stat(x, aL), _order_stat(x, aR)
    return CiResult(label or f"theta{parameter}", float(estimate), lo, hi, method, level)


def jackknife_replicates(fit: RobustFit, data) -> np.ndarray:
    """One-step FRB leave-one-out approximations, one row per deleted observation."""
    engine = FRBEngine(fit, data)
    n = engine.design.n
    C = np.ones((n, n)) - np.eye(n)
    R, ok = engine.replicates_from_counts(C)
    return R[ok]


def frb_intervals(fit: RobustFit, data, N: int = 1000, seed: int = 0, level: float = 0.95,
                  methods: Sequence[str] = METHODS, constants=None, replicates=None,
                  labels=None) -> list:
    """Intervals for every MM coefficient with the requested methods."""
    k = fit.mm.beta.size
    labels = _coef_labels(data, k, labels)
    out = []
    if "AS" in methods:
        out.extend(ci_asymptotic(fit, data, constants, level, labels))
    if "BP" in methods or "BCa" in methods:
        if replicates is None:
            replicates = frb_replicates(fit, data, N, seed, coef_labels=labels)
        jack = jackknife_replicates(fit, data) if "BCa" in methods else None
        for j in range(k):
            if "BP" in methods:
                out.append(ci_percentile(replicates, j, level, "BP", label=labels[j]))
            if "BCa" in methods:
                a = bca_acceleration(jack[:, j])
                out.append(ci_percentile(replicates, j, level, "BCa", acceleration=a,
                                         label=labels[j]))
    order = {lab: i for i, lab in enumerate(labels)}
    out.sort(key=lambda c: (order.get(c.parameter, 0), METHODS.index(c.method)))
    return out


# --------------------------------------------------------------------------
# restriction shorthand


def _resolve_coef(token: str, data: SurDataset) -> int:
    try:
        b, v = token.split(":", 1)
    except ValueError:
        raise ConfigError(f"coefficient reference {token!r} must look like block:variable") from None
    b, v = b.strip(), v.strip()
    names = list(data.block_names)
    if b in names:
        j = names.index(b)
    elif b.isdigit() and 1 <= int(b) <= data.m:
        j = int(b) - 1
    else:
        raise ConfigError(f"unknown block {b!r} (blocks: {names} or 1..{data.m})")
    preds = list(data.predictor_names[j])
    if v in preds:
        kk = preds.index(v)
    elif v.isdigit() and int(v) < len(preds):
        kk = int(v)
    else:
        raise ConfigError(f"unknown variable {v!r} in block {names[j]!r} (variables: {preds})")
    return int(data.offsets[j] + kk)


_COEF_RE = re.compile(r"^coef\s+(?:block:)?(\S+?)\s+(?:var:)?(\S+)\s*=\s*(\S+)$")
_COEF2_RE = re.compile(r"^coef\s+(\S+:\S+)\s*=\s*(\S+)$")


def parse_restriction(specs, data: SurDataset) -> RestrictionSpec:
    """Build ``R beta = q`` from shorthand strings.

    ``"equal A:x B:y"`` sets the two coefficients equal; ``"coef A:x = v"``
    (or ``"coef block:A var:x = v"``) fixes one coefficient. Blocks are named
    or numbered from 1; variables are named or indexed from 0 (intercept first).
    """
    if isinstance(specs, str):
        specs = [specs]
    rows, qs = [], []
    p = data.p
    for s in specs:
        s = " ".join(str(s).split())
        row = np.zeros(p)
        if s.startswith("equal "):
            toks = s.split()[1:]
            if len(toks) != 2:
                raise ConfigError(f"'equal' needs two coefficients: {s!r}")
            row[_resolve_coef(toks[0], data)] += 1.0
            row[_resolve_coef(toks[1], data)] -= 1.0
            q = 0.0
        elif s.startswith("coef "):
            m2 = _COEF2_RE.match(s)
            m1 = _COEF_RE.match(s)
            if m2:
                ref, val = m2.group(1), m2.group(2)
            elif m1:
                ref, val = f"{m1.group(1)}:{m1.group(2)}", m1.group(3)
            else:
                raise ConfigError(f"cannot parse restriction {s!r}")
            row[_resolve_coef(ref, data)] = 1.0
            try:
                q = float(val)
            except ValueError:
                raise ConfigError(f"restriction value {val!r} is not numeric") from None
        else:
            raise ConfigError(f"restriction must start with 'equal' or 'coef': {s!r}")
        if not np.any(row):
            raise ConfigError(f"restriction {s!r} is vacuous")
        rows.append(row)
        qs.append(q)
    if not rows:
        raise ConfigError("no restriction given")
    return RestrictionSpec(R=np.array(rows), q=np.array(qs))


# --------------------------------------------------------------------------
# scale functionals on (re)samples


def _shape(A):
    """Batched ``|A|^{-1/m} A``; rows that are not PD come back flagged."""
    m = A.shape[-1]
    sign, logdet = np.linalg.slogdet(A)
    ok = sign > 0
    G = A * np.exp(-np.where(ok, logdet, 0.0) / m)[..., None, None]
    return G, ok


def _scale_functional(design, R, counts, tuning: TuningConstants, k: int, kind: str):
    """``s~`` (kind S) or ``s^`` (kind MM) at each replicate of theta, on its resample."""
    m = design.m
    th = ThetaVector.unpack(R, k, m)
    ok = np.all(np.isfinite(R), axis=1)
    Gs, ok_s = _shape(np.where(ok[:, None, None], th.Sigma_s, np.eye(m)))
    ok &= ok_s
    Gs = np.where(ok[:, None, None], Gs, np.eye(m))
    Es = design.y[None] - np.einsum("imp,kp->kim", design.x, np.where(ok[:, None], th.beta_s, 0))
    ds = np.sqrt(np.maximum(mahalanobis_sq(Es, np.linalg.inv(Gs)), 0.0))
    s = m_scale(ds, tuning.rho0, tuning.delta0, weights=counts, raise_on_exact=False)
    ok &= s > 0
    if kind == "S":
        return s, ok
    Gm, ok_m = _shape(np.where(ok[:, None, None], th.Gamma_mm, np.eye(m)))
    ok &= ok_m
    Gm = np.where(ok[:, None, None], Gm, np.eye(m))
    Em = design.y[None] - np.einsum("imp,kp->kim", design.x, np.where(ok[:, None], th.beta_mm, 0))
    dm = np.sqrt(np.maximum(mahalanobis_sq(Em, np.linalg.inv(Gm)), 0.0))
    s_safe = np.where(ok, s, 1.0)
    sh = mm_scale_value(dm / s_safe[:, None], s_safe, tuning.rho1, tuning.delta1, weights=counts)
    return sh, ok


def _kind(stat_kind: str) -> str:
    k = str(stat_kind).upper()
    if k not in ("S", "MM"):
        raise ConfigError(f"stat_kind must be 'S' or 'MM', got {stat_kind!r}")
    return k


# --------------------------------------------------------------------------
# likelihood-ratio type tests for R beta = q


def _full_with_starts(data, config, tuning, starts, restriction=None):
    return robust.fit(data, config, tuning, restriction=restriction, starts=starts)


def _mm_from(data, fit: RobustFit, beta, Gamma) -> robust.MMEstimate:
    """MM iteration in ``fit``'s model started at ``(beta, Gamma)`` with ``fit``'s S-scale."""
    design = fit.param.design(as_design(data))
    s0 = robust.SEstimate(beta=fit.param.from_beta(beta), Sigma=fit.s.Sigma, scale=fit.s.scale,
                          Gamma=Gamma, weights=fit.s.weights, distances=fit.s.distances)
    return robust.mm_estimate(design, s0, fit.tuning.rho1, delta1=fit.tuning.delta1,
                              diagonal=fit.diagonal)


def _consistent_fits(data, full: RobustFit, restricted: RobustFit, config, tuning,
                     restriction):
    """Guard against local optima that would make the statistic negative.

    The full model nests the restricted one, so at global optima
    ``s~ <= s~_r`` and, because ``s^2 rho(u/s)`` is nondecreasing in ``s``,
    also ``s^ <= s^_r``.
    """
    if restricted.s.scale < full.s.scale:
        log.info("restricted S-scale below full S-scale; refitting the full model")
        refit = _full_with_starts(data, config, tuning,
                                  [full.beta_s, (restricted.beta_s, restricted.s.Sigma)])
        if refit.s.scale < full.s.scale:
            full = refit
    if restricted.mm.scale < full.mm.scale:
        log.info("restricted MM-scale below full MM-scale; restarting the full MM step")
        alt = _mm_from(data, full, restricted.beta_mm, restricted.mm.Gamma)
        if alt.objective < full.mm.objective:
            full = RobustFit(full.s, alt, full.tuning, full.param, full.config)
    return full


def lr_test_coef(data, restriction: RestrictionSpec, stat_kind: str = "MM", N: int = 1000,
                 seed: int = 0, config: FitConfig = FitConfig(),
                 tuning: Optional[TuningConstants] = None, *, fit: Optional[RobustFit] = None,
                 restricted: Optional[RobustFit] = None,
                 constants: Optional[AsymptoticConstants] = None) -> TestResult:
    """Robust likelihood-ratio type test of ``R beta = q`` (``Lambda_S`` or ``Lambda_MM``)."""
    kind = _kind(stat_kind)
    if restriction.kind != robust.LINEAR:
        raise ConfigError("lr_test_coef needs a linear coefficient restriction")
    design = as_design(data)
    n, m = design.n, design.m
    tuning = tuning or (fit.tuning if fit is not None else tuning_for(m))
    full = fit or robust.fit(data, config, tuning)
    if restricted is None:
        restricted = robust.fit(data, config, tuning, restriction=restriction,
                                starts=[(full.beta_s, full.s.Sigma), (full.beta_mm, full.mm.Sigma)])
    full = _consistent_fits(data, full, restricted, config, tuning, restriction)

    def stat_from(f_full, f_r):
        if kind == "S":
            return -2 * n * m * np.log(f_full.s.scale / f_r.s.scale)
        return -2 * n * m * np.log(f_full.mm.scale / f_r.mm.scale)

    lam = float(stat_from(full, restricted))
    if lam < 0:
        log.warning("likelihood-ratio statistic %.3g < 0 after safeguards; set to 0", lam)
        lam = 0.0
    r = restriction.r
    if constants is None:
        dist = full.mm.distances if kind == "MM" else full.s.distances
        t = tuning
        constants = empirical_constants(dist, t.rho0, t.rho1, m, t.delta0, t.delta1)
    factor = constants.lr_factor(kind)
    p_as = float(stats.chi2.sf(lam / factor, r))
    details = {"scale_full": float(full.mm.scale if kind == "MM" else full.s.scale),
               "scale_restricted": float(restricted.mm.scale if kind == "MM" else restricted.s.scale),
               "beta_restricted": restricted.beta_mm if kind == "MM" else restricted.beta_s}
    res = TestResult(f"Lambda_{kind}", lam, r, float(factor), p_as, details=details)
    if N and N > 0:
        reps, n_req, warn = _lr_null_replicates(data, full, restricted, restriction, kind,
                                                N, seed, config, tuning)
        res.replicate_statistics = reps
        res.n_effective, res.n_requested, res.warning = reps.size, n_req, warn
        res.p_bootstrap = bootstrap_pvalue(lam, reps)
    return res


def _lr_null_replicates(data, full: RobustFit, restricted: RobustFit, restriction, kind,
                        N, seed, config, tuning):
    design = as_design(data)
    n, m = design.n, design.m
    b_stat = full.beta_mm if kind == "MM" else full.beta_s
    b_stat_r = restricted.beta_mm if kind == "MM" else restricted.beta_s
    shift = b_stat - b_stat_r
    null = design.with_y(design.y - design.x @ shift)
    # full-model estimates on the null data follow from equivariance
    theta0 = ThetaVector(full.beta_mm - shift, full.mm.Gamma, full.s.Sigma, full.beta_s - shift)
    eng_full = FRBEngine(theta0, null, tuning, diagonal=False)
    fit_r0 = robust.fit(null, config, tuning, restriction=restriction,
                        starts=[(restricted.beta_s, restricted.s.Sigma),
                                (restricted.beta_mm, restricted.mm.Sigma),
                                (theta0.beta_s, full.s.Sigma)])
    eng_r = FRBEngine(fit_r0, null)
    idx = draw_resamples(n, N, seed)
    C = counts_from_indices(idx, n)
    Rf, ok_f = eng_full.replicates_from_counts(C)
    Rr, ok_r = eng_r.replicates_from_counts(C)
    h_f, okh_f = _scale_functional(eng_full.design, Rf, C, tuning, eng_full.theta.k, kind)
    h_r, okh_r = _scale_functional(eng_r.design, Rr, C, tuning, eng_r.theta.k, kind)
    ok = ok_f & ok_r & okh_f & okh_r
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = -2 * n * m * np.log(h_f / h_r)
    ok &= np.isfinite(lam)
    warn = _skip_report(int(np.sum(~ok)), N)
    return lam[ok], N, warn


# --------------------------------------------------------------------------
# diagonality tests


def weighted_correlation(E, w) -> np.ndarray:
    """``sum w e_j e_k / sqrt(sum w e_j^2 sum w e_k^2)`` (batched over leading axes)."""
    V = np.einsum("...i,...ia,...ib->...ab", w, E, E)
    s = np.sqrt(np.einsum("...aa->...a", V))
    return V / (s[..., :, None] * s[..., None, :])


def _lm_from_corr(Rm, n):
    m = Rm.shape[-1]
    iu = np.triu_indices(m, 1)
    return n * np.sum(Rm[..., iu[0], iu[1]] ** 2, axis=-1)


def lm_statistic(restricted: RobustFit, data, kind: str = "MM") -> float:
    """Robust Breusch-Pagan statistic from a diagonal-restricted fit."""
    kind = _kind(kind)
    design = as_design(data)
    if kind == "MM":
        E, w = design.residuals(restricted.beta_mm), restricted.mm.weights
    else:
        E, w = design.residuals(restricted.beta_s), restricted.s.weights
    return float(_lm_from_corr(weighted_correlation(E, w), design.n))


def _inv_sqrt(S):
    ev, U = np.linalg.eigh(S)
    if ev[0] <= 0:
        raise NumericFailure("scatter matrix is not positive definite")
    return (U / np.sqrt(ev)) @ U.T


def diagonal_null_data(data, full: RobustFit, kind: str = "MM"):
    """``(X, X B + E Sigma^{-1/2})`` so that the null data have scatter close to ``I``."""
    design = as_design(data)
    if kind == "MM":
        beta, Sigma = full.beta_mm, full.mm.Sigma
    else:
        beta, Sigma = full.beta_s, full.s.Sigma
    E = design.residuals(beta)
    return design.with_y(design.x @ beta + E @ _inv_sqrt(Sigma))


def lm_diag_test(data, stat_kind: str = "MM", N: int = 1000, seed: int = 0,
                 config: FitConfig = FitConfig(), tuning: Optional[TuningConstants] = None, *,
                 fit: Optional[RobustFit] = None, restricted: Optional[RobustFit] = None,
                 constants: Optional[AsymptoticConstants] = None) -> TestResult:
    """Robust Breusch-Pagan test of a diagonal error covariance (``LM_S`` or ``LM_MM``)."""
    kind = _kind(stat_kind)
    design = as_design(data)
    n, m = design.n, design.m
    if m < 2:
        raise ConfigError("the diagonality test needs at least two blocks")
    tuning = tuning or (fit.tuning if fit is not None else tuning_for(m))
    diag = RestrictionSpec.diagonal()
    if restricted is None:
        restricted = robust.fit(data, config, tuning, restriction=diag)
    lm = lm_statistic(restricted, data, kind)
    df = m * (m - 1) // 2
    full = fit
    if full is None and (constants is None or (N and N > 0)):
        full = robust.fit(data, config, tuning)
    if constants is None:
        # constants from the unrestricted fit, which is consistent under both hypotheses
        dist = full.mm.distances if kind == "MM" else full.s.distances
        t = tuning
        constants = empirical_constants(dist, t.rho0, t.rho1, m, t.delta0, t.delta1)
    factor = constants.lm_factor(kind)
    p_as = float(stats.chi2.sf(lm / factor, df))
    res = TestResult(f"LM_{kind}", lm, df, float(factor), p_as)
    if N and N > 0:
        null = diagonal_null_data(data, full, kind)
        fit0 = robust.fit(null, config, tuning, restriction=diag)
        res.details["null_Sigma"] = fit0.mm.Sigma if kind == "MM" else fit0.s.Sigma
        reps, warn = _lm_null_replicates(null, fit0, kind, N, seed)
        res.replicate_statistics = reps
        res.n_effective, res.n_requested, res.warning = reps.size, N, warn
        res.p_bootstrap = bootstrap_pvalue(lm, reps)
    return res


def _lm_null_replicates(null, fit0: RobustFit, kind, N, seed):
    eng = FRBEngine(fit0, null)
    design = eng.design
    n, m = design.n, design.m
    k = eng.theta.k
    idx = draw_resamples(n, N, seed)
    C = counts_from_indices(idx, n)
    R, ok = eng.replicates_from_counts(C)
    th = ThetaVector.unpack(np.where(ok[:, None], R, eng.theta.pack()), k, m)
    eye = np.eye(m)
    Ss = th.Sigma_s * eye
    sign_s, logdet_s = np.linalg.slogdet(Ss)
    ok &= sign_s > 0
    t = fit0.tuning
    if kind == "MM":
        G = th.Gamma_mm * eye
        sign_g, logdet_g = np.linalg.slogdet(G)
        ok &= sign_g > 0
        # Sigma^_r* = |Sigma~_r*|^{1/m} Gamma^_r*, with Gamma rescaled to unit determinant
        scale = np.exp((np.where(ok, logdet_s, 0.0) - np.where(ok, logdet_g, 0.0)) / m)
        Sig = G * scale[:, None, None]
        beta, rho = th.beta_mm, t.rho1
    else:
        Sig, beta, rho = Ss, th.beta_s, t.rho0
    Sig = np.where(ok[:, None, None], Sig, eye)
    E = design.y[None] - np.einsum("imp,kp->kim", design.x, beta)
    d = np.sqrt(np.maximum(mahalanobis_sq(E, np.linalg.inv(Sig)), 0.0))
    w = rho.w(d) * C
    with np.errstate(divide="ignore", invalid="ignore"):
        lm = _lm_from_corr(weighted_correlation(E, w), n)
    ok &= np.isfinite(lm)
    warn = _skip_report(int(np.sum(~ok)), N)
    return lm[ok], warn


# --------------------------------------------------------------------------
# classical Gaussian tests


def _mle_lambda(design, param, n):
    f_full = mle_fit(design)
    f_r = mle_fit(param.design(design))
    _, ld = np.linalg.slogdet(f_full.Sigma)
    _, ld_r = np.linalg.slogdet(f_r.Sigma)
    return -n * (ld - ld_r), f_full, f_r


def _ols_design(design):
    """Equation-by-equation least squares on a design whose blocks do not share coefficients."""
    return robust.batched_gls(design, np.eye(design.m)[None], np.ones((1, design.n)))[0][0]


def lr_test_mle(data, restriction: RestrictionSpec, N: int = 0, seed: int = 0) -> TestResult:
    """Gaussian likelihood-ratio test of ``R beta = q`` with a full-refit bootstrap."""
    design = as_design(data)
    n = design.n
    param = robust.parametrization_for(restriction, design.p)
    lam, f_full, f_r = _mle_lambda(design, param, n)
    lam = max(float(lam), 0.0)
    r = restriction.r
    res = TestResult("Lambda_MLE", lam, r, 1.0, float(stats.chi2.sf(lam, r)))
    if N and N > 0:
        beta_r = param.to_beta(f_r.beta)
        E = design.residuals(f_full.beta)
        null = design.with_y(design.x @ beta_r + E)
        idx = draw_resamples(n, N, seed)
        reps = []
        with warnings.catch_warnings():
            # resamples with few distinct rows drive Sigma towards singularity
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            for b in range(N):
                try:
                    reps.append(_mle_lambda(null.take(idx[b]), param, n)[0])
                except (RobSurError, np.linalg.LinAlgError) as exc:
                    log.info("bootstrap resample %d skipped: %s", b, exc)
        reps = np.array(reps)
        res.replicate_statistics = reps
        res.n_effective, res.n_requested = reps.size, N
        res.warning = _skip_report(N - reps.size, N)
        res.p_bootstrap = bootstrap_pvalue(lam, reps)
    return res


def _bp_lm(design):
    beta = _ols_design(design)
    E = design.residuals(beta)
    C = np.corrcoef(E, rowvar=False)
    return float(_lm_from_corr(C, design.n)), beta, E


def lm_test_mle(data, N: int = 0, seed: int = 0) -> TestResult:
    """Classical Breusch-Pagan test from equation-by-equation least-squares residuals."""
    design = as_design(data)
    n, m = design.n, design.m
    if m < 2:
        raise ConfigError("the diagonality test needs at least two blocks")
    lm, beta, E = _bp_lm(design)
    df = m * (m - 1) // 2
    res = TestResult("LM_MLE", lm, df, 1.0, float(stats.chi2.sf(lm, df)))
    if N and N > 0:
        S = E.T @ E / n
        null = design.with_y(design.x @ beta + E @ _inv_sqrt(S))
        idx = draw_resamples(n, N, seed)
        reps = []
        for b in range(N):
            v = _bp_lm(null.take(idx[b]))[0]
            if np.isfinite(v):
                reps.append(v)
        reps = np.array(reps)
        res.replicate_statistics = reps
        res.n_effective, res.n_requested = reps.size, N
        res.warning = _skip_report(N - reps.size, N)
        res.p_bootstrap = bootstrap_pvalue(lm, reps)
    return res


def classical_tests(data, restriction: Optional[RestrictionSpec] = None, N: int = 0,
                    seed: int = 0) -> TestResult:
    """Gaussian LR test for a linear restriction, or Breusch-Pagan for the diagonal kind."""
    if restriction is None or restriction.kind == DIAGONAL:
        return lm_test_mle(data, N, seed)
    return lr_test_mle(data, restriction, N, seed)
