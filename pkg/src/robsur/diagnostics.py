"""Outlier diagnostics: residual distances against robust predictor distances."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from . import robust
from .errors import DimensionError, SingularCovarianceError
from .model import SurDataset, as_design
from .robust import FitConfig, RobustFit, mahalanobis_sq

REGULAR = "regular"
VERTICAL = "vertical_outlier"
GOOD_LEVERAGE = "good_leverage"
BAD_LEVERAGE = "bad_leverage"


@dataclass(frozen=True)
class DiagnosticRecord:
    index: int
    residual_distance: float
    robust_distance: float
    cls: str
    label: Optional[str] = None

    def as_dict(self) -> dict:
        return {"index": self.index, "label": self.label, "d": self.residual_distance,
                "RD": self.robust_distance, "class": self.cls}


def _mahalanobis(E, Sigma):
    try:
        Sinv = np.linalg.inv(Sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("scatter matrix is singular") from exc
    if np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T))[0] <= 0:
        raise SingularCovarianceError("scatter matrix is not positive definite")
    return np.sqrt(np.maximum(mahalanobis_sq(E, Sinv), 0.0))


def residual_distances(fit, data) -> np.ndarray:
    """``sqrt(e_i' Sigma^-1 e_i)`` at the MM estimate (``Sigma = s~^2 Gamma^``).

    ``fit`` is a :class:`RobustFit` or an :class:`MMEstimate` whose ``beta``
    is in full coordinates.
    """
    design = as_design(data)
    if isinstance(fit, RobustFit):
        beta, Sigma = fit.beta_mm, fit.mm.Sigma
    else:
        beta, Sigma = fit.beta, fit.Sigma
    return _mahalanobis(design.residuals(beta), Sigma)


def predictor_matrix(data: SurDataset) -> np.ndarray:
    """Distinct non-constant columns of the combined regressor matrix."""
    X = data.Xtilde
    keep = []
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.ptp(col) == 0:
            continue                          # intercept or constant column
        if any(np.array_equal(col, X[:, k]) for k in keep):
            continue
        keep.append(j)
    return X[:, keep]


def predictor_location_scatter(data: SurDataset, config: FitConfig = FitConfig(),
                               breakdown: float = 0.5, efficiency: float = 0.9):
    """Multivariate MM location and scatter of the predictors.

    Each predictor becomes an intercept-only block, so the SUR S/MM machinery
    yields a location vector and scatter matrix.
    """
    Z = predictor_matrix(data)
    n, q = Z.shape
    if q < 2:
        raise DimensionError("robust predictor distances need at least two non-constant predictors")
    blocks = tuple((np.ones((n, 1)), Z[:, j]) for j in range(q))
    loc_data = SurDataset(blocks)
    tuning = robust.tuning_for(q, breakdown, efficiency)
    f = robust.fit(loc_data, config, tuning)
    return f.beta_mm, f.mm.Sigma


def predictor_robust_distances(data: SurDataset, config: FitConfig = FitConfig(),
                               location=None, scatter=None) -> np.ndarray:
    Z = predictor_matrix(data)
    if location is None or scatter is None:
        location, scatter = predictor_location_scatter(data, config)
    return _mahalanobis(Z - np.asarray(location), np.asarray(scatter))


def cutoff(dim: int, quantile: float = 0.975) -> float:
    return float(np.sqrt(stats.chi2.ppf(quantile, dim)))


def classify_outliers(d, RD, m: int, p_prime: int, quantile: float = 0.975,
                      labels=None) -> list:
    d = np.asarray(d, dtype=float)
    RD = np.asarray(RD, dtype=float)
    if d.shape != RD.shape:
        raise DimensionError("residual and robust distances differ in length")
    cd, cr = cutoff(m, quantile), cutoff(p_prime, quantile)
    out = []
    for i, (a, b) in enumerate(zip(d, RD)):
        vert, lev = a > cd, b > cr
        if vert and lev:
            cls = BAD_LEVERAGE
        elif vert:
            cls = VERTICAL
        elif lev:
            cls = GOOD_LEVERAGE
        else:
            cls = REGULAR
        out.append(DiagnosticRecord(i, float(a), float(b), cls,
                                    None if labels is None else str(labels[i])))
    return out


@dataclass
class DiagnosticReport:
    records: list
    residual_cutoff: float
    predictor_cutoff: float
    m: int
    p_prime: int
    quantile: float

    def flagged(self, cls: str) -> list:
        return [r for r in self.records if r.cls == cls]

    def as_dict(self) -> dict:
        return {"residual_cutoff": self.residual_cutoff,
                "predictor_cutoff": self.predictor_cutoff, "m": self.m,
                "p_prime": self.p_prime, "quantile": self.quantile,
                "records": [r.as_dict() for r in self.records]}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "d", "RD", "class", "d_cutoff", "RD_cutoff"])
            for r in self.records:
                w.writerow([r.index, "" if r.label is None else r.label,
                            repr(r.residual_distance), repr(r.robust_distance), r.cls,
                            repr(self.residual_cutoff), repr(self.predictor_cutoff)])


def diagnose(fit: RobustFit, data: SurDataset, config: FitConfig = FitConfig(),
             quantile: float = 0.975, labels=None) -> DiagnosticReport:
    d = residual_distances(fit, data)
    Z = predictor_matrix(data)
    RD = predictor_robust_distances(data, config)
    m, pp = data.m, Z.shape[1]
    recs = classify_outliers(d, RD, m, pp, quantile, labels)
    return DiagnosticReport(recs, cutoff(m, quantile), cutoff(pp, quantile), m, pp, quantile)
