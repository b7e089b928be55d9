"""Tukey bisquare rho-function calculus and tuning constants.

All expectations are taken at the standard normal error model, i.e. over the
norm ``R = ||e||`` of ``e ~ N_m(0, I_m)``, which follows a chi distribution
with ``m`` degrees of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, stats

from .errors import ConfigError, NumericFailure

_QUAD_ABS = 1e-13
_QUAD_REL = 1e-12


@dataclass(frozen=True)
class RhoSpec:
    """Bounded rho-function with tuning constant ``c``.

    Only the Tukey bisquare family is implemented; ``family`` is kept so the
    interface can grow.
    """

    c: float
    family: str = "bisquare"

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigError(f"tuning constant must be positive, got {self.c}")
        if self.family != "bisquare":
            raise ConfigError(f"unsupported rho family {self.family!r}")

    @property
    def rho_max(self) -> float:
        return self.c ** 2 / 6.0

    def rho(self, u):
        u = np.abs(np.asarray(u, dtype=float))
        t = np.minimum((u / self.c) ** 2, 1.0)
        # u^2/2 - u^4/(2c^2) + u^6/(6c^4) written in t = (u/c)^2
        return self.c ** 2 / 6.0 * t * (3.0 - 3.0 * t + t * t)

    def psi(self, u):
        u = np.asarray(u, dtype=float)
        return u * self.w(u)

    def w(self, u):
        u = np.asarray(u, dtype=float)
        t = (u / self.c) ** 2
        return np.where(t < 1.0, (1.0 - t) ** 2, 0.0)

    def psi_prime(self, u):
        u = np.asarray(u, dtype=float)
        t = (u / self.c) ** 2
        return np.where(t < 1.0, (1.0 - t) * (1.0 - 5.0 * t), 0.0)

    def w_prime_over_u(self, u):
        """``w'(u) / u``, finite at ``u = 0``."""
        u = np.asarray(u, dtype=float)
        t = (u / self.c) ** 2
        return np.where(t < 1.0, -4.0 * (1.0 - t) / self.c ** 2, 0.0)

    def v(self, u, delta):
        """``psi(u) u - rho(u) + delta``, the S-scale weight."""
        return self.psi(u) * np.asarray(u, dtype=float) - self.rho(u) + delta

    def rho_inverse(self, level: float) -> float:
        """Smallest ``u`` with ``rho(u) = level`` (``level < rho_max``)."""
        if not 0 <= level < self.rho_max:
            raise ConfigError("level outside the range of rho")
        # rho = c^2/6 (1 - (1-t)^3)
        t = 1.0 - (1.0 - 6.0 * level / self.c ** 2) ** (1.0 / 3.0)
        return self.c * np.sqrt(t)


def bisquare_eval(u: float, spec: RhoSpec):
    """Return ``(rho, psi, w, psi_prime)`` at ``u``."""
    return (float(spec.rho(u)), float(spec.psi(u)), float(spec.w(u)),
            float(spec.psi_prime(u)))


def _chi_expect(fun, c: float, m: int, tail: float = 0.0) -> float:
    """E[fun(R)] for R ~ chi_m where fun is constant ``tail`` beyond ``c``."""
    dist = stats.chi(m)
    upper = min(c, np.sqrt(m) + 40.0)
    val, err = integrate.quad(lambda r: fun(r) * dist.pdf(r), 0.0, upper,
                              epsabs=_QUAD_ABS, epsrel=_QUAD_REL, limit=200,
                              points=[min(np.sqrt(max(m - 1, 0)), upper)])
    if not np.isfinite(val) or err > 1e-10:
        raise NumericFailure(f"quadrature did not converge (err={err:.3g})")
    if tail != 0.0:
        val += tail * dist.sf(c)
    return float(val)


def consistency_delta(c: float, m: int) -> float:
    """``delta = E[rho_c(||e||)]`` at ``e ~ N_m(0, I)``."""
    spec = RhoSpec(c)
    return _chi_expect(lambda r: float(spec.rho(r)), c, m, tail=spec.rho_max)


def breakdown_point(c: float, m: int) -> float:
    return consistency_delta(c, m) / RhoSpec(c).rho_max


def tune_breakdown(eps_star: float, m: int) -> float:
    """Tuning constant giving asymptotic breakdown point ``eps_star``."""
    if not 0 < eps_star <= 0.5:
        raise ConfigError("breakdown point must lie in (0, 0.5]")
    try:
        c = optimize.brentq(lambda c: breakdown_point(c, m) - eps_star,
                            1e-3, 1e3, xtol=1e-14, rtol=1e-14, maxiter=500)
    except ValueError as exc:
        raise NumericFailure(f"no bracket for breakdown {eps_star}") from exc
    return float(c)


def efficiency(c: float, m: int) -> float:
    """Normal-model ARE ``m eta^2 / alpha`` of the coefficient estimator."""
    spec = RhoSpec(c)
    eta = _chi_expect(lambda r: (1 - 1 / m) * float(spec.w(r))
                      + float(spec.psi_prime(r)) / m, c, m)
    alpha = _chi_expect(lambda r: float(spec.psi(r)) ** 2, c, m)
    return m * eta ** 2 / alpha


def tune_efficiency(target_are: float, m: int) -> float:
    if not 0 < target_are < 1:
        raise ConfigError("efficiency must lie in (0, 1)")
    try:
        c = optimize.brentq(lambda c: efficiency(c, m) - target_are,
                            1e-1, 1e3, xtol=1e-14, rtol=1e-14, maxiter=500)
    except ValueError as exc:
        raise NumericFailure(f"no bracket for efficiency {target_are}") from exc
    return float(c)


@dataclass(frozen=True)
class TuningConstants:
    c0: float
    c1: float
    delta0: float
    delta1: float
    m: int
    breakdown: float = 0.5
    efficiency: float = 0.9

    @property
    def rho0(self) -> RhoSpec:
        return RhoSpec(self.c0)

    @property
    def rho1(self) -> RhoSpec:
        return RhoSpec(self.c1)

    def as_dict(self) -> dict:
        return {"c0": self.c0, "c1": self.c1, "delta0": self.delta0,
                "delta1": self.delta1, "m": self.m,
                "breakdown": self.breakdown, "efficiency": self.efficiency}


@lru_cache(maxsize=64)
def tuning_for(m: int, breakdown: float = 0.5,
               efficiency: float = 0.9) -> TuningConstants:
    """Default S (breakdown) and MM (efficiency) tuning for ``m`` blocks."""
    c0 = tune_breakdown(breakdown, m)
    c1 = tune_efficiency(efficiency, m)
    if c1 <= c0:
        raise ConfigError("efficiency tuning must exceed the breakdown tuning")
    return TuningConstants(c0, c1, consistency_delta(c0, m),
                           consistency_delta(c1, m), m, breakdown, efficiency)


@dataclass(frozen=True)
class AsymptoticConstants:
    m: int
    delta0: float
    delta1: float
    eta0: float
    eta1: float
    gamma0: float
    gamma1: float
    alpha0: float
    alpha1: float
    pi1: float
    sigma1: float
    sigma2: float
    # E[psi^2(R) R^2], used by the diagonality-test null law
    kappa0: float
    kappa1: float

    @property
    def are(self) -> float:
        return self.m * self.eta1 ** 2 / self.alpha1

    def lr_factor(self, kind: str = "MM") -> float:
        """Scale of the chi-squared limit of the likelihood-ratio statistic."""
        if kind.upper() == "S":
            return self.alpha0 / (self.eta0 * self.gamma0)
        return self.alpha1 / (self.eta1 * self.gamma1)

    def lm_factor(self, kind: str = "MM") -> float:
        """Scale of the chi-squared limit of the robust LM statistic."""
        m = self.m
        if kind.upper() == "S":
            return m / ((m + 2) * self.gamma0 ** 2) * self.kappa0
        return m / ((m + 2) * self.gamma1 ** 2) * self.kappa1


def _constants_from_expectation(expect, spec0, spec1, m, delta0, delta1):
    """Assemble the constants given an expectation operator ``expect(f, spec, tail)``."""
    out = {}
    for tag, spec in (("0", spec0), ("1", spec1)):
        out["eta" + tag] = expect(lambda r, s=spec: (1 - 1 / m) * s.w(r)
                                  + s.psi_prime(r) / m, spec, 0.0)
        out["gamma" + tag] = expect(lambda r, s=spec: s.psi(r) * r, spec, 0.0)
        out["alpha" + tag] = expect(lambda r, s=spec: s.psi(r) ** 2, spec, 0.0)
        out["kappa" + tag] = expect(lambda r, s=spec: (s.psi(r) * r) ** 2,
                                    spec, 0.0)
    pi1 = expect(lambda r: (m + 1) * spec1.psi(r) * r
                 + spec1.psi_prime(r) * r ** 2, spec1, 0.0) / (m + 2)
    sigma1 = m / (pi1 ** 2 * (m + 2)) * out["kappa1"]
    var_rho0 = expect(lambda r: (spec0.rho(r) - delta0) ** 2, spec0,
                      (spec0.rho_max - delta0) ** 2)
    sigma2 = 4.0 / out["gamma0"] ** 2 * var_rho0 - 2.0 / m * sigma1
    return AsymptoticConstants(m=m, delta0=delta0, delta1=delta1, pi1=pi1,
                               sigma1=sigma1, sigma2=sigma2, **out)


def asymptotic_constants(spec0: RhoSpec, spec1: RhoSpec,
                         m: int) -> AsymptoticConstants:
    """Influence-function and asymptotic-variance constants at N_m(0, I)."""
    delta0 = consistency_delta(spec0.c, m)
    delta1 = consistency_delta(spec1.c, m)

    def expect(f, spec, tail):
        return _chi_expect(lambda r: float(f(r)), spec.c, m, tail=tail)

    return _constants_from_expectation(expect, spec0, spec1, m, delta0, delta1)


def empirical_constants(distances, spec0: RhoSpec, spec1: RhoSpec, m: int,
                        delta0: float, delta1: float) -> AsymptoticConstants:
    """Same constants with expectations replaced by sample means over ``distances``."""
    d = np.asarray(distances, dtype=float)

    def expect(f, spec, tail):
        return float(np.mean(f(d)))

    return _constants_from_expectation(expect, spec0, spec1, m, delta0, delta1)
