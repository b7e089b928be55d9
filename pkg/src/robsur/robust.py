"""Robust S- and MM-estimation for SUR models.

The S-estimator minimizes ``|C|`` subject to an M-scale constraint on the
Mahalanobis residual distances. It is computed with a fast-S style search:
random elemental subsamples give starting values, every candidate gets a few
concentration steps, and the best ``k_best`` are iterated to convergence.
The MM-estimator then refines coefficients and shape with a larger tuning
constant while keeping the S-scale fixed.

All routines operate on a :class:`~robsur.model.Design`, so restricted
models (linear coefficient restrictions via reparametrization, or a diagonal
error scatter) share the same code path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import (ConfigError, DegenerateDesignError, ExactFitError,
                     NumericFailure, RankDeficiencyError, SingularCovarianceError)
from .model import Design, SurDataset, as_design
from .rho import RhoSpec, TuningConstants, tuning_for

log = logging.getLogger(__name__)

LINEAR = "linear_coefficients"
DIAGONAL = "diagonal_sigma"


@dataclass(frozen=True)
class FitConfig:
    n_subsamples: int = 500
    max_cstep: int = 2
    k_best: int = 5
    tol: float = 1e-9
    max_iter: int = 2000
    seed: int = 0
    subsample_size: Optional[int] = None
    polish: bool = True

    def __post_init__(self):
        if self.n_subsamples < 1:
            raise ConfigError("n_subsamples must be >= 1")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.k_best < 1 or self.max_cstep < 0:
            raise ConfigError("k_best must be >= 1 and max_cstep >= 0")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# --------------------------------------------------------------------------
# restrictions


@dataclass(frozen=True)
class RestrictionSpec:
    """``R beta = q`` (``kind='linear_coefficients'``) or a diagonal scatter."""

    kind: str = LINEAR
    R: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in (LINEAR, DIAGONAL):
            raise ConfigError(f"unknown restriction kind {self.kind!r}")
        if self.kind == LINEAR:
            if self.R is None:
                raise ConfigError("linear restriction needs R")
            R = np.atleast_2d(np.asarray(self.R, dtype=float))
            q = np.zeros(R.shape[0]) if self.q is None else np.atleast_1d(
                np.asarray(self.q, dtype=float))
            if q.shape != (R.shape[0],):
                raise ConfigError("q must have one entry per row of R")
            object.__setattr__(self, "R", R)
            object.__setattr__(self, "q", q)

    @classmethod
    def diagonal(cls) -> "RestrictionSpec":
        return cls(DIAGONAL)

    @property
    def r(self) -> int:
        return self.R.shape[0] if self.kind == LINEAR else 0

    def parametrization(self, p: int):
        """Return ``(Z, beta0)`` with ``{beta : R beta = q} = {beta0 + Z g}``.

        Free coefficients keep their own coordinates; ``r`` pivot
        coefficients (chosen by pivoted QR of ``R``) are solved for.
        """
        R, q = self.R, self.q
        if R.shape[1] != p:
            raise ConfigError(f"R has {R.shape[1]} columns, model has p = {p}")
        r = R.shape[0]
        _, Rq, piv = sla.qr(R, pivoting=True)
        diag = np.abs(np.diag(Rq))
        if r > p or diag.size < r or diag[r - 1] <= 1e-10 * diag[0]:
            raise ConfigError("restriction matrix R must have full row rank")
        pivots = np.sort(piv[:r])
        free = np.setdiff1d(np.arange(p), pivots)
        Rp, Rf = R[:, pivots], R[:, free]
        Z = np.zeros((p, p - r))
        Z[free, np.arange(p - r)] = 1.0
        Z[pivots] = -np.linalg.solve(Rp, Rf)
        beta0 = np.zeros(p)
        beta0[pivots] = np.linalg.solve(Rp, q)
        return Z, beta0


@dataclass(frozen=True)
class Parametrization:
    """Maps model coordinates ``g`` to full coefficients ``beta0 + Z g``."""

    Z: Optional[np.ndarray] = None
    beta0: Optional[np.ndarray] = None
    diagonal: bool = False

    def to_beta(self, g):
        if self.Z is None:
            return np.asarray(g)
        return self.beta0 + np.asarray(g) @ self.Z.T

    def from_beta(self, beta):
        if self.Z is None:
            return np.asarray(beta)
        return np.linalg.lstsq(self.Z, np.asarray(beta) - self.beta0, rcond=None)[0]

    def design(self, design: Design) -> Design:
        if self.Z is None:
            return design
        return design.reparametrize(self.Z, self.beta0)


def parametrization_for(restriction: Optional[RestrictionSpec], p: int) -> Parametrization:
    if restriction is None:
        return Parametrization()
    if restriction.kind == DIAGONAL:
        return Parametrization(diagonal=True)
    Z, beta0 = restriction.parametrization(p)
    return Parametrization(Z, beta0)


# --------------------------------------------------------------------------
# small batched linear algebra helpers


def phi(A, diagonal: bool = False):
    """``|A|^{-1/m} A`` (batched over leading axes)."""
    A = np.asarray(A, dtype=float)
    if diagonal:
        A = A * np.eye(A.shape[-1])
    m = A.shape[-1]
    sign, logdet = np.linalg.slogdet(A)
    if np.any(sign <= 0):
        raise SingularCovarianceError("shape update is not positive definite")
    return A * np.exp(-logdet / m)[..., None, None]


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def mahalanobis_sq(E, Cinv):
    """``e_i' C^{-1} e_i`` for residuals ``E`` of shape ``(..., n, m)``."""
    return np.einsum("...ia,...ab,...ib->...i", E, Cinv, E)


def _cross_products(design: Design):
    """Per-observation outer products used by batched weighted GLS."""
    x, y = design.x, design.y
    n, m, p = x.shape
    XX = np.einsum("iap,ibq->iabpq", x, x).reshape(n * m * m, p * p)
    XY = np.einsum("iap,ib->iabp", x, y).reshape(n * m * m, p)
    return XX, XY


def batched_gls(design: Design, Cinv, weights, cross=None):
    """Weighted GLS for a batch: ``Cinv`` is ``(K, m, m)``, ``weights`` ``(K, n)``.

    Returns ``(beta, ok)`` where ``ok`` flags nonsingular normal equations.
    """
    XX, XY = cross if cross is not None else _cross_products(design)
    n, m, p = design.x.shape
    K = weights.shape[0]
    coef = (weights[:, :, None, None] * Cinv[:, None, :, :]).reshape(K, n * m * m)
    U = (coef @ XX).reshape(K, p, p)
    W = coef @ XY
    U = _sym(U)
    ev = np.linalg.eigvalsh(U)
    ok = ev[:, 0] > 1e-12 * np.maximum(ev[:, -1], np.finfo(float).tiny)
    beta = np.full((K, p), np.nan)
    if np.any(ok):
        beta[ok] = np.linalg.solve(U[ok], W[ok][..., None])[..., 0]
    return beta, ok


# --------------------------------------------------------------------------
# M-scale


def m_scale(distances, rho: RhoSpec, delta: float, weights=None, *,
            tol: float = 1e-13, max_iter: int = 200, raise_on_exact: bool = True):
    """Solve ``mean_i rho(d_i / s) = delta`` for ``s`` (batched over rows).

    ``distances`` may be 1-D or ``(K, n)``; ``weights`` are observation
    multiplicities (bootstrap counts). An exact fit (too many zero distances
    for the constraint to be met) raises :class:`ExactFitError` or, with
    ``raise_on_exact=False``, yields ``0`` for that row.
    """
    d = np.asarray(distances, dtype=float)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise NumericFailure("distances must be finite and nonnegative")
    c = np.ones_like(d) if weights is None else np.atleast_2d(np.asarray(weights, float))
    c = np.broadcast_to(c, d.shape)
    ctot = c.sum(axis=1)
    dmax = d.max(axis=1)
    eps = delta / rho.rho_max
    nonzero = (c * (d > 1e-12 * np.maximum(dmax, np.finfo(float).tiny)[:, None])).sum(axis=1) / ctot
    exact = (nonzero <= eps * (1 + 1e-12)) | (dmax <= 0)
    if np.any(exact) and raise_on_exact:
        raise ExactFitError(
            f"exact fit: only {nonzero[exact].min():.3f} of the observations have "
            f"nonzero distance, the breakdown point requires more than {eps:.3f}")
    ok = ~exact
    s = np.zeros(d.shape[0])
    if np.any(ok):
        s[ok] = _m_scale_solve(d[ok], c[ok], ctot[ok], rho, delta, tol, max_iter)
    return float(s[0]) if single else s


def _m_scale_solve(d, c, ctot, rho, delta, tol, max_iter):
    u_del = rho.rho_inverse(delta)

    def f_and_slope(t):
        u = d * np.exp(-t)[:, None]
        f = (c * rho.rho(u)).sum(axis=1) / ctot - delta
        slope = -(c * rho.psi(u) * u).sum(axis=1) / ctot
        return f, slope

    dmax = d.max(axis=1)
    hi = np.log(dmax / u_del)                     # f(hi) <= 0
    med = np.median(d, axis=1)
    start = np.where(med > 0, np.log(np.maximum(med, 1e-300) / u_del), hi)
    lo = np.minimum(start, hi) - 1.0
    f_lo, _ = f_and_slope(lo)
    for _ in range(200):                            # extend bracket downwards
        bad = f_lo <= 0
        if not np.any(bad):
            break
        lo = np.where(bad, lo - 2.0, lo)
        f_lo, _ = f_and_slope(lo)
    else:
        raise NumericFailure("could not bracket the M-scale")
    t = np.clip(start, lo, hi)
    done = np.zeros(t.shape, dtype=bool)
    for _ in range(max_iter):
        f, slope = f_and_slope(t)
        done |= np.abs(f) < tol * delta
        lo = np.where(f > 0, t, lo)
        hi = np.where(f <= 0, t, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = t - f / slope
        bad = ~np.isfinite(t_new) | (t_new < lo) | (t_new > hi)
        t_new = np.where(bad, 0.5 * (lo + hi), t_new)
        step = np.abs(t_new - t)
        # converged rows keep their current iterate
        t = np.where(done, t, t_new)
        done |= step < tol
        if np.all(done):
            break
    return np.exp(t)


# --------------------------------------------------------------------------
# result containers


@dataclass(frozen=True)
class SEstimate:
    beta: np.ndarray
    Sigma: np.ndarray
    scale: float
    Gamma: np.ndarray
    weights: np.ndarray
    distances: np.ndarray
    iterations: int = 0
    n_candidates: int = 0
    candidate_scales: tuple = ()

    @property
    def objective(self) -> float:
        return float(np.linalg.det(self.Sigma))


@dataclass(frozen=True)
class MMEstimate:
    beta: np.ndarray
    Gamma: np.ndarray
    Sigma: np.ndarray
    scale: float            # efficient MM-scale
    s_scale: float          # S-scale the refinement was computed with
    weights: np.ndarray
    distances: np.ndarray
    iterations: int = 0
    objective_path: tuple = ()

    @property
    def objective(self) -> float:
        return self.objective_path[-1] if self.objective_path else float("nan")


@dataclass(frozen=True)
class RobustFit:
    """S and MM estimates for one (possibly restricted) model.

    ``s.beta`` / ``mm.beta`` live in the model coordinates of ``param``;
    :attr:`beta_s` and :attr:`beta_mm` give full SUR coefficients.
    """

    s: SEstimate
    mm: MMEstimate
    tuning: TuningConstants
    param: Parametrization = field(default_factory=Parametrization)
    config: Optional[FitConfig] = None

    @property
    def beta_s(self):
        return self.param.to_beta(self.s.beta)

    @property
    def beta_mm(self):
        return self.param.to_beta(self.mm.beta)

    @property
    def diagonal(self) -> bool:
        return self.param.diagonal


# --------------------------------------------------------------------------
# S-estimation


def _rel_change(b0, b1, G0, G1):
    """Largest relative change of coefficients and shape (batched or single)."""
    db = np.max(np.abs(b1 - b0), axis=-1) / (1 + np.max(np.abs(b1), axis=-1))
    dG = np.max(np.abs(G1 - G0), axis=(-2, -1)) / np.max(np.abs(G1), axis=(-2, -1))
    return np.maximum(db, dG)


def _subsample_size(design: Design, config: FitConfig) -> int:
    if config.subsample_size is not None:
        return int(config.subsample_size)
    n, m, p = design.x.shape
    # exact fit per block plus m extra rows so the residual scatter is PD
    h0 = max(design.block_nonzero_cols(), int(np.ceil(p / m)))
    return min(n, h0 + m)


def _candidate_rngs(seed: int, k: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(k)]


def draw_subsamples(n: int, h: int, n_subsamples: int, seed: int) -> np.ndarray:
    """``(n_subsamples, h)`` index matrix; row ``k`` depends only on ``(seed, k)``."""
    return np.stack([rng.choice(n, size=h, replace=False)
                     for rng in _candidate_rngs(seed, n_subsamples)])


class _SEngine:
    """Batched concentration steps for S-estimation on a fixed design."""

    def __init__(self, design: Design, rho: RhoSpec, delta: float, diagonal: bool):
        self.design = design
        self.rho = rho
        self.delta = delta
        self.diagonal = diagonal
        self.cross = _cross_products(design)

    def residuals(self, betas):
        return self.design.y[None] - np.einsum("imp,kp->kim", self.design.x, betas)

    def scale(self, betas, Gammas, raise_on_exact=False):
        E = self.residuals(betas)
        q = np.maximum(mahalanobis_sq(E, np.linalg.inv(Gammas)), 0.0)
        s = m_scale(np.sqrt(q), self.rho, self.delta, raise_on_exact=raise_on_exact)
        return s, E, q

    def step(self, betas, Gammas, s, q):
        """One concentration step; returns new ``(betas, Gammas, s, q)``."""
        K = betas.shape[0]
        # candidates already at an exact fit (s = 0) stay frozen
        d = np.sqrt(q) / np.where(s > 0, s, 1.0)[:, None]
        w = self.rho.w(d)
        beta_new, ok = batched_gls(self.design, np.linalg.inv(Gammas), w, self.cross)
        beta_new[~ok] = betas[~ok]
        E = self.residuals(beta_new)
        V = np.einsum("ki,kia,kib->kab", w, E, E)
        if self.diagonal:
            V = V * np.eye(V.shape[-1])
        sign, logdet = np.linalg.slogdet(V)
        good = ok & (sign > 0) & np.isfinite(logdet)
        G_new = Gammas.copy()
        G_new[good] = _sym(V[good] * np.exp(-logdet[good] / V.shape[-1])[:, None, None])
        beta_new[~good] = betas[~good]
        s_new, E, q_new = self.scale(beta_new, G_new)
        # reject steps that increase the scale beyond rounding noise; the
        # scale is flat at the optimum so a tight guard would stall convergence
        worse = ~(s_new <= s * (1 + 1e-9)) | ~good | (s <= 0)
        if np.any(worse):
            beta_new[worse], G_new[worse] = betas[worse], Gammas[worse]
            s_new[worse] = s[worse]
            q_new[worse] = q[worse]
        return beta_new, G_new, s_new, q_new, worse

    def iterate(self, betas, Gammas, s, q, n_steps, tol=None):
        it = 0
        for it in range(1, n_steps + 1):
            b0, G0, s0 = betas, Gammas, s
            betas, Gammas, s, q, stuck = self.step(betas, Gammas, s, q)
            if tol is not None:
                ds = np.abs(s - s0) / np.maximum(s, np.finfo(float).tiny)
                if np.all((np.maximum(_rel_change(b0, betas, G0, Gammas), ds) < tol) | stuck):
                    break
        return betas, Gammas, s, q, it


def _initial_candidates(design: Design, h: int, config: FitConfig, diagonal: bool):
    n, m, p = design.x.shape
    idx = draw_subsamples(n, h, config.n_subsamples, config.seed)
    K = idx.shape[0]
    W = np.zeros((K, n))
    np.put_along_axis(W, idx, 1.0, axis=1)
    eye = np.broadcast_to(np.eye(m), (K, m, m))
    betas, ok = batched_gls(design, eye, W)
    E = design.y[None] - np.einsum("imp,kp->kim", design.x, np.where(ok[:, None], betas, 0))
    V = np.einsum("ki,kia,kib->kab", W, E, E) / h
    if diagonal:
        V = V * np.eye(m)
    sign, logdet = np.linalg.slogdet(V)
    ev_ok = ok & (sign > 0) & np.isfinite(logdet)
    if np.any(ev_ok):
        ev = np.linalg.eigvalsh(V[ev_ok])
        cond_ok = ev[:, 0] > 1e-10 * ev[:, -1]
        ev_ok[np.flatnonzero(ev_ok)[~cond_ok]] = False
    return betas[ev_ok], V[ev_ok], np.flatnonzero(ev_ok)


def _check_exact_fit(design: Design, beta, eps: float):
    """Raise when more than ``1 - eps`` of the rows are fit up to rounding error."""
    E = np.abs(design.residuals(beta))
    ref = np.max(np.abs(design.y), axis=0) + np.max(np.abs(design.x), axis=(0, 2)) * np.max(np.abs(beta))
    tiny = np.all(E <= 1e-10 * np.maximum(ref, np.finfo(float).tiny), axis=1)
    frac = 1.0 - tiny.mean()
    if frac <= eps * (1 + 1e-12):
        raise ExactFitError(f"exact fit: only {frac:.3f} of the observations have nonzero "
                            f"residuals, the breakdown point requires more than {eps:.3f}")


def s_estimate(data, config: FitConfig = FitConfig(), tuning: Optional[TuningConstants] = None,
               *, diagonal: bool = False, starts: Sequence = ()) -> SEstimate:
    """S-estimate of coefficients and error scatter.

    ``starts`` holds extra ``(beta, Sigma_or_None)`` starting values that
    compete with the random subsample candidates.
    """
    design = as_design(data)
    n, m, p = design.x.shape
    tuning = tuning or tuning_for(m)
    if n < p + m and design.block_nonzero_cols() * 1 + m > n:
        raise DegenerateDesignError(f"n = {n} too small for p = {p}, m = {m}")
    rho0, delta0 = tuning.rho0, tuning.delta0
    engine = _SEngine(design, rho0, delta0, diagonal)
    h = _subsample_size(design, config)
    betas, V, kept = _initial_candidates(design, h, config, diagonal)
    extra_b, extra_V = [], []
    for beta, Sig in starts:
        beta = np.asarray(beta, dtype=float)
        if Sig is None:
            E = design.residuals(beta)
            Sig = E.T @ E / n
        Sig = np.asarray(Sig, dtype=float)
        if diagonal:
            Sig = Sig * np.eye(m)
        extra_b.append(beta)
        extra_V.append(Sig)
    if extra_b:
        betas = np.vstack([betas, np.array(extra_b)]) if betas.size else np.array(extra_b)
        V = np.concatenate([V, np.array(extra_V)]) if V.size else np.array(extra_V)
    if betas.shape[0] == 0:
        raise DegenerateDesignError("all elemental subsamples are singular")
    sign, _ = np.linalg.slogdet(V)
    usable = sign > 0
    betas, V = betas[usable], V[usable]
    if betas.shape[0] == 0:
        raise DegenerateDesignError("no usable starting candidate")
    Gammas = _sym(phi(V))
    s, E, q = engine.scale(betas, Gammas, raise_on_exact=False)
    alive = s > 0
    if not np.any(alive):
        # every candidate collapses: the bulk of the data is fit exactly
        engine.scale(betas[:1], Gammas[:1], raise_on_exact=True)
    betas, Gammas, s, q = betas[alive], Gammas[alive], s[alive], q[alive]
    if config.max_cstep:
        betas, Gammas, s, q, _ = engine.iterate(betas, Gammas, s, q, config.max_cstep)
    order = np.argsort(s, kind="stable")[: config.k_best]
    betas, Gammas, s, q = betas[order], Gammas[order], s[order], q[order]
    betas, Gammas, s, q, it = engine.iterate(betas, Gammas, s, q, config.max_iter, tol=config.tol)
    best = int(np.argmin(s))       # argmin returns the lowest index on ties
    beta, Gamma, scale = betas[best:best + 1], Gammas[best:best + 1], s[best:best + 1]
    q_best = q[best:best + 1]
    if config.polish:
        beta, Gamma, scale, q_best, it2 = engine.iterate(beta, Gamma, scale, q_best,
                                                         config.max_iter, tol=1e-11)
        it += it2
    beta, Gamma, scale = beta[0], Gamma[0], float(scale[0])
    # final exact-fit checks on the selected solution
    _check_exact_fit(design, beta, delta0 / rho0.rho_max)
    m_scale(np.sqrt(np.maximum(q_best[0], 0.0)), rho0, delta0)
    dist = np.sqrt(np.maximum(q_best[0], 0.0)) / scale
    return SEstimate(beta=beta, Sigma=scale ** 2 * Gamma, scale=scale, Gamma=Gamma,
                     weights=rho0.w(dist), distances=dist, iterations=it,
                     n_candidates=int(kept.size + len(extra_b)),
                     candidate_scales=tuple(np.sort(s)))


# --------------------------------------------------------------------------
# MM-estimation


def mm_objective(design: Design, beta, Gamma, s_scale, rho1: RhoSpec) -> float:
    E = design.residuals(beta)
    d = np.sqrt(np.maximum(mahalanobis_sq(E, np.linalg.inv(Gamma)), 0)) / s_scale
    return float(np.mean(rho1.rho(d)))


def mm_estimate(data, s_init: SEstimate, rho1: RhoSpec, *, delta1: Optional[float] = None,
                tol: float = 1e-11, max_iter: int = 5000, diagonal: bool = False) -> MMEstimate:
    """Iterate the MM estimating equations from the S-estimate."""
    design = as_design(data)
    m = design.m
    if delta1 is None:
        from .rho import consistency_delta
        delta1 = consistency_delta(rho1.c, m)
    sig = s_init.scale
    cross = _cross_products(design)
    beta, Gamma = s_init.beta.copy(), s_init.Gamma.copy()
    path = [mm_objective(design, beta, Gamma, sig, rho1)]
    it = 0
    for it in range(1, max_iter + 1):
        E = design.residuals(beta)
        d = np.sqrt(np.maximum(mahalanobis_sq(E, np.linalg.inv(Gamma)), 0)) / sig
        w = rho1.w(d)
        b_new, ok = batched_gls(design, np.linalg.inv(Gamma)[None], w[None], cross)
        if not ok[0]:
            raise RankDeficiencyError("weighted design is singular in the MM step")
        b_new = b_new[0]
        E = design.residuals(b_new)
        V = np.einsum("i,ia,ib->ab", w, E, E)
        try:
            G_new = _sym(phi(V, diagonal))
        except SingularCovarianceError as exc:
            raise NumericFailure("MM shape update lost positive definiteness") from exc
        obj = mm_objective(design, b_new, G_new, sig, rho1)
        change = _rel_change(beta, b_new, Gamma, G_new)
        beta, Gamma = b_new, G_new
        path.append(obj)
        if change < tol:
            break
    E = design.residuals(beta)
    d = np.sqrt(np.maximum(mahalanobis_sq(E, np.linalg.inv(Gamma)), 0)) / sig
    scale = mm_scale_value(d, sig, rho1, delta1)
    return MMEstimate(beta=beta, Gamma=Gamma, Sigma=sig ** 2 * Gamma, scale=scale,
                      s_scale=sig, weights=rho1.w(d), distances=d, iterations=it,
                      objective_path=tuple(path))


def mm_scale_value(d_over_sigma, s_scale, rho1: RhoSpec, delta1: float, weights=None):
    """``s * sqrt(mean(rho1(d)) / delta1)`` with ``d`` already divided by ``s``."""
    d = np.asarray(d_over_sigma)
    if weights is None:
        mean_rho = np.mean(rho1.rho(d), axis=-1)
    else:
        mean_rho = np.sum(weights * rho1.rho(d), axis=-1) / np.sum(weights, axis=-1)
    return s_scale * np.sqrt(mean_rho / delta1)


def mm_scale(data, s_init: SEstimate, mm: MMEstimate, rho1: RhoSpec, delta1: float) -> float:
    """Efficient M-scale computed from the MM residuals with the S-scale."""
    design = as_design(data)
    E = design.residuals(mm.beta)
    d = np.sqrt(np.maximum(mahalanobis_sq(E, np.linalg.inv(mm.Gamma)), 0)) / s_init.scale
    return float(mm_scale_value(d, s_init.scale, rho1, delta1))


# --------------------------------------------------------------------------
# public fitting entry points


def fit(data, config: FitConfig = FitConfig(), tuning: Optional[TuningConstants] = None,
        *, restriction: Optional[RestrictionSpec] = None, starts: Sequence = ()) -> RobustFit:
    """S followed by MM estimation, optionally under a restriction.

    ``starts`` are extra starting values given as full-model coefficient
    vectors (optionally paired with a scatter matrix).
    """
    design = as_design(data)
    tuning = tuning or tuning_for(design.m)
    param = parametrization_for(restriction, design.p)
    work = param.design(design)
    conv_starts = []
    for st in starts:
        beta, Sig = (st if isinstance(st, tuple) else (st, None))
        conv_starts.append((param.from_beta(beta), Sig))
    s = s_estimate(work, config, tuning, diagonal=param.diagonal, starts=conv_starts)
    mm = mm_estimate(work, s, tuning.rho1, delta1=tuning.delta1, diagonal=param.diagonal)
    return RobustFit(s, mm, tuning, param, config)


def restricted_fit(data, restriction: RestrictionSpec, config: FitConfig = FitConfig(),
                   tuning: Optional[TuningConstants] = None, *, starts: Sequence = ()):
    """Restricted S and MM estimates; returns ``(SEstimate, MMEstimate)`` in full coordinates.

    For the linear kind, ``R beta_hat = q`` holds to rounding precision.
    """
    rf = fit(data, config, tuning, restriction=restriction, starts=starts)
    return (replace(rf.s, beta=rf.beta_s), replace(rf.mm, beta=rf.beta_mm))


def fit_from_start(data, beta, Sigma=None, config: FitConfig = FitConfig(),
                   tuning: Optional[TuningConstants] = None, *,
                   restriction: Optional[RestrictionSpec] = None) -> RobustFit:
    """S and MM estimates obtained by iterating from one given start (no subsampling).

    The result is the local S-solution reached from ``(beta, Sigma)``; use it to
    reproduce or inspect a particular solution of the estimating equations.
    """
    design = as_design(data)
    tuning = tuning or tuning_for(design.m)
    param = parametrization_for(restriction, design.p)
    work = param.design(design)
    g = param.from_beta(np.asarray(beta, dtype=float))
    if Sigma is None:
        E = work.residuals(g)
        Sigma = E.T @ E / work.n
    Sigma = np.asarray(Sigma, dtype=float)
    if param.diagonal:
        Sigma = Sigma * np.eye(design.m)
    engine = _SEngine(work, tuning.rho0, tuning.delta0, param.diagonal)
    betas, Gammas = g[None], _sym(phi(Sigma[None]))
    s, _, q = engine.scale(betas, Gammas, raise_on_exact=True)
    betas, Gammas, s, q, it = engine.iterate(betas, Gammas, s, q, config.max_iter, tol=1e-11)
    scale = float(s[0])
    dist = np.sqrt(np.maximum(q[0], 0.0)) / scale
    se = SEstimate(beta=betas[0], Sigma=scale ** 2 * Gammas[0], scale=scale, Gamma=Gammas[0],
                   weights=tuning.rho0.w(dist), distances=dist, iterations=it, n_candidates=1,
                   candidate_scales=(scale,))
    mm = mm_estimate(work, se, tuning.rho1, delta1=tuning.delta1, diagonal=param.diagonal)
    return RobustFit(se, mm, tuning, param, config)
