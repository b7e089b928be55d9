"""Fast and robust bootstrap for S/MM SUR estimates.

The MM and S estimating equations are written as a fixed point
``theta = g(theta)`` with ``theta = (beta_mm, vec Gamma_mm, vec Sigma_s,
beta_s)``. A bootstrap replicate evaluates ``g`` once on the resample with
the weights frozen at the original estimate and applies the linear
correction ``(I - grad g)^{-1}``.

``vec`` stacks columns (Fortran order) and keeps all ``m**2`` entries.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (InsufficientReplicatesError, NumericFailure,
                     SingularCovarianceError, SingularResampleError)
from .model import Design, as_design
from .rho import RhoSpec, TuningConstants
from .robust import RobustFit, _sym, mahalanobis_sq

log = logging.getLogger(__name__)

SKIP_WARN_FRACTION = 0.05


def vec(A):
    A = np.asarray(A)
    return np.swapaxes(A, -1, -2).reshape(A.shape[:-2] + (-1,))


def unvec(v, m):
    v = np.asarray(v)
    return np.swapaxes(v.reshape(v.shape[:-1] + (m, m)), -1, -2)


@dataclass(frozen=True)
class ThetaVector:
    beta_mm: np.ndarray
    Gamma_mm: np.ndarray
    Sigma_s: np.ndarray
    beta_s: np.ndarray

    @property
    def k(self) -> int:
        return self.beta_mm.size

    @property
    def m(self) -> int:
        return self.Gamma_mm.shape[0]

    @property
    def dim(self) -> int:
        return 2 * self.k + 2 * self.m ** 2

    def pack(self) -> np.ndarray:
        return np.concatenate([self.beta_mm, vec(self.Gamma_mm), vec(self.Sigma_s), self.beta_s])

    @classmethod
    def unpack(cls, v, k: int, m: int) -> "ThetaVector":
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != 2 * k + 2 * m * m:
            raise ValueError(f"theta has length {v.shape[-1]}, expected {2 * k + 2 * m * m}")
        mm = m * m
        return cls(v[..., :k], unvec(v[..., k:k + mm], m), unvec(v[..., k + mm:k + 2 * mm], m),
                   v[..., k + 2 * mm:])

    @classmethod
    def from_fit(cls, fit: RobustFit) -> "ThetaVector":
        return cls(fit.mm.beta.copy(), fit.mm.Gamma.copy(), fit.s.Sigma.copy(), fit.s.beta.copy())

    def labels(self, coef_labels=None) -> list:
        coef = list(coef_labels) if coef_labels is not None else [f"b{i}" for i in range(self.k)]
        mat = [f"{a}{b}" for b in range(1, self.m + 1) for a in range(1, self.m + 1)]
        return ([f"mm:{c}" for c in coef] + [f"Gamma_mm[{s}]" for s in mat]
                + [f"Sigma_s[{s}]" for s in mat] + [f"s:{c}" for c in coef])


# --------------------------------------------------------------------------
# g and its Jacobian


def _weights_part(x, y, beta, Cinv, s2, rho: RhoSpec):
    E = y - x @ beta
    q = mahalanobis_sq(E, Cinv)
    d = np.sqrt(np.maximum(q, 0.0) / s2)
    return E, q, d


def _gls(x, y, Cinv, w, counts):
    cw = w * counts
    xc = np.einsum("iap,ab->ipb", x, Cinv)
    U = np.einsum("i,ipb,ibq->pq", cw, xc, x)
    W = np.einsum("i,ipb,ib->p", cw, xc, y)
    try:
        np.linalg.cholesky(_sym(U))
    except np.linalg.LinAlgError:
        raise SingularResampleError("weighted cross-product matrix is singular") from None
    return U, np.linalg.solve(U, W)


def _phi_part(V, diagonal):
    if diagonal:
        V = V * np.eye(V.shape[-1])
    sign, logdet = np.linalg.slogdet(V)
    if sign <= 0:
        raise SingularResampleError("weighted residual scatter is not positive definite")
    return V * np.exp(-logdet / V.shape[-1])


def g_eval(theta: ThetaVector, data, tuning: TuningConstants, counts=None,
           diagonal: bool = False) -> ThetaVector:
    """Evaluate the fixed-point map on the (re)sample given by ``counts``."""
    design = as_design(data)
    x, y = design.x, design.y
    n, m, _ = x.shape
    c = np.ones(n) if counts is None else np.asarray(counts, dtype=float)
    rho0, rho1 = tuning.rho0, tuning.rho1
    b1, G, S, b0 = theta.beta_mm, theta.Gamma_mm, theta.Sigma_s, theta.beta_s
    sign, logdetS = np.linalg.slogdet(S)
    if sign <= 0:
        raise SingularCovarianceError("S-scatter in theta is not positive definite")
    s2 = np.exp(logdetS / m)
    Ginv, Sinv = np.linalg.inv(G), np.linalg.inv(S)

    E1, _, d1 = _weights_part(x, y, b1, Ginv, s2, rho1)
    w1 = rho1.w(d1)
    _, g1 = _gls(x, y, Ginv, w1, c)
    g2 = _phi_part(np.einsum("i,ia,ib->ab", c * w1, E1, E1), diagonal)

    E0, _, d0 = _weights_part(x, y, b0, Sinv, 1.0, rho0)
    w0 = rho0.w(d0)
    V0 = np.einsum("i,ia,ib->ab", c * w0, E0, E0)
    if diagonal:
        V0 = V0 * np.eye(m)
    sv = np.sum(c * rho0.v(d0, tuning.delta0))
    g3 = m * V0 / sv
    _, g4 = _gls(x, y, Sinv, w0, c)
    return ThetaVector(g1, g2, g3, g4)


def _dq_dbeta(x, E, Cinv):
    Cs = 0.5 * (Cinv + Cinv.T)
    return -2.0 * np.einsum("iap,ab,ib->ip", x, Cs, E)


def _dq_dvecC(E, Cinv):
    left = E @ Cinv            # rows: (C^{-T} e)^T
    right = E @ Cinv.T         # rows: (C^{-1} e)^T
    return -vec(np.einsum("ia,ib->iab", left, right))


def _gls_jac(x, y, Cinv, w, g, dw):
    """Derivative of ``U^{-1} W`` given weight derivatives ``dw`` (n x D).

    Returns ``(U^{-1} sum_i a_i dw_i^T, U^{-1} sum_i w_i T_i)`` where the
    second term is the derivative through ``Cinv`` w.r.t. ``vec C``.
    """
    n, m, k = x.shape
    xc = np.einsum("iap,ab->ipb", x, Cinv)
    U = np.einsum("i,ipb,ibq->pq", w, xc, x)
    r = y - x @ g
    a = np.einsum("ipb,ib->ip", xc, r)
    J_w = np.linalg.solve(U, a.T @ dw)
    z = r @ Cinv.T                                   # rows: (C^{-1} r_i)^T
    T = -np.einsum("i,ipa,ib->ipba", w, xc, z).reshape(n, k, m * m)
    J_c = np.linalg.solve(U, T.sum(axis=0))
    return J_w, J_c


def _phi_jac(V, diagonal):
    m = V.shape[0]
    mask = vec(np.eye(m)) if diagonal else np.ones(m * m)
    Vd = V * np.eye(m) if diagonal else V
    sign, logdet = np.linalg.slogdet(Vd)
    scale = np.exp(-logdet / m)
    Sphi = scale * (np.eye(m * m) - np.outer(vec(Vd), vec(np.linalg.inv(Vd).T)) / m)
    return Sphi * mask[None, :]


def _outer_vec(E):
    return vec(np.einsum("ia,ib->iab", E, E))


def _d_vec_eet_dbeta(x, E):
    """``d vec(e_i e_i^T) / d beta`` for ``e_i = y_i - x_i beta``: (n, m^2, k)."""
    n, m, k = x.shape
    t1 = np.einsum("ib,iap->ibap", E, x)      # e_b x_a  at row index a + m b
    t2 = np.einsum("ia,ibp->ibap", E, x)      # e_a x_b
    return -(t1 + t2).reshape(n, m * m, k)


def grad_g(theta: ThetaVector, data, tuning: TuningConstants, diagonal: bool = False,
           counts=None) -> np.ndarray:
    """Analytic Jacobian of :func:`g_eval` with respect to the packed theta."""
    design = as_design(data)
    x, y = design.x, design.y
    n, m, k = x.shape
    c = np.ones(n) if counts is None else np.asarray(counts, dtype=float)
    mm = m * m
    rho0, rho1 = tuning.rho0, tuning.rho1
    b1, G, S, b0 = theta.beta_mm, theta.Gamma_mm, theta.Sigma_s, theta.beta_s
    sign, logdetS = np.linalg.slogdet(S)
    if sign <= 0:
        raise SingularCovarianceError("S-scatter in theta is not positive definite")
    s2 = np.exp(logdetS / m)
    Ginv, Sinv = np.linalg.inv(G), np.linalg.inv(S)
    vecSinvT = vec(Sinv.T)

    # MM weights: d^2 = q / s2 with s2 = |S|^{1/m}
    E1, q1, d1 = _weights_part(x, y, b1, Ginv, s2, rho1)
    w1 = c * rho1.w(d1)
    wpu1 = c * rho1.w_prime_over_u(d1)
    # d w / d theta-part = wpu * d * dd = wpu * (dq / (2 s2) - q ds2 / (2 s2^2))
    dw1_b = (wpu1 / (2 * s2))[:, None] * _dq_dbeta(x, E1, Ginv)
    dw1_G = (wpu1 / (2 * s2))[:, None] * _dq_dvecC(E1, Ginv)
    dw1_S = (-wpu1 * d1 ** 2 / (2 * m))[:, None] * vecSinvT[None, :]

    _, g1 = _gls(x, y, Ginv, rho1.w(d1), c)
    J1_wb, _ = _gls_jac(x, y, Ginv, w1, g1, dw1_b)
    J1_wG, J1_G = _gls_jac(x, y, Ginv, w1, g1, dw1_G)
    J1_wS, _ = _gls_jac(x, y, Ginv, w1, g1, dw1_S)
    J11, J12, J13 = J1_wb, J1_wG + J1_G, J1_wS

    V1 = np.einsum("i,ia,ib->ab", w1, E1, E1)
    ee1 = _outer_vec(E1)
    dV1_b = ee1.T @ dw1_b + np.einsum("i,ijp->jp", w1, _d_vec_eet_dbeta(x, E1))
    dV1_G = ee1.T @ dw1_G
    dV1_S = ee1.T @ dw1_S
    P1 = _phi_jac(V1, diagonal)
    J21, J22, J23 = P1 @ dV1_b, P1 @ dV1_G, P1 @ dV1_S

    # S part: d^2 = q with C = S
    E0, q0, d0 = _weights_part(x, y, b0, Sinv, 1.0, rho0)
    w0 = c * rho0.w(d0)
    wpu0 = c * rho0.w_prime_over_u(d0)
    pp0 = c * rho0.psi_prime(d0)
    dq0_b = _dq_dbeta(x, E0, Sinv)
    dq0_S = _dq_dvecC(E0, Sinv)
    dw0_b = (wpu0 / 2)[:, None] * dq0_b
    dw0_S = (wpu0 / 2)[:, None] * dq0_S
    V0 = np.einsum("i,ia,ib->ab", w0, E0, E0)
    mask = vec(np.eye(m)) if diagonal else np.ones(mm)
    V0m = V0 * np.eye(m) if diagonal else V0
    sv = np.sum(c * rho0.v(d0, tuning.delta0))
    ee0 = _outer_vec(E0)
    dV0_b = ee0.T @ dw0_b + np.einsum("i,ijp->jp", w0, _d_vec_eet_dbeta(x, E0))
    dV0_S = ee0.T @ dw0_S
    # d v0(d) = psi'(d) d dd = psi'(d) dq / 2
    dsv_b = (pp0 / 2) @ dq0_b
    dsv_S = (pp0 / 2) @ dq0_S
    J33 = m * (mask[:, None] * dV0_S) / sv - m * np.outer(vec(V0m), dsv_S) / sv ** 2
    J34 = m * (mask[:, None] * dV0_b) / sv - m * np.outer(vec(V0m), dsv_b) / sv ** 2

    _, g4 = _gls(x, y, Sinv, rho0.w(d0), c)
    J4_wb, _ = _gls_jac(x, y, Sinv, w0, g4, dw0_b)
    J4_wS, J4_S = _gls_jac(x, y, Sinv, w0, g4, dw0_S)
    J43, J44 = J4_wS + J4_S, J4_wb

    D = 2 * k + 2 * mm
    J = np.zeros((D, D))
    ib1, iG, iS, ib0 = (slice(0, k), slice(k, k + mm), slice(k + mm, k + 2 * mm),
                        slice(k + 2 * mm, D))
    J[ib1, ib1], J[ib1, iG], J[ib1, iS] = J11, J12, J13
    J[iG, ib1], J[iG, iG], J[iG, iS] = J21, J22, J23
    J[iS, iS], J[iS, ib0] = J33, J34
    J[ib0, iS], J[ib0, ib0] = J43, J44
    return J


def numeric_grad_g(theta: ThetaVector, data, tuning, diagonal=False, step=1e-6):
    """Central finite differences of :func:`g_eval` (testing oracle)."""
    v = theta.pack()
    k, m = theta.k, theta.m
    J = np.zeros((v.size, v.size))
    for j in range(v.size):
        h = step * max(1.0, abs(v[j]))
        vp, vm = v.copy(), v.copy()
        vp[j] += h
        vm[j] -= h
        gp = g_eval(ThetaVector.unpack(vp, k, m), data, tuning, diagonal=diagonal).pack()
        gm = g_eval(ThetaVector.unpack(vm, k, m), data, tuning, diagonal=diagonal).pack()
        J[:, j] = (gp - gm) / (2 * h)
    return J


@dataclass(frozen=True)
class CorrectionMatrix:
    M: np.ndarray
    cond_estimate: float


def correction_matrix(theta: ThetaVector, data, tuning, diagonal=False) -> CorrectionMatrix:
    J = grad_g(theta, data, tuning, diagonal)
    A = np.eye(J.shape[0]) - J
    M = np.linalg.solve(A, np.eye(J.shape[0]))
    if not np.all(np.isfinite(M)):
        raise NumericFailure("I - grad g is singular")
    return CorrectionMatrix(M, float(np.linalg.cond(A)))


# --------------------------------------------------------------------------
# resampling


def draw_resamples(n: int, N: int, seed: int, stream: int = 0) -> np.ndarray:
    """``(N, n)`` case-resampling indices; row ``b`` depends on ``(seed, stream, b)`` only."""
    out = np.empty((N, n), dtype=np.int64)
    for b in range(N):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, b)))
        out[b] = rng.integers(0, n, size=n)
    return out


def counts_from_indices(indices, n: int) -> np.ndarray:
    idx = np.atleast_2d(indices)
    C = np.zeros((idx.shape[0], n))
    rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
    np.add.at(C, (rows, idx.ravel()), 1.0)
    return C


class FRBEngine:
    """Precomputed per-observation pieces of ``g`` at a converged estimate.

    ``g*`` is linear in the resampling counts, so a batch of replicates is a
    handful of matrix products.
    """

    def __init__(self, fit_or_theta, data, tuning: Optional[TuningConstants] = None,
                 diagonal: Optional[bool] = None):
        if isinstance(fit_or_theta, RobustFit):
            fit = fit_or_theta
            self.design = fit.param.design(as_design(data))
            self.tuning = fit.tuning
            self.diagonal = fit.diagonal
            self.theta = ThetaVector.from_fit(fit)
            self.param = fit.param
        else:
            self.design = as_design(data)
            self.tuning = tuning
            self.diagonal = bool(diagonal)
            self.theta = fit_or_theta
            self.param = None
        self._setup()

    def _setup(self):
        x, y = self.design.x, self.design.y
        n, m, k = x.shape
        t, th = self.tuning, self.theta
        s2 = np.linalg.det(th.Sigma_s) ** (1.0 / m)
        Ginv, Sinv = np.linalg.inv(th.Gamma_mm), np.linalg.inv(th.Sigma_s)
        E1, _, d1 = _weights_part(x, y, th.beta_mm, Ginv, s2, t.rho1)
        E0, _, d0 = _weights_part(x, y, th.beta_s, Sinv, 1.0, t.rho0)
        w1, w0 = t.rho1.w(d1), t.rho0.w(d0)
        self.w_mm, self.w_s, self.d_mm, self.d_s = w1, w0, d1, d0
        xg = np.einsum("iap,ab->ipb", x, Ginv)
        xs = np.einsum("iap,ab->ipb", x, Sinv)
        self._A1 = (w1[:, None, None] * np.einsum("ipb,ibq->ipq", xg, x)).reshape(n, k * k)
        self._a1 = w1[:, None] * np.einsum("ipb,ib->ip", xg, y)
        self._V1 = (w1[:, None, None] * np.einsum("ia,ib->iab", E1, E1)).reshape(n, m * m)
        self._A0 = (w0[:, None, None] * np.einsum("ipb,ibq->ipq", xs, x)).reshape(n, k * k)
        self._a0 = w0[:, None] * np.einsum("ipb,ib->ip", xs, y)
        self._V0 = (w0[:, None, None] * np.einsum("ia,ib->iab", E0, E0)).reshape(n, m * m)
        self._v0 = t.rho0.v(d0, t.delta0)
        self._corr = None

    @property
    def correction(self) -> CorrectionMatrix:
        if self._corr is None:
            self._corr = correction_matrix(self.theta, self.design, self.tuning, self.diagonal)
        return self._corr

    def g_star(self, counts):
        """Batched ``g*(theta_hat)``: returns ``(G, ok)`` with ``G`` of shape (N, dim)."""
        C = np.atleast_2d(np.asarray(counts, dtype=float))
        n, m, k = self.design.x.shape
        N = C.shape[0]
        eye = np.eye(m)
        out = np.full((N, 2 * k + 2 * m * m), np.nan)
        ok = np.ones(N, dtype=bool)

        def solve(A, a):
            A = _sym((C @ A).reshape(N, k, k))
            ev = np.linalg.eigvalsh(A)
            good = ev[:, 0] > 1e-12 * np.maximum(np.abs(ev[:, -1]), np.finfo(float).tiny)
            sol = np.full((N, k), np.nan)
            if np.any(good):
                sol[good] = np.linalg.solve(A[good], (C @ a)[good][..., None])[..., 0]
            return sol, good

        g1, ok1 = solve(self._A1, self._a1)
        g4, ok4 = solve(self._A0, self._a0)
        V1 = (C @ self._V1).reshape(N, m, m)
        V0 = (C @ self._V0).reshape(N, m, m)
        if self.diagonal:
            V1, V0 = V1 * eye, V0 * eye
        sign, logdet = np.linalg.slogdet(V1)
        ok2 = sign > 0
        g2 = V1 * np.exp(-np.where(ok2, logdet, 0.0) / m)[:, None, None]
        sv = C @ self._v0
        ok3 = sv > 0
        g3 = m * V0 / np.where(ok3, sv, 1.0)[:, None, None]
        ok = ok1 & ok2 & ok3 & ok4
        out[:, :k] = g1
        out[:, k:k + m * m] = vec(g2)
        out[:, k + m * m:k + 2 * m * m] = vec(g3)
        out[:, k + 2 * m * m:] = g4
        return out, ok

    def replicates_from_counts(self, counts):
        """Corrected replicates ``theta_hat + M (g* - theta_hat)`` and a validity mask."""
        G, ok = self.g_star(counts)
        th = self.theta.pack()
        R = np.full_like(G, np.nan)
        if np.any(ok):
            R[ok] = th + (G[ok] - th) @ self.correction.M.T
        return R, ok


@dataclass
class ReplicateSet:
    replicates: np.ndarray            # (N_effective, dim) corrected theta replicates
    resample_indices: np.ndarray      # (N_effective, n)
    seed: int
    theta_hat: np.ndarray
    k: int
    m: int
    n_requested: int
    skipped: tuple = ()
    labels: list = field(default_factory=list)
    warning: Optional[str] = None

    @property
    def n_effective(self) -> int:
        return self.replicates.shape[0]

    def theta(self, b: int) -> ThetaVector:
        return ThetaVector.unpack(self.replicates[b], self.k, self.m)

    def column(self, j: int) -> np.ndarray:
        return self.replicates[:, j]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replicate"] + (self.labels or [f"theta{j}" for j in range(self.replicates.shape[1])]))
            for b, row in enumerate(self.replicates):
                w.writerow([b] + [repr(float(v)) for v in row])


def _skip_report(n_skipped: int, N: int):
    if n_skipped == 0:
        return None
    log.info("skipped %d of %d bootstrap resamples (singular)", n_skipped, N)
    if n_skipped > SKIP_WARN_FRACTION * N:
        msg = f"degenerate bootstrap: {n_skipped} of {N} resamples were singular and skipped"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        return msg
    return None


def frb_replicates(fit: RobustFit, data, N: int, seed: int = 0, *, stream: int = 0,
                   indices=None, coef_labels=None) -> ReplicateSet:
    """FRB replicates of the full theta vector by case resampling."""
    if N < 1:
        raise InsufficientReplicatesError("N must be >= 1")
    engine = FRBEngine(fit, data)
    n = engine.design.n
    idx = draw_resamples(n, N, seed, stream) if indices is None else np.atleast_2d(indices)
    R, ok = engine.replicates_from_counts(counts_from_indices(idx, n))
    skipped = tuple(np.flatnonzero(~ok).tolist())
    msg = _skip_report(len(skipped), idx.shape[0])
    return ReplicateSet(R[ok], idx[ok], seed, engine.theta.pack(), engine.theta.k,
                        engine.theta.m, idx.shape[0], skipped,
                        engine.theta.labels(coef_labels), msg)
