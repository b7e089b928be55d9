"""SUR data model and classical estimators (OLS, GLS, iterated FGLS / MLE).

Internally every estimator works on a :class:`Design`: for each observation
``i`` an ``m x p`` design matrix ``x_i`` (row ``j`` holds block ``j``'s
regressors in block ``j``'s coefficient slots) and an ``m``-vector ``y_i``.
This covers the block-diagonal SUR layout as well as reparametrized designs
produced by cross-block linear restrictions. Kronecker products of the form
``Sigma^{-1} (x) I_n`` are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, RankDeficiencyError, SingularCovarianceError

RANK_TOL = 1e-10


def check_full_column_rank(a: np.ndarray, what: str = "design") -> None:
    """Raise if ``a`` is rank deficient (pivoted QR, relative threshold)."""
    if a.shape[0] < a.shape[1]:
        raise RankDeficiencyError(f"{what}: fewer rows than columns")
    r = sla.qr(a, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    if diag.size and diag[-1] <= RANK_TOL * diag[0]:
        raise RankDeficiencyError(f"{what} is rank deficient")


@dataclass(frozen=True)
class Design:
    """Observation-wise view: ``x`` is ``(n, m, p)``, ``y`` is ``(n, m)``."""

    x: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[2]

    def residuals(self, beta) -> np.ndarray:
        return self.y - np.einsum("imp,p->im", self.x, beta)

    def take(self, idx) -> "Design":
        return Design(self.x[idx], self.y[idx])

    def with_y(self, y) -> "Design":
        return Design(self.x, np.asarray(y, dtype=float))

    def block_nonzero_cols(self) -> int:
        """Largest number of coefficients entering any single block."""
        used = np.any(self.x != 0, axis=0)
        return int(used.sum(axis=1).max())

    def reparametrize(self, Z: np.ndarray, beta0: np.ndarray) -> "Design":
        """Design of ``gamma`` under ``beta = beta0 + Z gamma``."""
        x = np.einsum("imp,pk->imk", self.x, Z)
        return Design(x, self.residuals(beta0))


@dataclass(frozen=True)
class SurDataset:
    """``m`` regression blocks sharing ``n`` observations.

    Parameters
    ----------
    blocks : sequence of (X_j, y_j)
        ``X_j`` is ``n x p_j``, ``y_j`` has length ``n``.
    block_names, predictor_names : optional labels.
    """

    blocks: tuple
    block_names: Optional[tuple] = None
    predictor_names: Optional[tuple] = None
    _design: Design = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        blocks = []
        for j, (X, y) in enumerate(self.blocks):
            X = np.array(X, dtype=float)
            y = np.array(y, dtype=float).ravel()
            if X.ndim == 1:
                X = X[:, None]
            if X.ndim != 2 or X.shape[1] < 1:
                raise DimensionError(f"block {j}: X must be an n x p_j matrix")
            if X.shape[0] != y.shape[0]:
                raise DimensionError(f"block {j}: X has {X.shape[0]} rows, y has {y.shape[0]}")
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
                raise DimensionError(f"block {j}: missing or non-finite values")
            X.setflags(write=False)
            y.setflags(write=False)
            blocks.append((X, y))
        if not blocks:
            raise DimensionError("at least one block is required")
        ns = {X.shape[0] for X, _ in blocks}
        if len(ns) != 1:
            raise DimensionError(f"blocks have unequal row counts {sorted(ns)}")
        object.__setattr__(self, "blocks", tuple(blocks))
        m = len(blocks)
        if self.block_names is None:
            object.__setattr__(self, "block_names", tuple(f"y{j + 1}" for j in range(m)))
        if self.predictor_names is None:
            names = tuple(tuple(f"x{k}" for k in range(X.shape[1])) for X, _ in blocks)
            object.__setattr__(self, "predictor_names", names)
        if len(self.block_names) != m or len(self.predictor_names) != m:
            raise DimensionError("label lists do not match the number of blocks")
        n, p = self.n, self.p
        if n <= p:
            raise DimensionError(f"need n > p for estimability (n={n}, p={p})")
        x = np.zeros((n, m, p))
        for j, (X, _) in enumerate(blocks):
            x[:, j, self.offsets[j]:self.offsets[j + 1]] = X
        y = np.column_stack([yj for _, yj in blocks])
        object.__setattr__(self, "_design", Design(x, y))

    @property
    def n(self) -> int:
        return self.blocks[0][0].shape[0]

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def p_j(self) -> tuple:
        return tuple(X.shape[1] for X, _ in self.blocks)

    @property
    def p(self) -> int:
        return sum(self.p_j)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.p_j)])

    @property
    def design(self) -> Design:
        return self._design

    @property
    def Y(self) -> np.ndarray:
        return self._design.y

    @property
    def Xtilde(self) -> np.ndarray:
        return np.hstack([X for X, _ in self.blocks])

    def coef_labels(self) -> list:
        return [f"{b}:{v}" for b, names in zip(self.block_names, self.predictor_names)
                for v in names]

    def split_beta(self, beta) -> list:
        o = self.offsets
        return [np.asarray(beta)[o[j]:o[j + 1]] for j in range(self.m)]

    def coef_matrix(self, beta) -> np.ndarray:
        """Block-diagonal ``p x m`` coefficient matrix ``B``."""
        B = np.zeros((self.p, self.m))
        o = self.offsets
        for j in range(self.m):
            B[o[j]:o[j + 1], j] = beta[o[j]:o[j + 1]]
        return B

    def residuals(self, beta) -> np.ndarray:
        return self._design.residuals(beta)

    def take(self, idx) -> "SurDataset":
        idx = np.asarray(idx)
        return SurDataset(tuple((X[idx], y[idx]) for X, y in self.blocks),
                          self.block_names, self.predictor_names)

    def with_Y(self, Y) -> "SurDataset":
        Y = np.asarray(Y, dtype=float)
        return SurDataset(tuple((X, Y[:, j]) for j, (X, _) in enumerate(self.blocks)),
                          self.block_names, self.predictor_names)


def as_design(data) -> Design:
    return data.design if isinstance(data, SurDataset) else data


@dataclass(frozen=True)
class StackedForm:
    X: np.ndarray
    y: np.ndarray
    Xtilde: np.ndarray
    Y: np.ndarray
    p_j: tuple


def stack(dataset: SurDataset) -> StackedForm:
    """Single-equation (``nm x p`` block-diagonal) and multivariate views."""
    X = sla.block_diag(*[X for X, _ in dataset.blocks])
    y = np.concatenate([y for _, y in dataset.blocks])
    return StackedForm(X, y, dataset.Xtilde, dataset.Y.copy(), dataset.p_j)


def unstack(form: StackedForm) -> SurDataset:
    n = form.Y.shape[0]
    o = np.concatenate([[0], np.cumsum(form.p_j)])
    blocks = []
    for j in range(len(form.p_j)):
        rows = slice(j * n, (j + 1) * n)
        blocks.append((form.X[rows, o[j]:o[j + 1]], form.y[rows]))
    return SurDataset(tuple(blocks))


def ols_per_block(dataset: SurDataset):
    """Equation-by-equation least squares; returns ``(beta, residuals)``."""
    betas = []
    for j, (X, y) in enumerate(dataset.blocks):
        check_full_column_rank(X, f"block {j} design")
        betas.append(sla.lstsq(X, y)[0])
    beta = np.concatenate(betas)
    return beta, dataset.residuals(beta)


def weighted_gls(design: Design, Sigma_inv: np.ndarray, weights=None) -> np.ndarray:
    """``(sum_i w_i x_i' S x_i)^{-1} sum_i w_i x_i' S y_i`` with ``S = Sigma_inv``."""
    x, y = design.x, design.y
    xs = np.einsum("imp,mk->ipk", x, Sigma_inv)          # x_i' S, (n, p, m)
    if weights is not None:
        xs = xs * np.asarray(weights)[:, None, None]
    U = np.einsum("ipk,ikq->pq", xs, x)
    W = np.einsum("ipk,ik->p", xs, y)
    try:
        return sla.solve(U, W, assume_a="pos")
    except (sla.LinAlgError, ValueError) as exc:
        raise RankDeficiencyError("singular GLS normal equations") from exc


def gls(data, Sigma) -> np.ndarray:
    """Generalized least squares for known error covariance ``Sigma``."""
    design = as_design(data)
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape != (design.m, design.m):
        raise DimensionError("Sigma must be m x m")
    try:
        Sinv = np.linalg.inv(sla.cholesky(Sigma, lower=True))
    except sla.LinAlgError as exc:
        raise SingularCovarianceError("Sigma is not positive definite") from exc
    return weighted_gls(design, Sinv.T @ Sinv)


def loglik(data, beta, Sigma) -> float:
    design = as_design(data)
    n, m = design.n, design.m
    E = design.residuals(beta)
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        return -np.inf
    quad = np.einsum("ij,jk,ik->", E, np.linalg.inv(Sigma), E)
    return float(-0.5 * m * n * np.log(2 * np.pi) - 0.5 * n * logdet - 0.5 * quad)


@dataclass(frozen=True)
class ClassicalFit:
    beta: np.ndarray
    Sigma: np.ndarray
    iterations: int
    loglik: float
    loglik_path: tuple = ()

    @property
    def correlation(self) -> np.ndarray:
        s = np.sqrt(np.diag(self.Sigma))
        return self.Sigma / np.outer(s, s)


def _residual_cov(E: np.ndarray) -> np.ndarray:
    n, m = E.shape
    if m >= n:
        raise SingularCovarianceError(f"m = {m} >= n = {n}: residual covariance is singular")
    S = E.T @ E / n
    S = 0.5 * (S + S.T)
    w = np.linalg.eigvalsh(S)
    if w[0] <= 1e-12 * max(w[-1], np.finfo(float).tiny):
        raise SingularCovarianceError("residual covariance is singular")
    return S


def fgls_step(data, beta_start) -> tuple:
    """One feasible GLS step from ``beta_start``: returns ``(beta, Sigma_hat)``."""
    design = as_design(data)
    Sigma = _residual_cov(design.residuals(beta_start))
    return gls(design, Sigma), Sigma


def mle_fit(data, tol: float = 1e-10, max_iter: int = 500,
            beta_start=None) -> ClassicalFit:
    """Fully iterated FGLS, i.e. the Gaussian maximum likelihood estimator.

    Alternates ``beta = GLS(Sigma)`` and ``Sigma = E'E / n`` until the largest
    absolute change in ``(beta, vech Sigma)`` drops below ``tol``.
    """
    design = as_design(data)
    if design.m >= design.n:
        raise SingularCovarianceError(f"m = {design.m} >= n = {design.n}")
    if beta_start is None:
        if isinstance(data, SurDataset):
            beta_start = ols_per_block(data)[0]
        else:
            beta_start = weighted_gls(design, np.eye(design.m))
    beta = np.asarray(beta_start, dtype=float)
    Sigma = _residual_cov(design.residuals(beta))
    iu = np.triu_indices(design.m)
    path = []
    for it in range(1, max_iter + 1):
        beta_new = gls(design, Sigma)
        Sigma_new = _residual_cov(design.residuals(beta_new))
        path.append(loglik(design, beta_new, Sigma_new))
        change = max(np.max(np.abs(beta_new - beta)),
                     np.max(np.abs(Sigma_new[iu] - Sigma[iu])))
        beta, Sigma = beta_new, Sigma_new
        if change < tol:
            break
    return ClassicalFit(beta, Sigma, it, path[-1], tuple(path))
