"""Per-instance ZCA whitening with RBLW shrinkage and a power-iteration eigen backward.

Every function here takes either plain arrays or traced :class:`~voronoi_pool.diffcore.Value`
objects. The eigendecomposition is a single custom tape node whose forward is an
exact Jacobi solve; its backward is selected by ``backward``:

``"svdpi"``
    truncated power-series gradients per eigenpair, propagated through the
    deflation sequence (stable under repeated eigenvalues);
``"analytic"``
    the textbook ``1/(lambda_j - lambda_i)`` formula (diverges on ties);
``"none"``
    no gradient through the decomposition at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .linalg import sym_eig

DEFAULT_EPS = 1e-5
POWER_TERMS = 20
BACKWARD_MODES = ("svdpi", "analytic", "none")


@dataclass(frozen=True)
class ShrinkageResult:
    mean: np.ndarray  # C x 1
    centered: np.ndarray  # C x M
    sample_cov: np.ndarray  # C x C
    target: np.ndarray  # C x C, (Tr/C) I
    rho: float
    shrunk: np.ndarray  # C x C
    eps: float = DEFAULT_EPS

    @property
    def regularized(self) -> np.ndarray:
        return self.shrunk + self.eps * np.eye(self.shrunk.shape[0])


@dataclass(frozen=True)
class WhitenedDescriptor:
    Z: np.ndarray  # C x M
    sigma: float

    @property
    def flattened(self) -> np.ndarray:
        return self.Z.reshape(-1, order="F")

    @property
    def scaled(self) -> np.ndarray:
        return self.flattened / self.sigma


def center(Xt):
    """Subtract the mean cell column; returns ``(centered, mean)``."""
    C, M = dc.data_of(Xt).shape
    if M < 2:
        raise ValueError(f"center: need at least 2 cells, got M={M}")
    mu = dc.matmul(Xt, np.full((M, 1), 1.0 / M))
    Xbar = dc.matmul(Xt, np.eye(M) - np.full((M, M), 1.0 / M))
    return Xbar, mu


def sample_covariance(Xbar):
    """``Xbar Xbar^T / M`` (biased, matching the per-instance estimate)."""
    M = dc.data_of(Xbar).shape[1]
    return dc.scalar_mul(dc.matmul(Xbar, dc.transpose(Xbar)), 1.0 / M)


def rblw_coefficient(Sigma, M: int):
    """Clamped RBLW shrinkage weight toward the trace-matched identity.

    When the denominator vanishes (Sigma proportional to I) the weight is 1.
    """
    S = dc.data_of(Sigma)
    C = S.shape[0]
    if M < 2:
        raise ValueError(f"rblw: need M >= 2, got {M}")
    t_val = float(np.trace(S))
    t2_val = float(np.sum(S * S.T))
    den_val = (M + 2) * (t2_val - t_val * t_val / C)
    if den_val <= 1e-14 * max(1.0, t_val * t_val):
        return np.ones((1, 1))
    t = dc.trace(Sigma)
    t2 = dc.sum_(dc.mul(Sigma, dc.transpose(Sigma)))
    tt = dc.mul(t, t)
    num = dc.add(dc.scalar_mul(t2, (M - 2) / M), tt)
    den = dc.scalar_mul(dc.sub(t2, dc.scalar_mul(tt, 1.0 / C)), M + 2)
    return dc.minimum_const(dc.div(num, den), 1.0)


def rblw_shrink(Sigma, M: int, rho=None):
    """``(rho, rho * (Tr/C) I + (1 - rho) * Sigma)``; pass ``rho`` to override the estimate."""
    C = dc.data_of(Sigma).shape[0]
    r = rblw_coefficient(Sigma, M) if rho is None else np.array([[float(rho)]])
    target = dc.smul(dc.trace(Sigma), np.eye(C) / C)
    shrunk = dc.add(dc.smul(r, target), dc.smul(dc.sub(np.ones((1, 1)), r), Sigma))
    return r, shrunk


def svdpi_forward(A) -> tuple[np.ndarray, np.ndarray]:
    """Exact eigenpairs ``(Q, lambdas)``, eigenvalues descending."""
    e = sym_eig(dc.data_of(A))
    return e.eigenvectors, e.eigenvalues


def svdpi_backward(A, Q, lam, grad_Q, grad_lam, terms: int = POWER_TERMS) -> np.ndarray:
    """Gradient w.r.t. ``A`` from eigenvector/eigenvalue adjoints via power-iteration series.

    Eigenpair j is treated as the fixed point of power iteration on the deflated
    matrix ``A_j = A_{j-1} - A_{j-1} u u^T``; its vector adjoint is mapped by
    ``sum_k (A_j/||A_j u||)^k (I - u u^T) / ||A_j u||`` and the deflation
    steps are differentiated on the way back to ``A``.
    """
    A = np.asarray(A, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64).ravel()
    gQ = np.asarray(grad_Q, dtype=np.float64)
    gl = np.asarray(grad_lam, dtype=np.float64).ravel()
    n = A.shape[0]
    for j in range(n):
        if not (np.all(np.isfinite(gQ[:, j])) and np.isfinite(gl[j])):
            raise FloatingPointError(f"svdpi_backward: non-finite upstream gradient at eigenpair {j}")

    deflated = [A]
    for j in range(n - 1):
        u = Q[:, j:j + 1]
        Aj = deflated[-1]
        deflated.append(Aj - (Aj @ u) @ u.T)

    G_next = np.zeros_like(A)  # adjoint of A_{j+1}
    for j in range(n - 1, -1, -1):
        Aj = deflated[j]
        u = Q[:, j:j + 1]
        gu = gQ[:, j:j + 1].copy()
        gA = u @ u.T * gl[j]
        if j < n - 1:
            gA += G_next - (G_next @ u) @ u.T
            gu -= Aj.T @ (G_next @ u) + G_next.T @ (Aj @ u)
        Au = Aj @ u
        nrm = float(np.sqrt(np.sum(Au * Au)))
        y = (gu - u * float((u.T @ gu)[0, 0])) / nrm
        acc = y.copy()
        for _ in range(terms - 1):
            y = Aj @ y / nrm
            acc += y
        gA += acc @ u.T
        G_next = gA
    return 0.5 * (G_next + G_next.T)


def eig_backward_analytic(Q, lam, grad_Q, grad_lam) -> np.ndarray:
    """Textbook eigen backward, ``Q (F o Q^T dQ + diag(dlam)) Q^T`` with F_ij = 1/(l_j - l_i)."""
    Q = np.asarray(Q, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64).ravel()
    gaps = lam[None, :] - lam[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        F = 1.0 / gaps
        np.fill_diagonal(F, 0.0)
        inner = F * (Q.T @ np.asarray(grad_Q)) + np.diag(np.asarray(grad_lam, dtype=np.float64).ravel())
        G = Q @ inner @ Q.T
    return 0.5 * (G + G.T)


def eig_node(A, backward: str = "svdpi", terms: int = POWER_TERMS):
    """Eigendecomposition as one tape node; returns ``(Q, lambdas as column)``."""
    if backward not in BACKWARD_MODES:
        raise ValueError(f"unknown eigen backward mode {backward!r}")

    def fwd(Ad):
        Q, lam = svdpi_forward(Ad)

        def vjp(gQ, glam):
            if backward == "svdpi":
                return (svdpi_backward(Ad, Q, lam, gQ, glam, terms),)
            if backward == "analytic":
                return (eig_backward_analytic(Q, lam, gQ, glam),)
            return (np.zeros_like(Ad),)
        return (Q, lam.reshape(-1, 1)), vjp
    return dc.custom(f"eig[{backward}]", [A], fwd)


def zca_whiten(Xt, eps: float = DEFAULT_EPS, rho=None, backward: str = "svdpi",
               details: dict | None = None):
    """Whitened cell matrix ``Q L^{-1/2} Q^T Xbar`` for one instance.

    ``rho`` forces the shrinkage weight (0 disables RBLW). When ``details`` is a
    dict it is filled with the intermediate quantities.
    """
    C, M = dc.data_of(Xt).shape
    Xbar, mu = center(Xt)
    Sigma = sample_covariance(Xbar)
    r, shrunk = rblw_shrink(Sigma, M, rho)
    A = dc.add(shrunk, eps * np.eye(C)) if eps else shrunk
    Q, lam = eig_node(A, backward)
    W = dc.matmul(dc.matmul(Q, dc.diag(dc.pow_(lam, -0.5))), dc.transpose(Q))
    Z = dc.matmul(W, Xbar)
    if details is not None:
        details.update(mean=dc.data_of(mu), centered=dc.data_of(Xbar), sample_cov=dc.data_of(Sigma),
                       rho=float(dc.data_of(r)[0, 0]), shrunk=dc.data_of(shrunk),
                       eigvecs=dc.data_of(Q), eigvals=dc.data_of(lam).ravel())
    return Z


def scale(Z, sigma: float):
    """Column-major flatten (cell 1 first) divided by ``sigma``; a column vector."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return dc.scalar_mul(dc.vec(Z), 1.0 / sigma)


def shrinkage(Xt, eps: float = DEFAULT_EPS, rho=None) -> ShrinkageResult:
    """Numeric summary of the centering and shrinkage steps for one descriptor."""
    Xt = np.asarray(Xt, dtype=np.float64)
    Xbar, mu = center(Xt)
    Sigma = sample_covariance(Xbar)
    r, shrunk = rblw_shrink(Sigma, Xt.shape[1], rho)
    C = Xt.shape[0]
    return ShrinkageResult(mean=mu, centered=Xbar, sample_cov=Sigma,
                           target=np.trace(Sigma) / C * np.eye(C), rho=float(r[0, 0]),
                           shrunk=shrunk, eps=eps)


def whiten_descriptor(Xt, sigma: float = 1.0, eps: float = DEFAULT_EPS, rho=None) -> WhitenedDescriptor:
    return WhitenedDescriptor(np.asarray(zca_whiten(np.asarray(Xt, dtype=np.float64), eps, rho)), sigma)


def sigma_for(mode: str, M: int) -> float:
    """Resolve a sigma mode: ``sqrt_m``, ``m`` or an explicit positive number."""
    if mode == "sqrt_m":
        return float(np.sqrt(M))
    if mode == "m":
        return float(M)
    value = float(mode)
    if value <= 0:
        raise ValueError(f"sigma must be positive, got {value}")
    return value
