"""Spectral diagnostics of cell covariances and Gaussian W2 distances between cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import sqrtm_psd, sym_eig

RANK_TOL = 1e-5


@dataclass(frozen=True)
class CellGaussian:
    index: int
    mean: np.ndarray  # (C,)
    cov: np.ndarray  # (C, C)
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"cell {self.index}: need at least 2 samples, got {self.count}")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-10 * max(1.0, np.abs(self.cov).max()):
            raise ValueError(f"cell {self.index}: covariance is not symmetric")


def matrix_rank(Sigma, tol: float = RANK_TOL) -> int:
    """Number of eigenvalues strictly above ``tol``."""
    return int(np.sum(sym_eig(Sigma).eigenvalues > tol))


def effective_rank(Sigma, tol: float = RANK_TOL) -> float:
    """exp of the entropy of the normalized eigenvalues that exceed ``tol``."""
    w = sym_eig(Sigma).eigenvalues
    w = w[w > tol]
    if w.size == 0:
        raise ValueError(f"effective_rank: no eigenvalue above {tol}")
    p = w / w.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def cell_statistics(descriptors) -> list[CellGaussian]:
    """Per-cell mean and 1/N covariance across a set of C x M descriptors.

    Accepts plain matrices or :class:`~voronoi_pool.whitening.WhitenedDescriptor` objects.
    """
    arrs = [np.asarray(getattr(d, "Z", d), dtype=np.float64) for d in descriptors]
    if len(arrs) < 2:
        raise ValueError("cell_statistics: need at least 2 descriptors")
    shape = arrs[0].shape
    for k, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(f"descriptor {k} has shape {a.shape}, expected {shape}")
    stack = np.stack(arrs)  # N x C x M
    N, C, M = stack.shape
    cells = []
    for i in range(M):
        cols = stack[:, :, i]
        mu = cols.mean(axis=0)
        xc = cols - mu
        cov = xc.T @ xc / N
        cells.append(CellGaussian(i, mu, 0.5 * (cov + cov.T), N))
    return cells


def gaussian_w2(g1: CellGaussian, g2: CellGaussian) -> float:
    """Closed-form 2-Wasserstein distance between two Gaussians."""
    dm = g1.mean - g2.mean
    r2 = sqrtm_psd(g2.cov)
    cross = sqrtm_psd(r2 @ g1.cov @ r2)
    tr = np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross)
    return float(np.sqrt(float(dm @ dm) + max(tr, 0.0)))


def w2_matrix(cells: list[CellGaussian]) -> np.ndarray:
    if len(cells) < 2:
        raise ValueError("w2_matrix: need at least 2 cells")
    M = len(cells)
    out = np.zeros((M, M))
    for i in range(M):
        for j in range(i + 1, M):
            out[i, j] = out[j, i] = gaussian_w2(cells[i], cells[j])
    return out


def mean_off_diagonal(W: np.ndarray) -> float:
    M = W.shape[0]
    return float((W.sum() - np.trace(W)) / (M * (M - 1)))
