"""Dense symmetric linear algebra: cyclic Jacobi eigensolver, PSD square root, traces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 100
OFF_TOL = 1e-12
PSD_NEG_TOL = 1e-10


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray  # (C,), non-increasing
    eigenvectors: np.ndarray  # (C, C), column i pairs with eigenvalue i

    def reconstruct(self) -> np.ndarray:
        Q = self.eigenvectors
        return (Q * self.eigenvalues) @ Q.T


def _check_square(A: np.ndarray, name: str) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name}: expected a square matrix, got shape {A.shape}")
    return A


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of 0..n-1 into disjoint (p, q) pairs; every pair appears once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        rounds.append((np.array([p for p, _ in pairs], dtype=int), np.array([q for _, q in pairs], dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig(A) -> SymEig:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations run in round-robin order: each round annihilates n/2 disjoint
    off-diagonal pairs at once. The input is symmetrized first. Eigenvalues
    come back sorted descending and each eigenvector is signed so its
    largest-magnitude entry is positive.
    """
    A = _check_square(A, "sym_eig")
    if not np.all(np.isfinite(A)):
        raise ValueError("sym_eig: input contains non-finite entries")
    n = A.shape[0]
    a = 0.5 * (A + A.T)
    v = np.eye(n)
    tol = OFF_TOL * np.linalg.norm(a)
    mask = ~np.eye(n, dtype=bool)

    def off(m):
        return float(np.sqrt(np.sum(m[mask] ** 2)))

    rounds = _round_robin(n) if n > 1 else []
    residual = off(a) if n > 1 else 0.0
    sweeps = 0
    while residual > tol:
        if sweeps == MAX_SWEEPS:
            raise ConvergenceError(
                f"sym_eig: no convergence after {MAX_SWEEPS} sweeps (off-diagonal norm {residual:.3e})",
                residual)
        for p, q in rounds:
            apq = a[p, q]
            d = a[q, q] - a[p, p]
            # tangent of the smaller rotation angle that zeroes a[p, q]; overflow-free form
            num = np.where(d >= 0.0, 2.0, -2.0) * apq
            den = np.abs(d) + np.hypot(d, 2.0 * apq)
            t = np.divide(num, den, out=np.zeros_like(num), where=den > 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            J = np.eye(n)
            J[p, p] = c
            J[q, q] = c
            J[q, p] = -s
            J[p, q] = s
            a = J.T @ a @ J
            a[p, q] = 0.0
            a[q, p] = 0.0
            v = v @ J
        sweeps += 1
        residual = off(a)

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    for j in range(n):
        k = int(np.argmax(np.abs(v[:, j])))  # first index on ties
        if v[k, j] < 0:
            v[:, j] = -v[:, j]
    return SymEig(w, v)


def sqrtm_psd(A) -> np.ndarray:
    """Symmetric square root of a PSD matrix; tiny negative eigenvalues are clamped."""
    e = sym_eig(A)
    w = e.eigenvalues
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if np.any(w < -PSD_NEG_TOL * scale):
        raise ValueError(f"sqrtm_psd: matrix is indefinite (min eigenvalue {w.min():.3e})")
    r = np.sqrt(np.clip(w, 0.0, None))
    Q = e.eigenvectors
    out = (Q * r) @ Q.T
    return 0.5 * (out + out.T)


def trace(A) -> float:
    A = _check_square(A, "trace")
    return float(np.trace(A))


def trace_sq(A) -> float:
    """Tr(A @ A) as the sum of A_ij * A_ji."""
    A = _check_square(A, "trace_sq")
    return float(np.sum(A * A.T))
