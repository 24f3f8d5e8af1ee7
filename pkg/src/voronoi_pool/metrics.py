"""Descriptor distances and retrieval-quality measures."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import sym_eig


class BlockCovariance:
    """Block-diagonal covariance: one symmetric positive definite C x C block per cell."""

    def __init__(self, blocks):
        blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
        if not blocks:
            raise ValueError("BlockCovariance needs at least one block")
        C = blocks[0].shape[0]
        self.blocks = []
        self._eig = []
        for i, b in enumerate(blocks):
            if b.shape != (C, C):
                raise ValueError(f"block {i} has shape {b.shape}, expected ({C}, {C})")
            if np.max(np.abs(b - b.T)) > 1e-10 * max(1.0, np.max(np.abs(b))):
                raise ValueError(f"block {i} is not symmetric")
            e = sym_eig(b)
            if e.eigenvalues[-1] <= 1e-12 * max(np.trace(b), 1e-300):
                raise ValueError(f"block {i} is singular or indefinite "
                                 f"(min eigenvalue {e.eigenvalues[-1]:.3e})")
            self.blocks.append(b)
            self._eig.append(e)

    @property
    def C(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def M(self) -> int:
        return len(self.blocks)

    def dense(self) -> np.ndarray:
        C, M = self.C, self.M
        out = np.zeros((C * M, C * M))
        for i, b in enumerate(self.blocks):
            out[i * C:(i + 1) * C, i * C:(i + 1) * C] = b
        return out


def mahalanobis_blockdiag(X1, X2, cov: BlockCovariance) -> float:
    """Sum over cells of ``d_i^T Sigma_i^{-1} d_i`` using each block's eigendecomposition."""
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if X1.shape != X2.shape or X1.shape != (cov.C, cov.M):
        raise ValueError(f"descriptor shapes {X1.shape}, {X2.shape} do not match covariance "
                         f"({cov.C}, {cov.M})")
    total = 0.0
    for i, e in enumerate(cov._eig):
        proj = e.eigenvectors.T @ (X1[:, i] - X2[:, i])
        total += float(np.sum(proj * proj / e.eigenvalues))
    return total


def euclidean_sq(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"euclidean_sq: lengths {a.size} and {b.size} differ")
    d = a - b
    return float(d @ d)


def pairwise_sq_distances(Q: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``Q`` and rows of ``D``."""
    Q = np.asarray(Q, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if Q.shape[1] != D.shape[1]:
        raise ValueError(f"dimension mismatch: {Q.shape[1]} vs {D.shape[1]}")
    diff = Q[:, None, :] - D[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass
class RetrievalRun:
    """Ranked candidates per query plus geographic ground truth.

    ``ranked_ids[q]`` and ``ranked_dists[q]`` are sorted by distance ascending,
    ties broken by candidate id. ``relevant[q]`` is the set of database ids
    within the radius. ``n_db`` is the database size used for percentage K.
    """

    query_ids: list[int]
    ranked_ids: list[np.ndarray]
    ranked_dists: list[np.ndarray]
    relevant: list[set]
    n_db: int
    excluded: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.query_ids)

    def hits(self, q: int) -> np.ndarray:
        rel = self.relevant[q]
        return np.fromiter((int(i) in rel for i in self.ranked_ids[q]), dtype=bool,
                           count=len(self.ranked_ids[q]))

    def top1(self) -> tuple[np.ndarray, np.ndarray]:
        """Top-1 distance and whether it is a true match, per query."""
        d = np.array([r[0] for r in self.ranked_dists], dtype=np.float64)
        lab = np.array([self.hits(q)[0] for q in range(len(self))], dtype=bool)
        return d, lab


def build_run(query_desc, db_desc, query_pos, db_pos, radius: float = 3.0, query_ids=None,
              db_ids=None, exclude_self: bool = False) -> RetrievalRun:
    """Exhaustive Euclidean ranking with relevance = geographic distance < ``radius``.

    With ``exclude_self`` a database entry sharing the query's id is never a
    candidate. Queries with no relevant entry are dropped and listed in ``excluded``.
    """
    query_desc = np.atleast_2d(np.asarray(query_desc, dtype=np.float64))
    db_desc = np.atleast_2d(np.asarray(db_desc, dtype=np.float64))
    if query_desc.shape[1] != db_desc.shape[1]:
        raise ValueError(f"descriptor dims differ: {query_desc.shape[1]} vs {db_desc.shape[1]}")
    nq, nd = len(query_desc), len(db_desc)
    query_ids = np.arange(nq) if query_ids is None else np.asarray(query_ids)
    db_ids = np.arange(nd) if db_ids is None else np.asarray(db_ids)
    dist = pairwise_sq_distances(query_desc, db_desc)
    geo = np.sqrt(pairwise_sq_distances(np.asarray(query_pos, float), np.asarray(db_pos, float)))
    run = RetrievalRun([], [], [], [], nd - 1 if exclude_self else nd)
    for q in range(nq):
        keep = db_ids != query_ids[q] if exclude_self else np.ones(nd, dtype=bool)
        cand = np.flatnonzero(keep)
        rel = {int(db_ids[j]) for j in cand if geo[q, j] < radius}
        if not rel:
            run.excluded.append(int(query_ids[q]))
            continue
        order = np.lexsort((db_ids[cand], dist[q, cand]))
        run.query_ids.append(int(query_ids[q]))
        run.ranked_ids.append(db_ids[cand][order])
        run.ranked_dists.append(dist[q, cand][order])
        run.relevant.append(rel)
    return run


def _require(run: RetrievalRun):
    if len(run) == 0:
        raise ValueError("retrieval run has no evaluable queries")


def resolve_k(run: RetrievalRun, k=None, pct=None) -> int:
    if (k is None) == (pct is None):
        raise ValueError("give exactly one of k or pct")
    if pct is not None:
        return max(1, math.ceil(run.n_db * pct))
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(k)


def recall_at(run: RetrievalRun, k: int | None = None, pct: float | None = None) -> float:
    """Fraction of queries with a relevant item in the top K (K = ceil(N * pct) in percent mode)."""
    _require(run)
    K = resolve_k(run, k, pct)
    return float(np.mean([run.hits(q)[:K].any() for q in range(len(run))]))


def map_at_k(run: RetrievalRun, k: int = 10) -> float:
    """Mean over queries of sum_{hit at r<=K} precision@r / min(K, #relevant)."""
    _require(run)
    aps = []
    for q in range(len(run)):
        h = run.hits(q)[:k]
        if not h.any():
            aps.append(0.0)
            continue
        ranks = np.flatnonzero(h) + 1
        prec = np.cumsum(h)[ranks - 1] / ranks
        aps.append(float(prec.sum()) / min(k, len(run.relevant[q])))
    return float(np.mean(aps))


def mrr(run: RetrievalRun) -> float:
    _require(run)
    rr = []
    for q in range(len(run)):
        h = np.flatnonzero(run.hits(q))
        rr.append(1.0 / (h[0] + 1) if h.size else 0.0)
    return float(np.mean(rr))


@dataclass(frozen=True)
class F1Result:
    f1: float
    threshold: float
    no_positives: bool = False


def f1_max(distances, labels) -> F1Result:
    """Best F1 over thresholds taken from the observed top-1 distances.

    A query is predicted a revisit when its distance is <= the threshold; the
    smallest threshold wins ties.
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if d.shape != y.shape or d.size == 0:
        raise ValueError("f1_max needs equal-length, non-empty inputs")
    if not y.any():
        warnings.warn("f1_max: no positive labels, F1 is 0", RuntimeWarning, stacklevel=2)
        return F1Result(0.0, float(d.min()), no_positives=True)
    order = np.argsort(d, kind="stable")
    ds, ys = d[order], y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    total_pos = ys.sum()
    # only the last index of each run of equal distances is a valid cut
    last = np.r_[ds[1:] != ds[:-1], True]
    tp, fp, ds = tp[last], fp[last], ds[last]
    fn = total_pos - tp
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1)
    best = int(np.argmax(f1))
    return F1Result(float(f1[best]), float(ds[best]))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    degenerate: bool = False

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def auc(self) -> float:
        trapezoid = getattr(np, "trapezoid", None) or np.trapz
        return float(trapezoid(self.tpr, self.fpr))


def roc_points(distances, labels, normalize: bool = True) -> RocCurve:
    """(FPR, TPR) staircase as the threshold sweeps 0 -> 1 over normalized distances."""
    d = np.asarray(distances, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if d.shape != y.shape or d.size == 0:
        raise ValueError("roc_points needs equal-length, non-empty inputs")
    if normalize:
        top = d.max()
        d = d / top if top > 0 else d
    pos, neg = y.sum(), (~y).sum()
    degenerate = pos == 0 or neg == 0
    thresholds = np.unique(d)
    fpr = [0.0]
    tpr = [0.0]
    for t in thresholds:
        pred = d <= t
        tpr.append(float((pred & y).sum() / pos) if pos else 0.0)
        fpr.append(float((pred & ~y).sum() / neg) if neg else 0.0)
    if fpr[-1] != 1.0 or tpr[-1] != 1.0:
        fpr.append(1.0)
        tpr.append(1.0)
    return RocCurve(np.array(fpr), np.array(tpr), bool(degenerate))
