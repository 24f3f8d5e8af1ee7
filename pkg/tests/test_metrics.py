import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import mannwhitneyu

from voronoi_pool import metrics as mt
from voronoi_pool.whitening import scale


def single_query_run(ranked, relevant):
    return mt.RetrievalRun([0], [np.array(ranked)], [np.arange(len(ranked), dtype=float)], [set(relevant)],
                           len(ranked))


def test_recall_examples():
    assert mt.recall_at(single_query_run([5, 6], {5}), k=1) == 1.0
    run = single_query_run([6, 5], {5})
    assert mt.recall_at(run, k=1) == 0.0 and mt.recall_at(run, k=2) == 1.0


def test_map_examples():
    assert mt.map_at_k(single_query_run([1, 2, 3], {1, 2}), 10) == 1.0
    assert mt.map_at_k(single_query_run([3, 1, 2], {1}), 10) == 0.5


def test_mrr_examples():
    assert mt.mrr(single_query_run([1, 2], {1})) == 1.0
    run = mt.RetrievalRun([0, 1], [np.array([1, 2]), np.array([4, 5, 6, 7])], [np.zeros(2), np.zeros(4)],
                          [{1}, {7}], 4)
    assert mt.mrr(run) == 0.625


def test_empty_run_rejected():
    empty = mt.RetrievalRun([], [], [], [], 3)
    for fn in (lambda r: mt.recall_at(r, k=1), mt.mrr, mt.map_at_k):
        with pytest.raises(ValueError):
            fn(empty)


def test_f1_examples():
    r = mt.f1_max([0.1, 0.9], [True, False])
    assert r.f1 == 1.0 and r.threshold == 0.1
    r = mt.f1_max([0.3, 0.2, 0.7], [True, True, True])
    assert r.f1 == 1.0 and r.threshold == 0.7
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        r = mt.f1_max([0.3, 0.2], [False, False])
    assert r.f1 == 0.0 and r.no_positives and w


def test_euclidean_examples():
    assert mt.euclidean_sq([1, 2], [1, 2]) == 0
    assert mt.euclidean_sq([0, 0], [3, 4]) == 25
    with pytest.raises(ValueError):
        mt.euclidean_sq([0, 0], [1, 2, 3])


def spd(rng, C):
    B = rng.normal(size=(C, C))
    return B @ B.T + 0.5 * np.eye(C)


def test_mahalanobis_examples(rng):
    X1, X2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cov = mt.BlockCovariance([np.eye(3)] * 4)
    assert mt.mahalanobis_blockdiag(X1, X1, cov) == 0
    assert mt.mahalanobis_blockdiag(X1, X2, cov) == pytest.approx(np.sum((X1 - X2) ** 2), rel=1e-12)


def test_block_covariance_rejects_singular_and_names_cell():
    with pytest.raises(ValueError, match="block 1"):
        mt.BlockCovariance([np.eye(2), np.diag([1.0, 0.0])])
    with pytest.raises(ValueError, match="symmetric"):
        mt.BlockCovariance([np.array([[1.0, 0.5], [0.0, 1.0]])])


@given(st.integers(0, 2**31))
def test_mahalanobis_dense_and_shared_whitening(seed):
    r = np.random.default_rng(seed)
    C, M = 3, 4
    blocks = [spd(r, C) for _ in range(M)]
    cov = mt.BlockCovariance(blocks)
    X1, X2 = r.normal(size=(C, M)), r.normal(size=(C, M))
    m = mt.mahalanobis_blockdiag(X1, X2, cov)
    d = (X1 - X2).reshape(-1, order="F")
    dense = float(d @ np.linalg.solve(cov.dense(), d))
    assert abs(m - dense) <= 1e-8 * dense
    Ws = []
    for b in blocks:
        w, V = np.linalg.eigh(b)
        Ws.append(V @ np.diag(w ** -0.5) @ V.T)
    Z1 = np.column_stack([Ws[i] @ X1[:, i] for i in range(M)])
    Z2 = np.column_stack([Ws[i] @ X2[:, i] for i in range(M)])
    assert abs(mt.euclidean_sq(Z1, Z2) - m) <= 1e-8 * m
    assert m >= 0 and abs(mt.mahalanobis_blockdiag(X2, X1, cov) - m) <= 1e-12 * m


# ---- 20-record fixture against a from-scratch oracle -------------------------------------------------------

def fixture_20():
    rng = np.random.default_rng(2024)
    db_pos = np.column_stack([np.repeat(np.arange(5) * 10.0, 4), np.zeros(20), np.zeros(20)])
    db_pos[:, :2] += rng.uniform(-0.7, 0.7, size=(20, 2))
    db = rng.normal(size=(20, 6)) + np.repeat(rng.normal(size=(5, 6)) * 2, 4, axis=0)
    q_pos = db_pos[::2] + 0.3
    q = db[::2] + 0.8 * rng.normal(size=(10, 6))
    return q, db, q_pos, db_pos


def oracle_metrics(q, db, q_pos, db_pos, radius):
    """Plain python loops, no shared helper code."""
    r1 = r1p = ap = rr = 0.0
    n = 0
    top_d, top_l = [], []
    k1p = max(1, math.ceil(len(db) / 100))
    for i in range(len(q)):
        dists = [sum((q[i][c] - db[j][c]) ** 2 for c in range(db.shape[1])) for j in range(len(db))]
        rel = [math.dist(q_pos[i], db_pos[j]) < radius for j in range(len(db))]
        if not any(rel):
            continue
        n += 1
        order = sorted(range(len(db)), key=lambda j: (dists[j], j))
        hits = [rel[j] for j in order]
        r1 += hits[0]
        r1p += any(hits[:k1p])
        found, s = 0, 0.0
        for rank, h in enumerate(hits[:10], 1):
            if h:
                found += 1
                s += found / rank
        ap += s / min(10, sum(rel))
        rr += 1 / (hits.index(True) + 1)
        top_d.append(dists[order[0]])
        top_l.append(hits[0])
    best = 0.0
    for t in top_d:
        tp = sum(1 for d, lab in zip(top_d, top_l) if d <= t and lab)
        fp = sum(1 for d, lab in zip(top_d, top_l) if d <= t and not lab)
        fn = sum(top_l) - tp
        best = max(best, 2 * tp / (2 * tp + fp + fn))
    return dict(r1=r1 / n, r1p=r1p / n, map10=ap / n, mrr=rr / n, f1=best)


@pytest.mark.parametrize("radius", [3.0, 12.0])
def test_fixture_matches_oracle(radius):
    q, db, q_pos, db_pos = fixture_20()
    run = mt.build_run(q, db, q_pos, db_pos, radius)
    want = oracle_metrics(q, db, q_pos, db_pos, radius)
    d, lab = run.top1()
    got = dict(r1=mt.recall_at(run, k=1), r1p=mt.recall_at(run, pct=0.01), map10=mt.map_at_k(run, 10),
               mrr=mt.mrr(run), f1=mt.f1_max(d, lab).f1)
    for key in want:
        assert got[key] == pytest.approx(want[key], abs=1e-12), key


def test_ties_broken_by_id():
    run = mt.build_run(np.zeros((1, 2)), np.zeros((3, 2)), np.zeros((1, 3)), np.zeros((3, 3)),
                       db_ids=np.array([9, 4, 7]))
    assert list(run.ranked_ids[0]) == [4, 7, 9]


def test_exclude_self_and_unmatched_queries():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [100.0, 0, 0]])
    X = np.eye(3)
    run = mt.build_run(X, X, pos, pos, 3.0, exclude_self=True)
    assert run.excluded == [2] and len(run) == 2 and run.n_db == 2
    assert all(i not in ids for i, ids in zip(run.query_ids, run.ranked_ids))


def test_dim_mismatch():
    with pytest.raises(ValueError, match="dims"):
        mt.build_run(np.zeros((1, 2)), np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((2, 3)))


def test_roc_perfect_and_endpoints():
    c = mt.roc_points([0.1, 0.2, 0.8, 0.9], [True, True, False, False])
    pts = c.points()
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0) and (0.0, 1.0) in pts
    assert c.auc() == 1.0
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)


@given(st.integers(0, 2**31))
def test_auc_equals_mann_whitney(seed):
    r = np.random.default_rng(seed)
    d = np.round(r.uniform(size=30), 2)  # rounding creates ties
    y = r.uniform(size=30) < 0.4
    if y.all() or not y.any():
        return
    U = mannwhitneyu(d[~y], d[y]).statistic
    assert mt.roc_points(d, y).auc() == pytest.approx(U / (y.sum() * (~y).sum()), abs=1e-12)


def test_random_auc_near_half():
    r = np.random.default_rng(11)
    aucs = [mt.roc_points(r.uniform(size=200), r.uniform(size=200) < 0.5).auc() for _ in range(20)]
    assert abs(np.mean(aucs) - 0.5) <= 0.1


def test_sigma_invariance_of_rankings_and_metrics():
    rng = np.random.default_rng(5)
    Zs = [rng.normal(size=(3, 16)) for _ in range(50)]
    pos = rng.uniform(0, 20, size=(50, 3))
    results = []
    for sigma in (1.0, 4.0, 16.0):
        D = np.stack([scale(Z, sigma).ravel() for Z in Zs])
        dist = mt.pairwise_sq_distances(D, D)
        run = mt.build_run(D, D, pos, pos, 5.0, exclude_self=True)
        results.append((np.argsort(dist, axis=None, kind="stable").tobytes(),
                        mt.recall_at(run, k=1), mt.map_at_k(run, 10), mt.mrr(run)))
    assert results[0] == results[1] == results[2]


@given(st.integers(0, 2**31))
def test_recall_monotone_and_map1_equals_r1(seed):
    r = np.random.default_rng(seed)
    q, db = r.normal(size=(8, 4)), r.normal(size=(25, 4))
    qp, dp = r.uniform(0, 10, size=(8, 3)), r.uniform(0, 10, size=(25, 3))
    try:
        run = mt.build_run(q, db, qp, dp, 4.0)
        mt.recall_at(run, k=1)
    except ValueError:
        return
    rs = [mt.recall_at(run, k=k) for k in range(1, 26)]
    assert np.all(np.diff(rs) >= 0)
    assert mt.map_at_k(run, 1) == rs[0]
