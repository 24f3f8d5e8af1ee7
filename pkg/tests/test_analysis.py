import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from voronoi_pool import analysis as an
from voronoi_pool.whitening import WhitenedDescriptor


def test_rank_examples():
    assert an.matrix_rank(np.eye(16)) == 16
    assert an.matrix_rank(np.diag([1.0, 1e-7, 0.0])) == 1


def test_effective_rank_examples():
    assert an.effective_rank(np.eye(16)) == pytest.approx(16.0, rel=1e-12)
    assert an.effective_rank(np.eye(2)) == pytest.approx(2.0, rel=1e-12)
    assert an.effective_rank(np.diag([2.0, 1.0, 1.0])) == pytest.approx(math.exp(1.5 * math.log(2)), rel=1e-12)
    assert abs(an.effective_rank(np.diag([2.0, 1.0, 1.0])) - 2.8284) < 1e-4
    with pytest.raises(ValueError):
        an.effective_rank(np.zeros((3, 3)))


def test_cell_statistics_examples():
    X = np.arange(6.0).reshape(2, 3)
    cells = an.cell_statistics([X, X, X])
    assert all(not c.cov.any() for c in cells)
    cells = an.cell_statistics([np.array([[1.0, 5.0]]), np.array([[-1.0, 5.0]])])
    assert cells[0].mean[0] == 0 and cells[0].cov[0, 0] == 1.0
    with pytest.raises(ValueError):
        an.cell_statistics([np.ones((2, 3)), np.ones((3, 2))])


def test_cell_statistics_oracle_and_whitened_input(rng):
    Ds = [rng.normal(size=(3, 4)) for _ in range(10)]
    cells = an.cell_statistics([WhitenedDescriptor(D, 1.0) for D in Ds])
    stack = np.stack(Ds)
    for i, c in enumerate(cells):
        np.testing.assert_allclose(c.mean, stack[:, :, i].mean(axis=0))
        np.testing.assert_allclose(c.cov, np.cov(stack[:, :, i].T, bias=True), atol=1e-14)
        assert c.count == 10


def gauss(mean, cov):
    return an.CellGaussian(0, np.asarray(mean, float), np.asarray(cov, float), 5)


def w2_scipy(g1, g2):
    r2 = scipy.linalg.sqrtm(g2.cov)
    cross = np.real(scipy.linalg.sqrtm(r2 @ g1.cov @ r2))
    return math.sqrt(np.sum((g1.mean - g2.mean) ** 2) + max(np.trace(g1.cov + g2.cov) - 2 * np.trace(cross), 0))


def test_w2_examples():
    g = gauss([1, 2], np.eye(2))
    assert an.gaussian_w2(g, g) == pytest.approx(0, abs=1e-7)
    assert an.gaussian_w2(gauss([0, 0], np.eye(2)), gauss([3, 4], np.eye(2))) == pytest.approx(5.0, abs=1e-12)
    assert an.gaussian_w2(gauss([0], [[4.0]]), gauss([0], [[1.0]])) == pytest.approx(1.0, abs=1e-12)
    assert an.gaussian_w2(gauss([1, 1], np.zeros((2, 2))), gauss([4, 5], np.zeros((2, 2)))) == 5.0


def random_gauss(r, C=3):
    B = r.normal(size=(C, C))
    return gauss(r.normal(size=C), B @ B.T + 0.1 * np.eye(C))


@given(st.integers(0, 2**31))
def test_w2_matches_scipy_and_triangle(seed):
    r = np.random.default_rng(seed)
    a, b, c = (random_gauss(r) for _ in range(3))
    ab, bc, ac = an.gaussian_w2(a, b), an.gaussian_w2(b, c), an.gaussian_w2(a, c)
    assert ab == pytest.approx(w2_scipy(a, b), rel=1e-6, abs=1e-9)
    assert ac <= ab + bc + 1e-9


def test_w2_matrix(rng):
    same = [gauss([0, 0], np.eye(2)) for _ in range(3)]
    np.testing.assert_allclose(an.w2_matrix(same), 0, atol=1e-7)
    cells = [random_gauss(rng) for _ in range(5)]
    W = an.w2_matrix(cells)
    np.testing.assert_allclose(W, W.T, atol=1e-10)
    assert an.mean_off_diagonal(np.array([[0, 1.0], [3.0, 0]])) == 2.0


@given(st.integers(0, 2**31))
def test_effective_rank_at_most_rank(seed):
    r = np.random.default_rng(seed)
    C = int(r.integers(1, 10))
    B = r.normal(size=(C, int(r.integers(1, 10))))
    S = B @ B.T
    if an.matrix_rank(S) == 0:
        return
    assert an.effective_rank(S) <= an.matrix_rank(S) + 1e-9
