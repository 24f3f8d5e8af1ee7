import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voronoi_pool import linalg


def rand_sym(rng, n):
    A = rng.normal(size=(n, n))
    return 0.5 * (A + A.T)


def test_identity_16():
    e = linalg.sym_eig(np.eye(16))
    np.testing.assert_array_equal(e.eigenvalues, np.ones(16))
    np.testing.assert_allclose(e.eigenvectors.T @ e.eigenvectors, np.eye(16), atol=1e-14)


def test_diag_axis_aligned():
    e = linalg.sym_eig(np.diag([1.0, 3.0]))
    np.testing.assert_allclose(e.eigenvalues, [3, 1])
    np.testing.assert_allclose(e.eigenvectors, [[0, 1], [1, 0]])


@pytest.mark.parametrize("n", [1, 2, 3, 6, 9, 16, 33])
def test_matches_numpy_eigh(rng, n):
    A = rand_sym(rng, n)
    e = linalg.sym_eig(A)
    np.testing.assert_allclose(e.eigenvalues, np.linalg.eigh(A)[0][::-1], atol=1e-10)
    np.testing.assert_allclose(e.reconstruct(), A, atol=1e-10)
    np.testing.assert_allclose(e.eigenvectors.T @ e.eigenvectors, np.eye(n), atol=1e-10)


def test_repeated_eigenvalue_no_nan():
    R = np.linalg.qr(np.random.default_rng(3).normal(size=(3, 3)))[0]
    A = R @ np.diag([2.0, 2.0, 1.0]) @ R.T
    e = linalg.sym_eig(A)
    assert np.all(np.isfinite(e.eigenvectors))
    np.testing.assert_allclose(e.eigenvalues, [2, 2, 1], atol=1e-12)
    np.testing.assert_allclose(e.reconstruct(), A, atol=1e-12)


def test_sign_convention(rng):
    Q = linalg.sym_eig(rand_sym(rng, 7)).eigenvectors
    for j in range(7):
        assert Q[np.argmax(np.abs(Q[:, j])), j] > 0


def test_deterministic_bytes(rng):
    A = rand_sym(rng, 12)
    a, b = linalg.sym_eig(A), linalg.sym_eig(A.copy())
    assert a.eigenvalues.tobytes() == b.eigenvalues.tobytes()
    assert a.eigenvectors.tobytes() == b.eigenvectors.tobytes()


def test_errors():
    with pytest.raises(ValueError, match="non-finite"):
        linalg.sym_eig(np.array([[np.nan, 0], [0, 1.0]]))
    with pytest.raises(ValueError, match="square"):
        linalg.sym_eig(np.ones((2, 3)))


def test_sqrtm_examples():
    np.testing.assert_array_equal(linalg.sqrtm_psd(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(linalg.sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
    np.testing.assert_allclose(linalg.sqrtm_psd(np.diag([1.0, -1e-12])), np.diag([1.0, 0.0]))
    with pytest.raises(ValueError):
        linalg.sqrtm_psd(np.diag([1.0, -1e-3]))


def test_sqrtm_against_scipy(rng):
    import scipy.linalg
    B = rng.normal(size=(5, 5))
    A = B @ B.T
    np.testing.assert_allclose(linalg.sqrtm_psd(A), np.real(scipy.linalg.sqrtm(A)), atol=1e-9)


def test_traces():
    assert linalg.trace(np.eye(8)) == 8
    assert linalg.trace_sq(np.diag([3.0, 1.0])) == 10


@given(st.integers(1, 10), st.integers(0, 2**31))
def test_property_trace_and_orthonormality(n, seed):
    A = rand_sym(np.random.default_rng(seed), n)
    e = linalg.sym_eig(A)
    assert np.all(np.diff(e.eigenvalues) <= 0)
    assert abs(e.eigenvalues.sum() - np.trace(A)) <= 1e-10 * max(1.0, np.abs(A).sum())
    np.testing.assert_allclose(e.reconstruct(), A, atol=1e-10)
