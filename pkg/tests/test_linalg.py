import jax.numpy as jnp
import numpy as np
import pytest

from coupledgp.linalg import FactorizationFailed, jittered_cholesky, logdet_from_cholesky, tri_solve


def test_identity_gets_base_jitter():
    L, jitter = jittered_cholesky(jnp.eye(3), 1.0)
    assert float(jitter) == pytest.approx(1e-6)
    np.testing.assert_allclose(np.diag(L), np.sqrt(1 + 1e-6), rtol=1e-14)
    assert float(jnp.max(jnp.abs(L - jnp.diag(jnp.diag(L))))) == 0.0


def test_two_by_two():
    L, _ = jittered_cholesky(jnp.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(L, [[1.414214, 0.0], [0.707107, 1.224745]], atol=1e-6)
    assert float(L[0, 1]) == 0.0


def test_rank_one_succeeds():
    K = jnp.ones((2, 2))
    L, jitter = jittered_cholesky(K, 1.0)
    assert float(jitter) <= 1e-2
    np.testing.assert_allclose(L @ L.T, K, atol=1e-2)


def test_escalation():
    # smallest eigenvalue -1e-5: fails at 1e-6 and 1e-5, succeeds at 1e-4
    K = jnp.array([[1.0, 1.0 + 1e-5], [1.0 + 1e-5, 1.0]])
    L, jitter = jittered_cholesky(K, 1.0)
    assert float(jitter) == pytest.approx(1e-4)
    assert np.all(np.isfinite(np.asarray(L)))
    np.testing.assert_allclose(L @ L.T, K, atol=1e-2)


def test_indefinite_raises():
    with pytest.raises(FactorizationFailed):
        jittered_cholesky(jnp.array([[0.0, 1.0], [1.0, 0.0]]), 1.0)


def test_asymmetric_rejected():
    with pytest.raises(ValueError):
        jittered_cholesky(jnp.array([[1.0, 0.5], [0.4, 1.0]]))


def test_jitter_scales_with_variance():
    _, jitter = jittered_cholesky(5.0 * jnp.eye(2), 5.0)
    assert float(jitter) == pytest.approx(5e-6)


def test_reconstruction(rng):
    for n in (1, 3, 8):
        A = rng.normal(size=(n, n))
        K = A @ A.T + n * np.eye(n)
        L, jitter = jittered_cholesky(K)
        err = np.max(np.abs(np.asarray(L @ L.T) - (K + float(jitter) * np.eye(n))))
        assert err <= 1e-10 * np.max(np.abs(K))
        assert np.all(np.triu(np.asarray(L), 1) == 0)
        assert np.all(np.diag(np.asarray(L)) > 0)


def test_tri_solve_examples(rng):
    B = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(tri_solve(jnp.eye(3), B), B)
    L, _ = jittered_cholesky(jnp.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(tri_solve(L, jnp.array([[2.0], [1.0]])), [[1.414214], [0.0]], atol=1e-6)


def test_tri_solve_round_trip(rng):
    A = rng.normal(size=(5, 5))
    L, _ = jittered_cholesky(A @ A.T + 5 * np.eye(5))
    X = rng.normal(size=(5, 3))
    np.testing.assert_allclose(tri_solve(L, L @ X), X, atol=1e-12)
    np.testing.assert_allclose(tri_solve(L, L.T @ X, transposed=True), X, atol=1e-12)


def test_logdet(rng):
    for n in range(1, 6):
        A = rng.normal(size=(n, n))
        K = A @ A.T + np.eye(n)
        L, jitter = jittered_cholesky(K)
        expected = np.log(np.linalg.det(K + float(jitter) * np.eye(n)))
        assert float(logdet_from_cholesky(L)) == pytest.approx(expected, abs=1e-10)
