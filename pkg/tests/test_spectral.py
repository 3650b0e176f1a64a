import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lowrank_amp.channels import ExponentialChannel, GaussianChannel
from lowrank_amp.errors import ParameterError
from lowrank_amp.instances import generate_uv, generate_xkx
from lowrank_amp.priors import CommunityPrior, GaussianPrior
from lowrank_amp.spectral import best_overlap, overlaps, spectral_compare, top_eigvecs, top_singular


def _sym(n, seed):
    G = np.random.default_rng(seed).standard_normal((n, n))
    return (G + G.T) / 2


def test_diagonal_example():
    res = top_eigvecs(np.diag([3.0, 1.0, 1.0]), k=1)
    assert res.values[0] == pytest.approx(3.0, abs=1e-12)
    np.testing.assert_allclose(res.vectors[:, 0], [1, 0, 0], atol=1e-8)
    assert res.converged[0]


@pytest.mark.parametrize("seed", range(3))
def test_dense_oracle(seed):
    A = _sym(50, seed)
    lam, vec = np.linalg.eigh(A)
    order = np.argsort(-np.abs(lam))
    res = top_eigvecs(A, k=3, tol=1e-12, max_iter=50_000)
    np.testing.assert_allclose(res.values, lam[order[:3]], atol=1e-8)
    for i in range(3):
        assert abs(abs(res.vectors[:, i] @ vec[:, order[i]]) - 1) < 1e-8


def test_plus_minus_pair():
    # equal-magnitude eigenvalues of opposite sign
    A = np.diag([2.0, -2.0, 0.5, 0.1])
    res = top_eigvecs(A, k=2, tol=1e-12)
    assert sorted(res.values) == pytest.approx([-2.0, 2.0])
    assert np.all(res.converged)


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
@settings(max_examples=15, deadline=None)
def test_orthonormal_and_residual(seed, k):
    A = _sym(40, seed)
    tol = 1e-9
    res = top_eigvecs(A, k=k, tol=tol, max_iter=20_000)
    V = res.vectors
    np.testing.assert_allclose(V.T @ V, np.eye(k), atol=1e-8)
    for i in range(k):
        if res.converged[i]:
            v = V[:, i]
            assert np.linalg.norm(A @ v - res.values[i] * v) <= 10 * tol * max(1.0, abs(res.values[i]))
    # sorted by magnitude, sign convention on the first nonzero coordinate
    assert np.all(np.diff(np.abs(res.values)) <= 1e-12)
    for i in range(k):
        nz = np.flatnonzero(np.abs(V[:, i]) > 1e-14)
        assert V[nz[0], i] > 0


def test_non_convergence_flagged():
    res = top_eigvecs(_sym(60, 1), k=2, max_iter=2)
    assert not np.any(res.converged) and np.all(res.iterations == 2)


def test_input_validation():
    with pytest.raises(ParameterError):
        top_eigvecs(np.ones((3, 4)))
    with pytest.raises(ParameterError):
        top_eigvecs(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ParameterError):
        top_eigvecs(np.eye(20), k=11)


def test_top_singular_oracle():
    M = np.random.default_rng(3).standard_normal((30, 12))
    s, U, V, conv = top_singular(M, k=2, tol=1e-12, max_iter=50_000)
    U0, s0, Vt0 = np.linalg.svd(M)
    np.testing.assert_allclose(s, s0[:2], atol=1e-8)
    for i in range(2):
        assert abs(abs(U[:, i] @ U0[:, i]) - 1) < 1e-8
        assert abs(abs(V[:, i] @ Vt0[i]) - 1) < 1e-8


def test_overlaps():
    x = np.array([[1.0], [1.0], [0.0]])
    assert overlaps(np.array([1.0, 1.0, 0.0]), x)[0] == pytest.approx(1.0)
    assert overlaps(np.array([[-2.0], [-2.0], [0.0]]), x)[0] == pytest.approx(1.0)
    assert overlaps(np.array([1.0, -1.0, 0.0]), x)[0] == pytest.approx(0.0)


def test_planted_rank_one():
    inst = generate_xkx(GaussianPrior(1), GaussianChannel(0.1), np.eye(1), 1000, 0)
    rows = spectral_compare(inst, k=1)
    assert best_overlap(rows, "S") > 0.9


def test_gaussian_channel_profiles_identical():
    inst = generate_xkx(CommunityPrior(2), GaussianChannel(0.5), np.eye(2), 300, 2)
    rows = spectral_compare(inst, tol=1e-10, max_iter=5000)
    s = [r["overlap"] for r in rows if r["matrix_kind"] == "S"]
    y = [r["overlap"] for r in rows if r["matrix_kind"] == "Y"]
    np.testing.assert_allclose(s, y, atol=1e-10)
    assert {"matrix_kind", "index", "eigenvalue", "overlap"} <= set(rows[0])


def test_uv_uses_left_vectors():
    g = GaussianPrior(1)
    inst = generate_uv(g, g, GaussianChannel(0.05), 400, 0.5, 1)
    rows = spectral_compare(inst, k=1)
    assert best_overlap(rows, "S") > 0.8


def test_needs_truth():
    inst = generate_xkx(GaussianPrior(1), ExponentialChannel(0.8), np.eye(1), 50, 0)
    with pytest.raises(ParameterError):
        spectral_compare(inst.blind())
