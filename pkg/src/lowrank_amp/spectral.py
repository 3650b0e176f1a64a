"""Spectral baseline: leading eigenvectors of S/sqrt(n) versus Y/sqrt(n).

Linearising AMP around the uniform fixed point leaves a power iteration on
the score matrix, so the natural spectral method uses S, not the raw
observations. For non-Gaussian channels the two can differ sharply.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .streams import stream


@dataclass
class EigResult:
    values: np.ndarray
    vectors: np.ndarray      # (n, k), unit columns
    converged: np.ndarray    # per-vector flags
    iterations: np.ndarray


def _sign_fix(v):
    nz = np.flatnonzero(np.abs(v) > 1e-14)
    if len(nz) and v[nz[0]] < 0:
        return -v
    return v


def top_eigvecs(matrix, k=1, tol=1e-10, max_iter=10_000, seed=0, oversample=2):
    """k eigenpairs of largest |eigenvalue| by block power iteration.

    A block of k + oversample vectors is multiplied by the matrix and
    re-orthonormalised every sweep (the deflation step), followed by a
    Rayleigh-Ritz projection. The projection separates pairs +/-lambda of equal
    magnitude, on which single-vector power iteration never settles. Vector i
    is converged once its Ritz value moves by less than tol*|lambda| between
    sweeps and its residual ||Av - lambda v|| is below tol*|lambda|.
    """
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ParameterError("matrix must be square", field="matrix")
    if not np.allclose(A, A.T, atol=1e-12, rtol=0):
        raise ParameterError("matrix must be symmetric", field="matrix")
    n = A.shape[0]
    if not 1 <= k <= min(10, n):
        raise ParameterError("need 1 <= k <= min(10, n)", field="k")
    b = min(n, k + oversample)
    V, _ = np.linalg.qr(stream(seed, "power-iteration").standard_normal((n, b)))
    theta_old = np.full(k, np.inf)
    done_at = np.zeros(k, dtype=int)
    for it in range(1, max_iter + 1):
        W = A @ V
        H = V.T @ W
        theta, Y = np.linalg.eigh(0.5 * (H + H.T))
        order = np.argsort(-np.abs(theta), kind="stable")
        theta, Y = theta[order], Y[:, order]
        X = V @ Y[:, :k]
        R = W @ Y[:, :k] - X * theta[:k]
        scale = np.maximum(np.abs(theta[:k]), np.finfo(float).tiny)
        ok = (np.abs(theta[:k] - theta_old) < tol * scale) & (np.linalg.norm(R, axis=0) < tol * scale)
        done_at[(done_at == 0) & ok] = it
        theta_old = theta[:k]
        if np.all(ok):
            break
        V, _ = np.linalg.qr(W @ Y)
    vecs = np.column_stack([_sign_fix(X[:, i]) for i in range(k)])
    iters = np.where(done_at > 0, done_at, it)
    return EigResult(theta[:k].copy(), vecs, done_at > 0, iters)


def top_singular(matrix, k=1, tol=1e-10, max_iter=10_000, seed=0):
    """Top-k singular triplets from power iteration on M M^T; returns (s, U, V, converged)."""
    M = np.asarray(matrix, dtype=float)
    res = top_eigvecs(M @ M.T, k, tol, max_iter, seed)
    s = np.sqrt(np.clip(res.values, 0, None))
    V = M.T @ res.vectors
    with np.errstate(invalid="ignore", divide="ignore"):
        V = V / np.where(s > 0, s, 1.0)
    return s, res.vectors, V, res.converged


def overlaps(vectors, truth):
    """|<v, x_c>| / (|v| |x_c|), maximised over truth columns, for each column v."""
    V = np.atleast_2d(np.asarray(vectors, dtype=float).T).T
    X = np.asarray(truth, dtype=float).reshape(V.shape[0], -1)
    Vn = V / np.linalg.norm(V, axis=0)
    Xn = X / np.linalg.norm(X, axis=0)
    return np.max(np.abs(Vn.T @ Xn), axis=1)


def spectral_compare(instance, k=None, tol=1e-6, max_iter=1000, seed=0):
    """Rows (matrix_kind, index, eigenvalue, overlap) for S/sqrt(n) and Y/sqrt(n).

    The UV^T model uses left singular vectors against U.
    """
    if not instance.has_truth:
        raise ParameterError("spectral comparison needs the planted factors", field="instance")
    n = instance.n
    k = k or min(instance.r + 2, 10)
    rows = []
    for kind, mat in (("S", instance.S), ("Y", instance.Y)):
        scaled = mat / np.sqrt(n)
        if instance.model == "xkx":
            res = top_eigvecs(scaled, k, tol, max_iter, seed)
            values, vecs, conv = res.values, res.vectors, res.converged
            truth = instance.X
        else:
            values, vecs, _, conv = top_singular(scaled, k, tol, max_iter, seed)
            truth = instance.U
        ov = overlaps(vecs, truth)
        for i in range(len(values)):
            rows.append({"matrix_kind": kind, "index": i, "eigenvalue": float(values[i]),
                         "overlap": float(ov[i]), "converged": bool(conv[i])})
    return rows


def best_overlap(rows, kind):
    return max(r["overlap"] for r in rows if r["matrix_kind"] == kind)
