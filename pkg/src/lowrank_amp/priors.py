"""Row priors and their denoisers.

For a prior P(x) on R^r the denoiser works with the tilted measure

    P(x) exp(B.x - x.A.x / 2) / Z(A, B)

and returns its mean f(A, B), covariance df/dB and log Z(A, B). All three
priors here have closed forms. ``B`` may be a single r-vector or an
(n, r) batch sharing the same ``A``.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, ParameterError


@dataclass
class DenoiserResult:
    mean: np.ndarray
    cov: np.ndarray
    log_z: np.ndarray


def _batch(B, r):
    B = np.asarray(B, dtype=float)
    single = B.ndim == 1
    B2 = np.atleast_2d(B)
    if B2.shape[-1] != r:
        raise ParameterError(f"B has trailing dimension {B2.shape[-1]}, prior rank is {r}")
    return B2, single


def _unbatch(res, single):
    if single:
        return DenoiserResult(res.mean[0], res.cov[0], res.log_z[0])
    return res


class Prior:
    kind = None
    rank = None

    def sample(self, rng, size):
        """Draw ``size`` rows, shape (size, rank)."""
        raise NotImplementedError

    def denoise(self, A, B):
        raise NotImplementedError

    def second_moment(self):
        """E[x x^T] under the prior."""
        raise NotImplementedError

    def mean_squared_norm(self):
        return float(np.trace(self.second_moment()))

    def to_dict(self):
        raise NotImplementedError


class CommunityPrior(Prior):
    """Uniform one-hot vectors in R^r: node belongs to one of r groups."""

    kind = "community"

    def __init__(self, rank):
        if int(rank) < 1:
            raise ParameterError("community rank must be >= 1", field="prior.rank")
        self.rank = int(rank)

    def sample(self, rng, size):
        labels = rng.integers(0, self.rank, size=size)
        return np.eye(self.rank)[labels]

    def denoise(self, A, B):
        A = np.asarray(A, dtype=float)
        B2, single = _batch(B, self.rank)
        logits = B2 - 0.5 * np.diag(A)
        lse = logsumexp(logits, axis=1)
        mean = np.exp(logits - lse[:, None])
        cov = mean[:, :, None] * np.eye(self.rank) - mean[:, :, None] * mean[:, None, :]
        return _unbatch(DenoiserResult(mean, cov, lse - np.log(self.rank)), single)

    def second_moment(self):
        return np.eye(self.rank) / self.rank

    def to_dict(self):
        return {"kind": self.kind, "rank": self.rank}

    def __repr__(self):
        return f"CommunityPrior(rank={self.rank})"


class RademacherPrior(Prior):
    """x = +1 or -1 with equal probability (rank one)."""

    kind = "rademacher"
    rank = 1

    def sample(self, rng, size):
        return rng.choice([-1.0, 1.0], size=(size, 1))

    def denoise(self, A, B):
        A = np.asarray(A, dtype=float).reshape(1, 1)
        B2, single = _batch(B, 1)
        b = B2[:, 0]
        m = np.tanh(b)
        # log cosh(b), overflow-safe
        logcosh = np.abs(b) + np.log1p(np.exp(-2 * np.abs(b))) - np.log(2)
        res = DenoiserResult(m[:, None], (1 - m**2)[:, None, None], logcosh - 0.5 * A[0, 0])
        return _unbatch(res, single)

    def second_moment(self):
        return np.ones((1, 1))

    def to_dict(self):
        return {"kind": self.kind, "rank": 1}

    def __repr__(self):
        return "RademacherPrior()"


class GaussianPrior(Prior):
    """Multivariate normal prior, zero mean and identity covariance by default."""

    kind = "gaussian"

    def __init__(self, rank, mean=None, cov=None):
        self.rank = int(rank)
        if self.rank < 1:
            raise ParameterError("gaussian rank must be >= 1", field="prior.rank")
        self.mean = np.zeros(self.rank) if mean is None else np.asarray(mean, dtype=float).reshape(self.rank)
        self.cov = np.eye(self.rank) if cov is None else np.asarray(cov, dtype=float).reshape(self.rank, self.rank)
        if not np.allclose(self.cov, self.cov.T):
            raise ParameterError("gaussian prior covariance must be symmetric", field="prior.cov")
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ParameterError("gaussian prior covariance must be positive definite", field="prior.cov")
        self._prec = np.linalg.inv(self.cov)
        self._logdet = 2 * np.sum(np.log(np.diag(self._chol)))

    def sample(self, rng, size):
        return self.mean + rng.standard_normal((size, self.rank)) @ self._chol.T

    def denoise(self, A, B):
        A = np.asarray(A, dtype=float)
        B2, single = _batch(B, self.rank)
        P = self._prec + A
        P = 0.5 * (P + P.T)
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise DomainError("posterior precision inv(cov) + A is not positive definite")
        cov = np.linalg.inv(P)
        cov = 0.5 * (cov + cov.T)
        h = B2 + self._prec @ self.mean
        mean = h @ cov
        logdet_P = 2 * np.sum(np.log(np.diag(L)))
        log_z = (
            0.5 * np.einsum("ij,ij->i", h, mean)
            - 0.5 * (self._logdet + logdet_P)
            - 0.5 * self.mean @ self._prec @ self.mean
        )
        cov_b = np.broadcast_to(cov, (B2.shape[0], self.rank, self.rank)).copy()
        return _unbatch(DenoiserResult(mean, cov_b, log_z), single)

    def second_moment(self):
        return self.cov + np.outer(self.mean, self.mean)

    def to_dict(self):
        d = {"kind": self.kind, "rank": self.rank}
        if np.any(self.mean != 0):
            d["mean"] = self.mean.tolist()
        if np.any(self.cov != np.eye(self.rank)):
            d["cov"] = self.cov.tolist()
        return d

    def __repr__(self):
        return f"GaussianPrior(rank={self.rank})"


def make_prior(spec):
    spec = dict(spec)
    kind = spec.get("kind")
    if kind == "community":
        return CommunityPrior(spec.get("rank", 2))
    if kind == "rademacher":
        if spec.get("rank", 1) != 1:
            raise ParameterError("rademacher prior has rank 1", field="prior.rank")
        return RademacherPrior()
    if kind == "gaussian":
        return GaussianPrior(spec.get("rank", 1), spec.get("mean"), spec.get("cov"))
    raise ParameterError(f"unknown prior kind {kind!r}", field="prior.kind")


def denoise_jacobian_check(prior, A, B, step=1e-5):
    """Max |cov_ij - d mean_i / d B_j| using central differences in B."""
    B = np.asarray(B, dtype=float)
    cov = prior.denoise(A, B).cov
    r = B.shape[0]
    jac = np.empty((r, r))
    for j in range(r):
        e = np.zeros(r)
        e[j] = step
        jac[:, j] = (prior.denoise(A, B + e).mean - prior.denoise(A, B - e).mean) / (2 * step)
    return float(np.max(np.abs(cov - jac)))


def log_z_gradient_check(prior, A, B, step=1e-5):
    """Max |mean_j - d log Z / d B_j| using central differences in B."""
    B = np.asarray(B, dtype=float)
    mean = prior.denoise(A, B).mean
    grad = np.empty(B.shape[0])
    for j in range(B.shape[0]):
        e = np.zeros(B.shape[0])
        e[j] = step
        grad[j] = (prior.denoise(A, B + e).log_z - prior.denoise(A, B - e).log_z) / (2 * step)
    return float(np.max(np.abs(mean - grad)))
