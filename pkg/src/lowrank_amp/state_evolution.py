"""State evolution for the XKX^T and UV^T models.

Expectations over the planted row x and the Gaussian field noise are taken
on a frozen sample bank (common random numbers), so one SE step is a
deterministic map and fixed-point iteration behaves like its infinite-N
counterpart up to a fixed quadrature bias. Gauss-Hermite banks give exact
tensor-product rules for small rank.
"""
from collections import namedtuple
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import NumericalError, ParameterError
from .priors import CommunityPrior, GaussianPrior, RademacherPrior
from .streams import stream

PSD_TOL = 1e-10

Estimate = namedtuple("Estimate", "value stderr samples")


@dataclass(frozen=True)
class QuadratureSpec:
    method: str = "monte-carlo"
    n_samples: int = 100_000
    nodes: int = 20
    seed: int = 0
    fresh: bool = False

    def __post_init__(self):
        if self.method not in ("monte-carlo", "gauss-hermite"):
            raise ParameterError(f"unknown quadrature method {self.method!r}", field="quad.method")
        if int(self.n_samples) < 1:
            raise ParameterError("n_samples must be >= 1", field="quad.n_samples")
        if int(self.nodes) < 1:
            raise ParameterError("nodes must be >= 1", field="quad.nodes")

    def to_dict(self):
        return {"method": self.method, "n_samples": int(self.n_samples), "nodes": int(self.nodes),
                "seed": int(self.seed), "fresh": bool(self.fresh)}


@dataclass(frozen=True)
class SampleBank:
    """Planted rows ``x`` (N, r), standard normals ``z`` (N, r), weights ``w`` (N,) summing to 1.

    Monte Carlo banks are built from independent units of ``unit`` consecutive
    rows (antithetic noise pairs, stratified over a discrete prior support);
    standard errors are computed over unit averages.
    """

    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    monte_carlo: bool = True
    unit: int = 1

    def mean(self, values):
        return np.tensordot(self.w, values, axes=(0, 0))

    def stderr(self, values):
        """Standard error of :meth:`mean` (zero for deterministic rules)."""
        values = np.asarray(values)
        if not self.monte_carlo:
            return np.zeros(values.shape[1:])
        blocks = values.reshape((-1, self.unit) + values.shape[1:]).mean(axis=1)
        n = blocks.shape[0]
        if n < 2:
            return np.full(values.shape[1:], np.inf)
        return np.std(blocks, axis=0, ddof=1) / np.sqrt(n)


def _gh(nodes, dim):
    t, w = hermegauss(nodes)
    w = w / np.sqrt(2 * np.pi)
    pts = np.array(list(product(t, repeat=dim))).reshape(-1, dim)
    wts = np.prod(np.array(list(product(w, repeat=dim))).reshape(-1, dim), axis=1)
    return pts, wts


def _prior_rule(prior, nodes):
    # exact support enumeration for discrete priors, GH for the Gaussian one
    if isinstance(prior, CommunityPrior):
        return np.eye(prior.rank), np.full(prior.rank, 1.0 / prior.rank)
    if isinstance(prior, RademacherPrior):
        return np.array([[-1.0], [1.0]]), np.array([0.5, 0.5])
    if isinstance(prior, GaussianPrior):
        t, w = _gh(nodes, prior.rank)
        return prior.mean + t @ prior._chol.T, w
    raise ParameterError(f"no quadrature rule for prior {prior!r}", field="quad.method")


def make_bank(prior, quad, name="se", step=None):
    """Sample bank for ``prior``; ``name`` separates independent banks (u and v sides)."""
    r = prior.rank
    if quad.method == "gauss-hermite":
        if r > 3:
            raise ParameterError("gauss-hermite quadrature is limited to rank <= 3", field="quad.method")
        xs, wx = _prior_rule(prior, quad.nodes)
        zs, wz = _gh(quad.nodes, r)
        x = np.repeat(xs, len(zs), axis=0)
        z = np.tile(zs, (len(xs), 1))
        w = np.outer(wx, wz).ravel()
        return SampleBank(x, z, w / w.sum(), monte_carlo=False)
    tag = name if step is None else f"{name}-{step}"
    rng_z = stream(quad.seed, f"{tag}-noise")
    if isinstance(prior, (CommunityPrior, RademacherPrior)):
        # every base normal is paired with its mirror and with each support point
        support, _ = _prior_rule(prior, 1)
        unit = 2 * len(support)
        n_units = max(1, -(-int(quad.n_samples) // unit))
        z0 = rng_z.standard_normal((n_units, 1, r))
        z = np.concatenate([z0, -z0], axis=1)
        z = np.repeat(z, len(support), axis=1).reshape(-1, r)
        x = np.tile(support, (2 * n_units, 1))
    else:
        # antithetic pair (x, z), (2 mean - x, -z); the prior is symmetric about its mean
        unit = 2
        n_units = max(1, -(-int(quad.n_samples) // unit))
        x0 = prior.sample(stream(quad.seed, f"{tag}-prior"), n_units)
        z0 = rng_z.standard_normal((n_units, r))
        x = np.stack([x0, 2 * _prior_mean(prior) - x0], axis=1).reshape(-1, r)
        z = np.stack([z0, -z0], axis=1).reshape(-1, r)
    return SampleBank(x, z, np.full(len(x), 1.0 / len(x)), True, unit)


def psd_sqrt(C, name="KQK/delta"):
    """Symmetric square root; eigenvalues in [-PSD_TOL, 0) are clamped to 0."""
    C = 0.5 * (C + C.T)
    lam, vec = np.linalg.eigh(C)
    if lam.min() < -PSD_TOL:
        raise NumericalError(f"{name} is not positive semidefinite", float(lam.min()))
    lam = np.clip(lam, 0.0, None)
    return (vec * np.sqrt(lam)) @ vec.T


@dataclass
class SeState:
    Q: np.ndarray
    M: np.ndarray
    t: int = 0
    nishimori: bool = False
    stderr: dict = field(default_factory=dict, repr=False)

    def copy(self, **kw):
        d = {"Q": self.Q.copy(), "M": self.M.copy(), "t": self.t, "nishimori": self.nishimori}
        d.update(kw)
        return SeState(**d)


@dataclass
class SeStateUV:
    Q_u: np.ndarray
    M_u: np.ndarray
    Q_v: np.ndarray
    M_v: np.ndarray
    t: int = 0
    stderr: dict = field(default_factory=dict, repr=False)


def init_state(prior, mode="uninformative", eps=1e-6, nishimori=False):
    """Q = M = E[x]E[x]^T + eps*I (uninformative) or E[x x^T] (informative)."""
    r = prior.rank
    if mode == "informative":
        Q = np.array(prior.second_moment(), dtype=float)
    elif mode == "uninformative":
        mean = _prior_mean(prior)
        Q = np.outer(mean, mean) + eps * np.eye(r)
    else:
        raise ParameterError(f"unknown init {mode!r}", field="init")
    return SeState(Q.copy(), Q.copy(), 0, nishimori)


def _prior_mean(prior):
    if isinstance(prior, CommunityPrior):
        return np.full(prior.rank, 1.0 / prior.rank)
    if isinstance(prior, GaussianPrior):
        return prior.mean.copy()
    return np.zeros(prior.rank)


def _fields_xkx(state, prior, K, delta, bank):
    KQK = K @ state.Q @ K
    A = KQK / delta
    L = psd_sqrt(A)
    B = bank.x @ (K @ state.M @ K).T / delta + bank.z @ L.T
    return A, B


def _check_delta(delta):
    if not (np.isfinite(delta) and delta > 0):
        raise ParameterError("delta must be > 0", field="delta")


def se_step_xkx(state, prior, K, delta, bank):
    """Q' = E[f f^T], M' = E[f x^T] with A = KQK/delta, B = KMKx/delta + xi."""
    _check_delta(delta)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A, B = _fields_xkx(state, prior, K, delta, bank)
    f = prior.denoise(A, B).mean
    ff = f[:, :, None] * f[:, None, :]
    fx = f[:, :, None] * bank.x[:, None, :]
    M = bank.mean(fx)
    if state.nishimori:
        M = 0.5 * (M + M.T)
        Q = M.copy()
    else:
        Q = bank.mean(ff)
        Q = 0.5 * (Q + Q.T)
    se = {"Q": bank.stderr(ff), "M": bank.stderr(fx), "Q-M": bank.stderr(ff - fx)}
    return SeState(Q, M, state.t + 1, state.nishimori, se)


def se_fixed_point(prior, K, delta, quad=None, init=None, tol=1e-9, t_max=1000, bank=None):
    """Iterate :func:`se_step_xkx` until max|Q' - Q| < tol. Returns (state, converged)."""
    quad = quad or QuadratureSpec()
    state = init if init is not None else init_state(prior)
    if bank is None and not quad.fresh:
        bank = make_bank(prior, quad)
    while state.t < t_max:
        b = bank if bank is not None else make_bank(prior, quad, step=state.t)
        new = se_step_xkx(state, prior, K, delta, b)
        done = np.max(np.abs(new.Q - state.Q)) < tol and np.max(np.abs(new.M - state.M)) < tol
        state = new
        if done:
            return state, True
    return state, False


def _noise_features(x, z):
    # polynomials in z with zero conditional mean given x (z ~ N(0, I) independent of x)
    s = z.sum(axis=1)
    xz = np.einsum("ij,ij->i", x, z)
    he2 = z**2 - 1
    return np.column_stack([
        he2.sum(axis=1),
        np.einsum("ij,ij->i", x, he2),
        s**2 - z.shape[1],
        xz * s - x.sum(axis=1),
        xz**2 - np.einsum("ij,ij->i", x, x),
    ])


def control_variate(values, bank):
    """Regression control variate on :func:`_noise_features`; returns adjusted per-sample values.

    The features have known mean zero, so the adjusted values keep the same
    expectation while shedding the part of the variance the fit explains.
    Deterministic rules are returned unchanged.
    """
    if not bank.monte_carlo or len(values) < 50:
        return values
    F = _noise_features(bank.x, bank.z)
    design = np.column_stack([np.ones(len(values)), F])
    beta = np.linalg.lstsq(design, values, rcond=None)[0]
    return values - F @ beta[1:]


def se_free_energy_xkx(state, prior, K, delta, bank):
    """phi = E log Z(KQK/delta, KMKx/delta + xi) - Tr(KMKM^T)/(2 delta) + Tr(KQKQ^T)/(4 delta)."""
    _check_delta(delta)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A, B = _fields_xkx(state, prior, K, delta, bank)
    if isinstance(prior, CommunityPrior):
        # log Z(A, B + c 1) = log Z(A, B) + c for one-hot rows; the noise
        # component along 1 has mean zero, so it is dropped (control variate)
        common = (bank.z @ psd_sqrt(A).T).mean(axis=1)
        B = B - common[:, None]
    log_z = prior.denoise(A, B).log_z
    Q, M = state.Q, state.M
    const = -np.trace(K @ M @ K @ M.T) / (2 * delta) + np.trace(K @ Q @ K @ Q.T) / (4 * delta)
    vals = control_variate(log_z + const, bank)
    return Estimate(float(bank.mean(vals)), float(bank.stderr(vals[:, None])[0]), vals)


def se_mse(state, prior):
    """Tr E[x x^T] - 2 Tr M + Tr Q; equals Tr(E[xx^T] - Q) on the Nishimori line."""
    return float(np.trace(prior.second_moment()) - 2 * np.trace(state.M) + np.trace(state.Q))


def init_state_uv(prior_u, prior_v, mode="uninformative", eps=1e-6):
    su = init_state(prior_u, mode, eps)
    sv = init_state(prior_v, mode, eps)
    return SeStateUV(su.Q, su.M, sv.Q, sv.M)


def _fields_u(Q_v, M_v, alpha, delta, bank_u):
    A_u = alpha * Q_v / delta
    B_u = alpha * bank_u.x @ M_v.T / delta + np.sqrt(alpha) * bank_u.z @ psd_sqrt(Q_v / delta, "Q_v/delta").T
    return A_u, B_u


def _fields_v(Q_u, M_u, delta, bank_v):
    A_v = Q_u / delta
    B_v = bank_v.x @ M_u.T / delta + bank_v.z @ psd_sqrt(Q_u / delta, "Q_u/delta").T
    return A_v, B_v


def _overlaps(prior, A, B, bank):
    f = prior.denoise(A, B).mean
    ff = f[:, :, None] * f[:, None, :]
    fx = f[:, :, None] * bank.x[:, None, :]
    Q = bank.mean(ff)
    return 0.5 * (Q + Q.T), bank.mean(fx), bank.stderr(ff), bank.stderr(fx)


def se_step_uv(state, prior_u, prior_v, alpha, delta, bank_u, bank_v):
    """Simultaneous update of (Q_u, M_u) and (Q_v, M_v).

    u side: A = alpha Q_v/delta, B = alpha M_v u/delta + sqrt(alpha) xi_v;
    v side: A = Q_u/delta, B = M_u v/delta + xi_u. The solver alternates
    instead; both schedules share their fixed points.
    """
    _check_delta(delta)
    if not alpha > 0:
        raise ParameterError("alpha must be > 0", field="alpha")
    Q_u, M_u, eQ_u, eM_u = _overlaps(prior_u, *_fields_u(state.Q_v, state.M_v, alpha, delta, bank_u), bank_u)
    Q_v, M_v, eQ_v, eM_v = _overlaps(prior_v, *_fields_v(state.Q_u, state.M_u, delta, bank_v), bank_v)
    se = {"Q_u": eQ_u, "M_u": eM_u, "Q_v": eQ_v, "M_v": eM_v}
    return SeStateUV(Q_u, M_u, Q_v, M_v, state.t + 1, se)


def se_fixed_point_uv(prior_u, prior_v, alpha, delta, quad=None, init=None, tol=1e-9, t_max=1000):
    quad = quad or QuadratureSpec()
    state = init if init is not None else init_state_uv(prior_u, prior_v)
    bank_u = make_bank(prior_u, quad, "se-u")
    bank_v = make_bank(prior_v, quad, "se-v")
    while state.t < t_max:
        if quad.fresh:
            bank_u = make_bank(prior_u, quad, "se-u", state.t)
            bank_v = make_bank(prior_v, quad, "se-v", state.t)
        new = se_step_uv(state, prior_u, prior_v, alpha, delta, bank_u, bank_v)
        done = max(np.max(np.abs(getattr(new, k) - getattr(state, k))) for k in ("Q_u", "M_u", "Q_v", "M_v")) < tol
        state = new
        if done:
            return state, True
    return state, False


def se_free_energy_uv(state, prior_u, prior_v, alpha, delta, bank_u, bank_v):
    """phi = E log Z_u + alpha E log Z_v - alpha Tr(M_u M_v^T)/delta + alpha Tr(Q_u Q_v^T)/(2 delta).

    Per row of U: the n-row side carries weight 1 and the m = alpha n side weight alpha.
    """
    lu = prior_u.denoise(*_fields_u(state.Q_v, state.M_v, alpha, delta, bank_u)).log_z
    lv = prior_v.denoise(*_fields_v(state.Q_u, state.M_u, delta, bank_v)).log_z
    const = (-alpha * np.trace(state.M_u @ state.M_v.T) / delta
             + alpha * np.trace(state.Q_u @ state.Q_v.T) / (2 * delta))
    lu = control_variate(lu, bank_u)
    lv = control_variate(lv, bank_v)
    value = bank_u.mean(lu) + alpha * bank_v.mean(lv) + const
    err = np.hypot(bank_u.stderr(lu[:, None])[0], alpha * bank_v.stderr(lv[:, None])[0])
    return Estimate(float(value), float(err), (lu, lv))
