"""Approximate message passing for the XKX^T and UV^T models.

The channel enters only through the score matrix ``S`` and the inverse
Fisher information ``delta``; everything else is the Gaussian-noise AMP.
Sweeps are synchronous: every row is updated from the same snapshot.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParameterError
from .instances import aligned_mse, community_overlap, mse
from .priors import CommunityPrior
from .streams import stream

INIT_SCALE = 1e-10
# escaping the uniform point from a 1e-10 start takes ~log(1e10)/log(1/(delta r^2))
# sweeps, ~200 near the threshold; earlier the diff test fires on the trivial point
T_MIN = 300


@dataclass
class AmpState:
    """Iterate of the XKX^T solver.

    ``v_sum`` is the r x r sum of the per-row covariances; ``A`` and ``B``
    are the fields that produced ``a`` (``None`` before the first sweep).
    """

    a: np.ndarray
    a_old: np.ndarray
    v_sum: np.ndarray
    A: np.ndarray = None
    B: np.ndarray = None
    t: int = 0
    diff: float = np.inf


@dataclass
class UvAmpState:
    u: np.ndarray
    u_old: np.ndarray
    su_sum: np.ndarray
    v: np.ndarray
    v_old: np.ndarray
    sv_sum: np.ndarray
    A_u: np.ndarray = None
    B_u: np.ndarray = None
    A_v: np.ndarray = None
    B_v: np.ndarray = None
    t: int = 0
    diff: float = np.inf


@dataclass
class AmpReport:
    converged: bool
    diverged: bool
    iterations: int
    free_energy: float
    diffs: list
    state: object = field(repr=False)
    metrics: dict = field(default_factory=dict)
    trace: list = field(default_factory=list, repr=False)
    error: str = None

    def to_dict(self):
        return {
            "converged": self.converged,
            "diverged": self.diverged,
            "iterations": self.iterations,
            "free_energy": self.free_energy,
            "metrics": self.metrics,
            "diffs": self.diffs,
            "error": self.error,
        }


def _check_damping(damping):
    if not 0.0 <= damping < 1.0:
        raise ParameterError("damping must satisfy 0 <= gamma < 1", field="damping")


def _fields_xkx(a, a_old, v_sum, S, K, delta):
    n = a.shape[0]
    B = (S @ a) @ K / np.sqrt(n) - a_old @ (K @ v_sum @ K) / (n * delta)
    A = K @ (a.T @ a) @ K / (delta * n)
    return A, B


def amp_step_xkx(state, S, K, delta, prior, damping=0.0):
    """One synchronous sweep; returns the next :class:`AmpState`."""
    _check_damping(damping)
    a = state.a
    with np.errstate(invalid="ignore", over="ignore"):
        # checked just below
        A, B = _fields_xkx(a, state.a_old, state.v_sum, S, K, delta)
    if not (np.all(np.isfinite(B)) and np.all(np.isfinite(A))):
        raise DivergenceError("non-finite field B", state.t)
    res = prior.denoise(A, B)
    v_new = res.cov.sum(axis=0)
    a_next = (1 - damping) * res.mean + damping * a
    v_next = (1 - damping) * v_new + damping * state.v_sum
    diff = float(np.sum((a_next - a) ** 2) / a.shape[0])
    return AmpState(a_next, a, v_next, A, B, state.t + 1, diff)


def init_state_xkx(n, r, init="uninformative", truth=None, seed=0, scale=INIT_SCALE):
    if init == "uninformative":
        a = scale * stream(seed, "amp-init").standard_normal((n, r))
    elif init == "informative":
        if truth is None:
            raise ParameterError("informative initialisation needs the planted factors", field="init")
        a = np.array(truth, dtype=float)
    else:
        raise ParameterError(f"unknown init {init!r}", field="init")
    return AmpState(a, np.zeros((n, r)), np.zeros((r, r)))


def bethe_free_energy_xkx(state, S, K, delta, prior):
    """Bethe free energy per node at (a, v_sum).

    The fields are rebuilt from ``a`` in fixed-point form (previous iterate
    equal to the current one), so the value is a function of the state only.
    """
    a, v_sum = state.a, state.v_sum
    n = a.shape[0]
    A, B = _fields_xkx(a, a, v_sum, S, K, delta)
    log_z = prior.denoise(A, B).log_z.sum()
    G = a.T @ a
    t1 = np.sum(a * ((S @ a) @ K)) / np.sqrt(n)
    t2 = np.trace(K @ G @ K @ G) / (n * delta)
    t3 = np.trace(K @ G @ K @ v_sum) / (n * delta)
    return float((log_z - 0.5 * t1 + 0.25 * t2 + t3) / n)


def _xkx_metrics(state, instance, prior):
    out = {}
    X = instance.X
    n = state.a.shape[0]
    out["Q"] = (state.a.T @ state.a / n).tolist()
    if X is None:
        return out
    out["M"] = (state.a.T @ X / n).tolist()
    out["mse_raw"] = mse(state.a, X)
    if isinstance(prior, CommunityPrior):
        out["mse"] = aligned_mse(state.a, X)
        out["overlap"] = community_overlap(state.a, X)
    else:
        out["mse"] = aligned_mse(state.a, X, signs=True)
    return out


def run_amp_xkx(instance, prior=None, init="uninformative", damping=0.0, t_min=T_MIN,
                t_max=1000, tol=1e-6, seed=0, trace=False):
    """Iterate :func:`amp_step_xkx` until ``diff < tol`` (after ``t_min``) or ``t_max``.

    Divergence is reported in the returned :class:`AmpReport`, not raised.
    """
    prior = prior or instance.prior
    if prior.rank != instance.r:
        raise ParameterError("prior rank does not match the instance", field="prior.rank")
    _check_damping(damping)
    n, r = instance.n, prior.rank
    K = instance.K
    state = init_state_xkx(n, r, init, instance.X, seed)
    diffs, rows = [], []
    converged, diverged, error = False, False, None
    while state.t < t_max:
        try:
            state = amp_step_xkx(state, instance.S, K, instance.delta, prior, damping)
        except DivergenceError as exc:
            diverged, error = True, str(exc)
            break
        diffs.append(state.diff)
        if trace:
            row = {"t": state.t, "diff": state.diff}
            if instance.X is not None:
                row["mse"] = aligned_mse(state.a, instance.X, signs=not isinstance(prior, CommunityPrior))
                row["overlap"] = community_overlap(state.a, instance.X) if isinstance(prior, CommunityPrior) else None
            rows.append(row)
        if state.t > t_min and state.diff < tol:
            converged = True
            break
    fe = np.nan if diverged else bethe_free_energy_xkx(state, instance.S, K, instance.delta, prior)
    metrics = {} if diverged else _xkx_metrics(state, instance, prior)
    return AmpReport(converged, diverged, state.t, fe, diffs, state, metrics, rows, error)


def _fields_u(u_mem, v, sv_sum, S, delta):
    n = u_mem.shape[0]
    B_u = S @ v / np.sqrt(n) - u_mem @ sv_sum / (n * delta)
    A_u = v.T @ v / (n * delta)
    return A_u, B_u


def _fields_v(v_mem, u, su_sum, S, delta):
    n = u.shape[0]
    B_v = S.T @ u / np.sqrt(n) - v_mem @ su_sum / (n * delta)
    A_v = u.T @ u / (n * delta)
    return A_v, B_v


def amp_step_uv(state, S, delta, prior_u, prior_v, damping=0.0):
    """One alternating sweep: u from the current v, then v from the new u.

    With the simultaneous schedule the pairs (u^t, v^(t+1)) and (v^t, u^(t+1))
    form two decoupled chains, which under sign-symmetric priors can settle
    on sign-flipped copies and cycle with period two. Alternating couples
    them; the Onsager term then carries the iterate the field was built
    from, i.e. the current u (resp. v), not the one before it.
    """
    _check_damping(damping)
    g = damping
    u, v = state.u, state.v
    A_u, B_u = _fields_u(u, v, state.sv_sum, S, delta)
    if not np.all(np.isfinite(B_u)):
        raise DivergenceError("non-finite field B_u", state.t)
    ru = prior_u.denoise(A_u, B_u)
    u_next = (1 - g) * ru.mean + g * u
    su_next = (1 - g) * ru.cov.sum(axis=0) + g * state.su_sum
    A_v, B_v = _fields_v(v, u_next, su_next, S, delta)
    if not np.all(np.isfinite(B_v)):
        raise DivergenceError("non-finite field B_v", state.t)
    rv = prior_v.denoise(A_v, B_v)
    v_next = (1 - g) * rv.mean + g * v
    sv_next = (1 - g) * rv.cov.sum(axis=0) + g * state.sv_sum
    diff = float(np.sum((u_next - u) ** 2) / u.shape[0] + np.sum((v_next - v) ** 2) / v.shape[0])
    return UvAmpState(u_next, u, su_next, v_next, v, sv_next, A_u, B_u, A_v, B_v, state.t + 1, diff)


def init_state_uv(n, m, r, init="uninformative", truth=None, seed=0, scale=INIT_SCALE):
    if init == "uninformative":
        u = scale * stream(seed, "amp-init-u").standard_normal((n, r))
        v = scale * stream(seed, "amp-init-v").standard_normal((m, r))
    elif init == "informative":
        if truth is None or truth[0] is None:
            raise ParameterError("informative initialisation needs the planted factors", field="init")
        u, v = (np.array(x, dtype=float) for x in truth)
    else:
        raise ParameterError(f"unknown init {init!r}", field="init")
    z = np.zeros((r, r))
    return UvAmpState(u, np.zeros_like(u), z.copy(), v, np.zeros_like(v), z.copy())


def bethe_free_energy_uv(state, S, delta, prior_u, prior_v):
    """Bethe free energy (per row of U) at (u, v, sigma sums), fixed-point form."""
    u, v, su, sv = state.u, state.v, state.su_sum, state.sv_sum
    n = u.shape[0]
    A_u, B_u = _fields_u(u, v, sv, S, delta)
    A_v, B_v = _fields_v(v, u, su, S, delta)
    log_z = prior_u.denoise(A_u, B_u).log_z.sum() + prior_v.denoise(A_v, B_v).log_z.sum()
    Gu, Gv = u.T @ u, v.T @ v
    t1 = np.sum(u * (S @ v)) / np.sqrt(n)
    t2 = np.trace(Gu @ Gv) / (n * delta)
    t3 = (np.trace(Gu @ sv) + np.trace(su @ Gv)) / (n * delta)
    return float((log_z - t1 + 0.5 * t2 + t3) / n)


def _uv_metrics(state, instance, prior_u):
    n, m = state.u.shape[0], state.v.shape[0]
    out = {"Q_u": (state.u.T @ state.u / n).tolist(), "Q_v": (state.v.T @ state.v / m).tolist()}
    if instance.U is None:
        return out
    signs = not isinstance(prior_u, CommunityPrior)
    out["M_u"] = (state.u.T @ instance.U / n).tolist()
    out["M_v"] = (state.v.T @ instance.V / m).tolist()
    out["mse_u"] = aligned_mse(state.u, instance.U, signs=signs)
    out["mse_v"] = aligned_mse(state.v, instance.V, signs=signs)
    return out


def run_amp_uv(instance, prior_u=None, prior_v=None, init="uninformative", damping=0.0,
               t_min=T_MIN, t_max=1000, tol=1e-6, seed=0, trace=False):
    prior_u = prior_u or instance.prior
    prior_v = prior_v or instance.prior_v
    _check_damping(damping)
    n, m, r = instance.n, instance.m, prior_u.rank
    state = init_state_uv(n, m, r, init, (instance.U, instance.V), seed)
    diffs, rows = [], []
    converged, diverged, error = False, False, None
    while state.t < t_max:
        try:
            state = amp_step_uv(state, instance.S, instance.delta, prior_u, prior_v, damping)
        except DivergenceError as exc:
            diverged, error = True, str(exc)
            break
        diffs.append(state.diff)
        if trace:
            rows.append({"t": state.t, "diff": state.diff})
        if state.t > t_min and state.diff < tol:
            converged = True
            break
    fe = np.nan if diverged else bethe_free_energy_uv(state, instance.S, instance.delta, prior_u, prior_v)
    metrics = {} if diverged else _uv_metrics(state, instance, prior_u)
    return AmpReport(converged, diverged, state.t, fe, diffs, state, metrics, rows, error)
