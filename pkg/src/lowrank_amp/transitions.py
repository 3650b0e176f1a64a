"""Scalar state evolution for symmetric community detection and its transitions.

On the symmetric family Q = M = (a/r^2) J + (b/r) I the state evolution
reduces to b' = M_r(b / delta) with

    M_r(x) = r/(r-1) * (E[softmax_1(x/r e_1 + u)] - 1/r),   u_i ~ N(0, x/r) iid.

Estimators
----------
The plain Monte Carlo average of softmax_1 is too noisy at small x (the
linear term is O(x) while the sample spread is O(sqrt(x))). Because the u_i
are exchangeable, each draw is reused r times, once with every coordinate
playing the shifted role, and paired with its mirror -u. Both tricks are
unbiased and leave M_r(0) = 0 exact.

Near b = 1 the quantity of interest is 1 - M_r (the mse), which decays
like exp(-x/(4r)). That complement is estimated by importance sampling
from a mixture of mean shifts that pull one competitor up and the planted
coordinate down, so relative precision holds down to ~1e-12.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .errors import GridRangeError, ParameterError
from .streams import stream

CHUNK_ELEMS = 4_000_000


def default_samples(r):
    """Draws per M_r point: 2e5 up to r = 32, then a fixed budget of N*r."""
    return 200_000 if r <= 32 else max(20_000, int(200_000 * 32 / r))


@dataclass(frozen=True)
class ScalarBank:
    """Frozen standard normals (N, r) and importance-sampling labels J in 1..r-1."""

    r: int
    z: np.ndarray
    J: np.ndarray
    seed: int = 0

    @property
    def n(self):
        return self.z.shape[0]


def make_scalar_bank(r, n_samples=None, seed=0):
    r = int(r)
    if r < 2:
        raise ParameterError("r must be >= 2", field="r")
    n = int(n_samples or default_samples(r))
    z = stream(seed, f"scalar-se-{r}").standard_normal((n, r))
    J = stream(seed, f"scalar-se-J-{r}").integers(1, r, size=n)
    return ScalarBank(r, z, J, int(seed))


def _chunks(n, r):
    step = max(1, CHUNK_ELEMS // r)
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


def m_r(r, x, bank=None):
    """(M_r(x), standard error) with the symmetrised antithetic estimator."""
    if x < 0:
        raise ParameterError("x must be >= 0", field="x")
    bank = bank if bank is not None else make_scalar_bank(r)
    if x == 0:
        return 0.0, 0.0
    s = x / r
    sig = np.sqrt(x / r)
    vals = np.empty(bank.n)
    for sl in _chunks(bank.n, r):
        acc = 0.0
        for sign in (1.0, -1.0):
            u = sign * sig * bank.z[sl]
            e = np.exp(u - u.max(axis=1, keepdims=True))
            Z = e.sum(axis=1, keepdims=True)
            # softmax of coordinate k when k carries the shift s
            with np.errstate(over="ignore", divide="ignore"):
                p = 1.0 / (1.0 + np.exp(-s) * (Z / e - 1.0))
            acc = acc + p.mean(axis=1)
        vals[sl] = 0.5 * acc
    c = r / (r - 1)
    return float(c * (vals.mean() - 1.0 / r)), float(c * vals.std(ddof=1) / np.sqrt(bank.n))


def m_r_complement(r, x, bank=None):
    """(1 - M_r(x), standard error) by mixture importance sampling.

    Proposal: u_1 shifted by -s/2 and a random competitor u_J by +s/2, s = x/r.
    """
    if x < 0:
        raise ParameterError("x must be >= 0", field="x")
    bank = bank if bank is not None else make_scalar_bank(r)
    if x == 0:
        return 1.0, 0.0
    s = x / r
    var = x / r
    th = s / 2
    vals = np.empty(bank.n)
    for sl in _chunks(bank.n, r):
        u = np.sqrt(var) * bank.z[sl]
        u[:, 0] -= th
        u[np.arange(u.shape[0]), bank.J[sl]] += th
        a = th * (u[:, 1:] - u[:, [0]]) / var - th**2 / var
        log_w = np.log(r - 1) - logsumexp(a, axis=1)
        rest = logsumexp(u[:, 1:], axis=1)
        log_tail = rest - np.logaddexp(s + u[:, 0], rest)
        vals[sl] = np.exp(log_w + log_tail)
    c = r / (r - 1)
    return float(c * vals.mean()), float(c * vals.std(ddof=1) / np.sqrt(bank.n))


def m_r_asymptotic(r, x):
    """Large-r step approximation: M_r(beta r ln r) = 1 if beta > 2 else 0."""
    return (1.0 if x > 2 * r * np.log(r) else 0.0), 0.0


def delta_c(r):
    if r < 2:
        raise ParameterError("r must be >= 2", field="r")
    return 1.0 / r**2


def sbm_threshold(r, p_out, n):
    """|p_in - p_out| above which AMP detects the groups: r sqrt(p(1-p)) / sqrt(n)."""
    if not 0 < p_out < 1:
        raise ParameterError("p_out must lie in (0, 1)", field="p_out")
    return r * np.sqrt(p_out * (1 - p_out)) / np.sqrt(n)


def asymptotic_reference(r):
    """(1/(2 r ln r), 1/(4 r ln r)): large-r spinodal and static thresholds."""
    L = r * np.log(r)
    return 1.0 / (2 * L), 1.0 / (4 * L)


@dataclass
class BResult:
    b: float
    mse: float
    branch: str
    converged: bool
    iterations: int
    stderr: float
    trajectory: list = field(default_factory=list, repr=False)


def iterate_b(r, delta, b0, bank=None, tol=1e-9, t_max=10_000, complement=None, keep_trajectory=False):
    """Fixed point of b <- M_r(b / delta) on a frozen bank.

    With ``complement`` (default: b0 > 1/2) the iteration runs on c = 1 - b
    using :func:`m_r_complement`, which keeps relative accuracy when the
    mse is far below the Monte Carlo noise of M_r itself.
    """
    if not delta > 0:
        raise ParameterError("delta must be > 0", field="delta")
    if not 0 <= b0 <= 1:
        raise ParameterError("b0 must lie in [0, 1]", field="b0")
    bank = bank if bank is not None else make_scalar_bank(r)
    complement = b0 > 0.5 if complement is None else complement
    traj = []
    converged = False
    err = 0.0
    if complement:
        c = 1.0 - b0
        for t in range(1, t_max + 1):
            c_new, err = m_r_complement(r, (1.0 - c) / delta, bank)
            c_new = min(c_new, 1.0)
            if keep_trajectory:
                traj.append(1.0 - c_new)
            step = abs(c_new - c)
            c = c_new
            if step < tol and step <= 1e-6 * c:
                converged = True
                break
        b = 1.0 - c
        mse = (1 - 1 / r) * c
    else:
        b = b0
        for t in range(1, t_max + 1):
            b_new, err = m_r(r, b / delta, bank)
            b_new = max(b_new, 0.0)
            if keep_trajectory:
                traj.append(b_new)
            step = abs(b_new - b)
            b = b_new
            if step < tol:
                converged = True
                break
        mse = (1 - 1 / r) * (1 - b)
    branch = "uninformative" if b < 1e-4 else "informative"
    return BResult(float(b), float(mse), branch, converged, t, float(err), traj)


@dataclass
class ScalarSeCurve:
    r: int
    x: np.ndarray
    m: np.ndarray
    stderr: np.ndarray
    quad: dict = field(default_factory=dict)


def default_grid(r, n_points=400):
    """0 followed by log-spaced points on [1e-3 r^2, 10 r ln r]."""
    return np.concatenate([[0.0], np.geomspace(1e-3 * r * r, 10 * r * np.log(r), n_points)])


def _evaluator(r, bank, m_func):
    if m_func is not None:
        return m_func
    bank = bank if bank is not None else make_scalar_bank(r)
    return lambda x: m_r(r, x, bank)


def scalar_curve(r, bank=None, x_grid=None, m_func=None):
    x = default_grid(r) if x_grid is None else np.asarray(x_grid, dtype=float)
    f = _evaluator(r, bank, m_func)
    out = np.array([f(xi) for xi in x])
    meta = {"n_samples": bank.n, "seed": bank.seed} if bank is not None else {}
    return ScalarSeCurve(int(r), x, out[:, 0], out[:, 1], meta)


def find_spinodal(r, bank=None, x_grid=None, curve=None, m_func=None, rtol=1e-3):
    """max_x M_r(x)/x: grid maximum refined by golden-section search.

    Returns (delta_spinodal, x_star). For r <= 4 the transition is continuous
    and (delta_c, nan) is returned.
    """
    if r <= 4:
        return delta_c(r), float("nan")
    f = _evaluator(r, bank, m_func)
    curve = curve or scalar_curve(r, bank, x_grid, m_func=f)
    x, m = curve.x, curve.m
    pos = x > 0
    ratio = np.where(pos, m / np.where(pos, x, 1.0), -np.inf)
    i = int(np.argmax(ratio))
    lo = x[max(i - 1, 1)]
    hi = x[min(i + 1, len(x) - 1)]
    best_x, best = x[i], ratio[i]
    if hi > lo:
        # search in log x; the objective is smooth there
        g = lambda t: -f(np.exp(t))[0] / np.exp(t)
        try:
            res = minimize_scalar(g, bracket=(np.log(lo), np.log(best_x), np.log(hi)),
                                  method="golden", tol=rtol)
            if -res.fun > best:
                best_x, best = float(np.exp(res.x)), float(-res.fun)
        except ValueError:
            pass
    return float(best), float(best_x)


def equal_area_function(curve):
    """G(x) = int_0^x M_r - x M_r(x)/2 on the curve grid (trapezoid)."""
    integral = cumulative_trapezoid(curve.m, curve.x, initial=0.0)
    return integral - curve.x * curve.m / 2


def find_static(r, bank=None, x_grid=None, curve=None, m_func=None, rtol=1e-3):
    """Equal-area point: x where int_0^x M_r = x M_r(x)/2; returns (M_r(x)/x, x).

    The crossing is bracketed on the grid and refined by bisection, extending
    the trapezoid integral from the left grid node with fresh evaluations.
    """
    if r <= 4:
        return delta_c(r), float("nan")
    f = _evaluator(r, bank, m_func)
    curve = curve or scalar_curve(r, bank, x_grid, m_func=f)
    x, m = curve.x, curve.m
    G = equal_area_function(curve)
    idx = np.where((G[:-1] < 0) & (G[1:] >= 0))[0]
    if len(idx) == 0:
        raise GridRangeError(
            f"equal-area function has no sign change on x in [{x[0]:.3g}, {x[-1]:.3g}] "
            f"(G range {G.min():.3g}..{G.max():.3g}); widen the grid"
        )
    j = int(idx[-1])
    I0 = cumulative_trapezoid(m, x, initial=0.0)[j]

    def G_at(xx):
        mm = f(xx)[0]
        # Simpson rule over [x_j, xx] on top of the grid trapezoid up to x_j
        xm = 0.5 * (x[j] + xx)
        mid = f(xm)[0]
        area = I0 + (xx - x[j]) * (m[j] + 4 * mid + mm) / 6
        return area - xx * mm / 2, mm

    a, b = x[j], x[j + 1]
    while (b - a) > rtol * b:
        c = 0.5 * (a + b)
        if G_at(c)[0] < 0:
            a = c
        else:
            b = c
    xs = 0.5 * (a + b)
    return float(f(xs)[0] / xs), float(xs)


def equal_area_integral(r, delta, b1, b2, bank=None, n_nodes=64):
    """(r-1)/(2 r^2 delta) * int_{b1}^{b2} (M_r(u/delta) - u) du by Gauss-Legendre.

    The standard error is the weighted sum of pointwise errors (a bound, since
    the points share one bank).
    """
    bank = bank if bank is not None else make_scalar_bank(r)
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    u = 0.5 * (b2 - b1) * t + 0.5 * (b1 + b2)
    w = 0.5 * (b2 - b1) * w
    ev = np.array([m_r(r, ui / delta, bank) for ui in u])
    pref = (r - 1) / (2 * r**2 * delta)
    val = pref * np.sum(w * (ev[:, 0] - u))
    err = pref * np.sum(np.abs(w) * ev[:, 1])
    return float(val), float(err)


@dataclass
class TransitionReport:
    r: int
    delta_c: float
    delta_static: float = None
    delta_spinodal: float = None
    order: str = "second"
    tolerances: dict = field(default_factory=dict)

    def to_row(self):
        sp_ref, st_ref = asymptotic_reference(self.r)
        return {
            "r": self.r,
            "delta_c": self.delta_c,
            "delta_static": self.delta_static,
            "delta_spinodal": self.delta_spinodal,
            "order": self.order,
            "static_times_4rlogr": None if self.delta_static is None else self.delta_static / st_ref,
            "spinodal_times_2rlogr": None if self.delta_spinodal is None else self.delta_spinodal / sp_ref,
        }


def transition_report(r, bank=None, x_grid=None, n_samples=None, seed=0, curve=None):
    """Delta_c, and for r > 4 the static and spinodal thresholds, from one M_r curve."""
    r = int(r)
    dc = delta_c(r)
    if r <= 4:
        return TransitionReport(r, dc, order="second")
    bank = bank if bank is not None else make_scalar_bank(r, n_samples, seed)
    curve = curve or scalar_curve(r, bank, x_grid)
    sp, _ = find_spinodal(r, bank, curve=curve)
    st, _ = find_static(r, bank, curve=curve)
    tol = {"n_samples": bank.n, "grid_points": len(curve.x), "rtol": 1e-3}
    return TransitionReport(r, dc, st, sp, "first", tol)
