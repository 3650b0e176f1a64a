import numpy as np
import pytest

from lowrank_amp.errors import NumericalError, ParameterError
from lowrank_amp.priors import CommunityPrior, GaussianPrior, RademacherPrior
from lowrank_amp.state_evolution import (
    QuadratureSpec, SeState, SeStateUV, control_variate, init_state, init_state_uv, make_bank,
    psd_sqrt, se_fixed_point, se_fixed_point_uv, se_free_energy_uv, se_free_energy_xkx,
    se_mse, se_step_uv, se_step_xkx,
)
from lowrank_amp.transitions import (
    equal_area_integral, iterate_b, m_r, make_scalar_bank,
)

MC = QuadratureSpec(n_samples=100_000)
GH = QuadratureSpec("gauss-hermite", nodes=40)


def sym(b, r):
    return (1 - b) / r**2 * np.ones((r, r)) + b / r * np.eye(r)


def sym_b(M, r):
    # b from the {J, I} decomposition: M_kk - M_kl = b / r
    off = M[~np.eye(r, dtype=bool)].mean()
    return r * (np.diag(M).mean() - off)


# --- quadrature machinery ----------------------------------------------------

def test_quadrature_spec_validation():
    for bad in (dict(method="simpson"), dict(n_samples=0), dict(nodes=0)):
        with pytest.raises(ParameterError):
            QuadratureSpec(**bad)
    with pytest.raises(ParameterError):
        make_bank(GaussianPrior(4), QuadratureSpec("gauss-hermite"))


def test_bank_weights_and_determinism():
    b1 = make_bank(CommunityPrior(3), QuadratureSpec(n_samples=600, seed=4))
    b2 = make_bank(CommunityPrior(3), QuadratureSpec(n_samples=600, seed=4))
    np.testing.assert_array_equal(b1.z, b2.z)
    assert b1.w.sum() == pytest.approx(1.0)
    # each unit holds +z and -z against every group
    assert np.allclose(b1.z[:3], -b1.z[3:6]) and np.allclose(b1.x[:3], np.eye(3))
    gh = make_bank(GaussianPrior(2), QuadratureSpec("gauss-hermite", nodes=8))
    assert not gh.monte_carlo and gh.stderr(np.ones((len(gh.w), 1)))[0] == 0


def test_gauss_hermite_moments():
    bank = make_bank(GaussianPrior(2), QuadratureSpec("gauss-hermite", nodes=10))
    np.testing.assert_allclose(bank.mean(bank.x[:, :, None] * bank.x[:, None, :]), np.eye(2), atol=1e-13)
    np.testing.assert_allclose(bank.mean(bank.z**4), [3, 3], atol=1e-12)


def test_psd_sqrt():
    C = np.array([[2.0, 0.5], [0.5, 1.0]])
    L = psd_sqrt(C)
    np.testing.assert_allclose(L @ L, C, atol=1e-14)
    np.testing.assert_allclose(psd_sqrt(np.diag([1.0, -1e-12])), np.diag([1.0, 0.0]))
    with pytest.raises(NumericalError) as exc:
        psd_sqrt(np.diag([1.0, -1e-3]))
    assert exc.value.eigenvalue == pytest.approx(-1e-3)


def test_control_variate_keeps_mean():
    bank = make_bank(CommunityPrior(4), QuadratureSpec(n_samples=40_000, seed=2))
    vals = np.exp(0.3 * bank.z[:, 0]) + (bank.x * bank.z**2).sum(axis=1)
    exact = np.exp(0.045) + 1.0
    adj = control_variate(vals, bank)
    assert abs(bank.mean(adj) - exact) < 4 * bank.stderr(adj[:, None])[0]
    assert bank.stderr(adj[:, None])[0] < 0.5 * bank.stderr(vals[:, None])[0]


# --- single steps ------------------------------------------------------------

def test_zero_state_gaussian_prior_is_fixed():
    p = GaussianPrior(2)
    st = se_step_xkx(SeState(np.zeros((2, 2)), np.zeros((2, 2))), p, np.eye(2), 0.5, make_bank(p, MC))
    assert np.all(st.Q == 0) and np.all(st.M == 0)


def test_gaussian_r1_closed_form():
    # Q' = (Q/delta) / (1 + Q/delta) for a N(0,1) prior with K = 1
    p = GaussianPrior(1)
    bank = make_bank(p, GH)
    for q in (0.1, 0.5, 0.9):
        st = se_step_xkx(SeState(np.array([[q]]), np.array([[q]])), p, np.eye(1), 0.3, bank)
        expect = (q / 0.3) / (1 + q / 0.3)
        assert st.Q[0, 0] == pytest.approx(expect, abs=1e-12)
        assert st.M[0, 0] == pytest.approx(expect, abs=1e-12)
    st, ok = se_fixed_point(p, np.eye(1), 0.3, GH, init=init_state(p, "informative"))
    assert ok and st.Q[0, 0] == pytest.approx(0.7, abs=1e-9)


def test_symmetric_form_and_scalar_reduction():
    r, b, delta = 2, 0.5, 0.2
    p = CommunityPrior(r)
    bank = make_bank(p, MC)
    st = se_step_xkx(SeState(sym(b, r), sym(b, r)), p, np.eye(r), delta, bank)
    # projection onto {J, I} loses at most MC error
    for mat, err in ((st.Q, st.stderr["Q"]), (st.M, st.stderr["M"])):
        b_new = sym_b(mat, r)
        assert np.max(np.abs(mat - sym(b_new, r))) <= 3 * err.max()
    b_new = sym_b(st.M, r)
    val, err = m_r(r, b / delta, make_scalar_bank(r, 100_000, seed=1))
    # stderr of b' from the (0,0) - (0,1) entries of M
    se_b = r * np.hypot(st.stderr["M"][0, 0], st.stderr["M"][0, 1])
    assert abs(b_new - val) <= 3 * np.hypot(se_b, err)


def test_linear_response():
    r, delta, b = 2, 0.3, 1e-4
    p = CommunityPrior(r)
    st = se_step_xkx(SeState(sym(b, r), sym(b, r)), p, np.eye(r), delta, make_bank(p, MC))
    assert sym_b(st.M, r) / b == pytest.approx(1 / (delta * r**2), rel=0.02)


def test_not_psd_raises():
    p = GaussianPrior(2)
    with pytest.raises(NumericalError):
        se_step_xkx(SeState(-np.eye(2), np.zeros((2, 2))), p, np.eye(2), 0.5, make_bank(p, GH))
    with pytest.raises(ParameterError):
        se_step_xkx(SeState(np.eye(2), np.eye(2)), p, np.eye(2), 0.0, make_bank(p, GH))


def test_determinism():
    p = CommunityPrior(3)
    runs = [se_fixed_point(p, np.eye(3), 0.08, QuadratureSpec(n_samples=3000, seed=9), t_max=30)[0]
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0].Q, runs[1].Q)
    np.testing.assert_array_equal(runs[0].M, runs[1].M)


def test_nishimori_locked():
    p = CommunityPrior(3)
    st = init_state(p, "informative", nishimori=True)
    st = se_step_xkx(st, p, np.eye(3), 0.1, make_bank(p, QuadratureSpec(n_samples=3000)))
    np.testing.assert_array_equal(st.Q, st.M)
    assert st.nishimori


def test_nishimori_preserved_unlocked():
    p = CommunityPrior(3)
    bank = make_bank(p, MC)
    st = SeState(sym(0.7, 3), sym(0.7, 3))
    for _ in range(10):
        st = se_step_xkx(st, p, np.eye(3), 0.08, bank)
        assert np.max(np.abs(st.Q - st.M)) <= 3 * st.stderr["Q-M"].max()


# --- fixed points --------------------------------------------------------------

def test_above_threshold_goes_uniform():
    p = CommunityPrior(2)
    st, ok = se_fixed_point(p, np.eye(2), 0.5, MC, init=SeState(sym(0.3, 2), sym(0.3, 2)))
    assert ok and abs(sym_b(st.M, 2)) < 1e-6
    assert se_mse(st, p) == pytest.approx(0.5, abs=1e-6)


def test_below_threshold_matches_scalar_iteration():
    r, delta = 2, 0.15
    p = CommunityPrior(r)
    st, ok = se_fixed_point(p, np.eye(r), delta, MC)
    far = iterate_b(r, delta, 1e-3, make_scalar_bank(r, 100_000))
    assert ok
    b = sym_b(st.M, r)
    assert b == pytest.approx(far.b, abs=0.01)
    assert se_mse(st, p) == pytest.approx((1 - 1 / r) * (1 - b), abs=0.005)
    assert se_mse(st, p) == pytest.approx(far.mse, abs=0.01)


def test_informative_branch_r10():
    r, delta = 10, 0.0125   # below the spinodal, above 1/r^2
    p = CommunityPrior(r)
    st, ok = se_fixed_point(p, np.eye(r), delta, QuadratureSpec(n_samples=50_000),
                            init=init_state(p, "informative"))
    far = iterate_b(r, delta, 1.0, make_scalar_bank(r, 50_000))
    assert ok
    assert se_mse(st, p) < 0.6
    assert se_mse(st, p) == pytest.approx(far.mse, abs=0.03)
    blind, _ = se_fixed_point(p, np.eye(r), delta, QuadratureSpec(n_samples=50_000))
    assert se_mse(blind, p) == pytest.approx(0.9, abs=0.01)


# --- free energy -------------------------------------------------------------

def test_free_energy_gaussian_r1_closed_form():
    # N(0,1) prior: E log Z = q/(2 delta) - log(1 + q/delta)/2 along Q = M = q
    p = GaussianPrior(1)
    bank = make_bank(p, GH)
    q, delta = 0.4, 0.3
    phi = se_free_energy_xkx(SeState(np.array([[q]]), np.array([[q]])), p, np.eye(1), delta, bank)
    s = q / delta
    expect = 0.5 * s - 0.5 * np.log1p(s) - q * q / (2 * delta) + q * q / (4 * delta)
    assert phi.value == pytest.approx(expect, abs=1e-12) and phi.stderr == 0


def test_free_energy_stationary_at_fixed_point():
    p = GaussianPrior(1)
    bank = make_bank(p, GH)
    st, _ = se_fixed_point(p, np.eye(1), 0.3, GH, init=init_state(p, "informative"), tol=1e-14)
    h = 1e-4
    for dq, dm in ((1, 0), (0, 1), (1, 1)):
        up = SeState(st.Q + h * dq, st.M + h * dm)
        dn = SeState(st.Q - h * dq, st.M - h * dm)
        deriv = (se_free_energy_xkx(up, p, np.eye(1), 0.3, bank).value
                 - se_free_energy_xkx(dn, p, np.eye(1), 0.3, bank).value) / (2 * h)
        assert abs(deriv) < 1e-8


def _directional(st, p, delta, bank, E, h):
    up = se_free_energy_xkx(SeState(st.Q + h * E, st.M + h * E), p, np.eye(p.rank), delta, bank)
    dn = se_free_energy_xkx(SeState(st.Q - h * E, st.M - h * E), p, np.eye(p.rank), delta, bank)
    return (up.value - dn.value) / (2 * h)


def test_free_energy_stationary_community_tensor_rule():
    r, delta = 3, 0.08
    p = CommunityPrior(r)
    bank = make_bank(p, QuadratureSpec("gauss-hermite", nodes=20))
    st, ok = se_fixed_point(p, np.eye(r), delta, bank=bank, init=init_state(p, "informative"), tol=1e-13)
    E = sym(1.0, r) - sym(0.0, r)
    assert ok
    assert abs(_directional(st, p, delta, bank, E, 1e-4)) < 1e-7
    # away from the fixed point the same derivative is O(1e-2)
    assert abs(_directional(SeState(sym(0.5, r), sym(0.5, r)), p, delta, bank, E, 1e-4)) > 1e-2


def test_free_energy_stationary_monte_carlo():
    # the bank's fixed point carries MC error too, so compare against the spread over banks
    r, delta = 3, 0.08
    p = CommunityPrior(r)
    E = sym(1.0, r) - sym(0.0, r)
    derivs = []
    for seed in range(5):
        bank = make_bank(p, QuadratureSpec(n_samples=50_000, seed=seed))
        st, ok = se_fixed_point(p, np.eye(r), delta, bank=bank, init=init_state(p, "informative"))
        assert ok
        derivs.append(_directional(st, p, delta, bank, E, 1e-3))
    derivs = np.array(derivs)
    assert abs(derivs.mean()) <= 3 * derivs.std(ddof=1) / np.sqrt(len(derivs))


def _branch_phis(r, delta, n_samples=200_000):
    p = CommunityPrior(r)
    bank = make_bank(p, QuadratureSpec(n_samples=n_samples))
    far = iterate_b(r, delta, 1.0, make_scalar_bank(r))
    f_far = se_free_energy_xkx(SeState(sym(far.b, r), sym(far.b, r)), p, np.eye(r), delta, bank)
    f_u = se_free_energy_xkx(SeState(sym(0, r), sym(0, r)), p, np.eye(r), delta, bank)
    diff = f_far.value - f_u.value
    err = bank.stderr((f_far.samples - f_u.samples)[:, None])[0]
    return far.b, diff, err


@pytest.mark.slow
def test_free_energy_ordering_r10():
    # hard phase: the informative branch wins; between static and spinodal it loses
    b, diff, err = _branch_phis(10, 0.0122)
    assert b > 0.3 and diff > 3 * err
    b, diff, err = _branch_phis(10, 0.0129)
    assert b > 0.3 and diff < -3 * err


def test_free_energy_uniform_point_community():
    # b = 0: E log Z = 1/(2 r^2 delta), Tr(M M)/(2 delta) = 1/(2 r^2 delta), so phi = 1/(4 r^2 delta)
    r, delta = 4, 0.2
    p = CommunityPrior(r)
    bank = make_bank(p, QuadratureSpec(n_samples=2000))
    f = se_free_energy_xkx(SeState(sym(0, r), sym(0, r)), p, np.eye(r), delta, bank)
    assert f.value == pytest.approx(1 / (4 * r**2 * delta), abs=1e-12)
    assert f.stderr < 1e-10


def test_equal_area_identity_r3():
    # second-order regime; the identity holds for any pair (b1, b2)
    r, delta = 3, 0.09
    p = CommunityPrior(r)
    bank = make_bank(p, QuadratureSpec(n_samples=200_000))
    sb = make_scalar_bank(r, 200_000)
    b1, b2 = 0.1, 0.5
    f1 = se_free_energy_xkx(SeState(sym(b1, r), sym(b1, r)), p, np.eye(r), delta, bank)
    f2 = se_free_energy_xkx(SeState(sym(b2, r), sym(b2, r)), p, np.eye(r), delta, bank)
    integral, ierr = equal_area_integral(r, delta, b1, b2, sb)
    err = np.hypot(bank.stderr((f2.samples - f1.samples)[:, None])[0], ierr)
    assert abs((f2.value - f1.value) - integral) <= 3 * err


# --- UV ------------------------------------------------------------------------

def test_uv_zero_stays_zero():
    g = GaussianPrior(1)
    z = np.zeros((1, 1))
    st = se_step_uv(SeStateUV(z, z, z, z), g, g, 0.5, 0.2, make_bank(g, GH, "u"), make_bank(g, GH, "v"))
    assert st.Q_u[0, 0] == 0 and st.M_v[0, 0] == 0


def test_uv_symmetry_alpha_one():
    g = GaussianPrior(2)
    bu, bv = make_bank(g, QuadratureSpec("gauss-hermite", nodes=12), "u"), make_bank(g, QuadratureSpec("gauss-hermite", nodes=12), "v")
    st = init_state_uv(g, g, eps=0.05)
    for _ in range(5):
        st = se_step_uv(st, g, g, 1.0, 0.4, bu, bv)
        np.testing.assert_allclose(st.Q_u, st.Q_v, atol=1e-13)


def test_uv_gaussian_closed_form():
    # N(0,1) both sides: q_u = a q_v/(d + a q_v), q_v = q_u/(d + q_u)
    g = GaussianPrior(1)
    st, ok = se_fixed_point_uv(g, g, 0.5, 0.1, GH)
    assert ok
    qu, qv = st.Q_u[0, 0], st.Q_v[0, 0]
    assert qu == pytest.approx(0.5 * qv / (0.1 + 0.5 * qv), abs=1e-9)
    assert qv == pytest.approx(qu / (0.1 + qu), abs=1e-9)
    assert qu == pytest.approx(0.816667, abs=1e-5) and qv == pytest.approx(0.890909, abs=1e-5)
    np.testing.assert_allclose(st.M_u, st.Q_u, atol=1e-9)


def test_uv_free_energy_stationary():
    g = GaussianPrior(1)
    bu, bv = make_bank(g, GH, "se-u"), make_bank(g, GH, "se-v")
    st, _ = se_fixed_point_uv(g, g, 0.5, 0.1, GH, tol=1e-14)
    h = 1e-4

    def phi(e):
        s = SeStateUV(st.Q_u + e, st.M_u + e, st.Q_v - e, st.M_v + 2 * e)
        return se_free_energy_uv(s, g, g, 0.5, 0.1, bu, bv).value

    # central difference leaves an O(h^2) remainder
    assert abs((phi(h) - phi(-h)) / (2 * h)) < 1e-6
    assert abs((phi(10 * h) - phi(-10 * h)) / (20 * h)) > 1e-6


def test_uv_bad_alpha():
    g = GaussianPrior(1)
    st = init_state_uv(g, g)
    with pytest.raises(ParameterError):
        se_step_uv(st, g, g, 0.0, 0.1, make_bank(g, GH), make_bank(g, GH))
