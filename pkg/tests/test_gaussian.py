import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from factories import random_linear, scalar_from_linear
from shortfall_ld.gaussian import (
    Quadratic,
    RiccatiError,
    assemble_ABC,
    bellman_residual,
    care_stabilizing,
    lyapunov_covariance,
    policy_rate_F,
    rate_derivative,
    rate_F,
    riccati_residual,
    stationary_std,
    tilt_affine,
)
from shortfall_ld.hamiltonian import kappa
from shortfall_ld.model import replace_coefficients

# S1 at lam = 1 from an independent symbolic derivation (exact rationals)
S1_LAM1 = {
    "P": -1.7629591041223007299,
    "p2": -0.42138400941163307374,
    "F": -0.011815553096369079407,
    "dF": 0.0075186632482803332099,
}
S1_F = {0.1: -0.0037247987304827777109, 0.5: -0.011566770606290761660, 5.0: 0.21564980405470566322}


def quadratic_root(A, B, C, lam):
    """Nonpositive root of B P^2 + 2 A P - kappa C = 0 with A + B P < 0."""
    return (-A - np.sqrt(A * A + B * kappa(lam) * C)) / B


def test_s1_frozen_values(s1):
    sol = rate_F(1.0, s1)
    assert sol.P[0, 0] == pytest.approx(S1_LAM1["P"], rel=1e-13)
    assert sol.p2[0] == pytest.approx(S1_LAM1["p2"], rel=1e-12)
    assert sol.F == pytest.approx(S1_LAM1["F"], rel=1e-11)
    assert rate_derivative(sol, s1) == pytest.approx(S1_LAM1["dF"], rel=1e-10)
    for lam, F in S1_F.items():
        assert rate_F(lam, s1).F == pytest.approx(F, rel=1e-11)


def test_s1_abc(s1):
    A, B, C = assemble_ABC(1.0, s1)
    # Theta1 - kappa sigma b^T c^-1 G, sigma sigma^T - kappa (sigma b^T)^2 / c, G^2 / c
    assert A[0, 0] == pytest.approx(-0.5 - 0.5 * 0.012 * 25 * 0.4)
    assert B[0, 0] == pytest.approx(0.01 - 0.5 * 0.012**2 / 0.04)
    assert C[0, 0] == pytest.approx(4.0)


@pytest.mark.parametrize("lam", [0.0, 0.1, 0.5, 1.0, 5.0, 50.0])
def test_scalar_quadratic_formula(s1, lam):
    A, B, C = scalar_from_linear(s1, lam)
    sol = rate_F(lam, s1)
    assert sol.P[0, 0] == pytest.approx(quadratic_root(A, B, C, lam), rel=1e-12, abs=1e-14)


def test_lambda_zero(s1):
    sol = rate_F(0.0, s1)
    assert abs(sol.F) <= 1e-14
    assert np.allclose(sol.P, 0.0) and np.allclose(sol.p2, 0.0)
    # Kelly drift: Theta1 x untilted, Sigma = ss / (2 * 0.5)
    assert sol.Sigma[0, 0] == pytest.approx(0.01)
    assert sol.K[0, 0] == pytest.approx(10.0)
    assert sol.k0[0] == pytest.approx(1.0)


def _l_from(data):
    return data.draw(st.integers(1, 4)), data.draw(st.integers(1, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.data())
def test_random_scenarios_riccati(seed, data):
    l, n = _l_from(data)
    s = random_linear(np.random.default_rng(seed), l, n)
    for lam in (0.1, 1.0, 5.0):
        sol = rate_F(lam, s)
        assert sol.residual <= 1e-9 * (1 + np.linalg.norm(sol.P))
        assert np.max(np.linalg.eigvalsh(sol.P)) <= 1e-12
        assert sol.D_max_re < 0
        res = bellman_residual(sol, s, np.random.default_rng(seed).normal(size=(20, l)))
        assert np.max(np.abs(res)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.floats(0.01, 20.0))
def test_care_matches_scipy(seed, l, lam):
    s = random_linear(np.random.default_rng(seed), l, 2)
    A, B, C = assemble_ABC(lam, s)
    # B is positive semidefinite: factor it for the standard CARE form
    w, V = np.linalg.eigh(B)
    Bf = V * np.sqrt(np.clip(w, 0, None))
    X = sla.solve_continuous_are(A, Bf, kappa(lam) * C, np.eye(l))
    ours = care_stabilizing(A, B, kappa(lam) * C)
    assert np.allclose(ours, X, rtol=1e-8, atol=1e-10 * (1 + np.abs(X).max()))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_lyapunov_matches_scipy(seed, l):
    s = random_linear(np.random.default_rng(seed), l, 1)
    D = s.linear.Theta1
    want = sla.solve_continuous_lyapunov(D, -s.ss)
    got = lyapunov_covariance(D, s.ss)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-14)
    assert np.allclose(got, got.T)


def test_lyapunov_refuses_unstable(unstable):
    with pytest.raises(np.linalg.LinAlgError):
        lyapunov_covariance(unstable.linear.Theta1, unstable.ss)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 10.0))
def test_derivative_matches_finite_difference(seed, lam):
    s = random_linear(np.random.default_rng(seed), 2, 2)
    h = 1e-5 * (1 + lam)
    fd = (rate_F(lam + h, s).F - rate_F(lam - h, s).F) / (2 * h)
    dF = rate_derivative(rate_F(lam, s), s)
    assert dF == pytest.approx(fd, rel=1e-6, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 5.0))
def test_fixed_policy_rate(seed, lam):
    s = random_linear(np.random.default_rng(seed), 2, 2)
    opt = rate_F(lam, s)
    # the optimal feedback attains F; any other feedback does no better
    same = policy_rate_F(lam, s, opt.K, opt.k0)
    assert same.F == pytest.approx(opt.F, rel=1e-9, abs=1e-12)
    assert np.allclose(same.mstar, opt.mstar, atol=1e-8)
    assert np.allclose(same.Sigma, opt.Sigma, rtol=1e-8)
    rng = np.random.default_rng(seed + 1)
    try:
        other = policy_rate_F(lam, s, opt.K + 0.1 * rng.normal(size=opt.K.shape), opt.k0 + 0.1)
    except np.linalg.LinAlgError:
        return
    assert other.F >= opt.F - 1e-12


def test_kelly_fixed_policy_domain(s1):
    K, k0 = s1.c_inv @ s1.linear.G, s1.c_inv @ s1.linear.g0
    assert policy_rate_F(0.0, s1, K, k0).F == pytest.approx(0.0, abs=1e-15)
    # Kelly's rate is finite only below lam = 7.5444... (independent symbolic value)
    assert np.isfinite(policy_rate_F(7.54, s1, K, k0).F)
    with pytest.raises(np.linalg.LinAlgError):
        policy_rate_F(7.55, s1, K, k0)


def test_quadratic_helpers():
    rng = np.random.default_rng(3)
    Q = rng.normal(size=(3, 3))
    g = Quadratic(0.5 * (Q + Q.T), rng.normal(size=3), 0.7)
    mean, L = rng.normal(size=3), rng.normal(size=(3, 3))
    cov = L @ L.T
    X = rng.multivariate_normal(mean, cov, size=400_000)
    mc = g(X)
    assert g.expect(mean, cov) == pytest.approx(mc.mean(), abs=5 * mc.std() / np.sqrt(mc.size))
    E1, e1, E2, e2 = rng.normal(size=(2, 3)), rng.normal(size=2), rng.normal(size=(2, 3)), rng.normal(size=2)
    W = rng.normal(size=(2, 2))
    bl = Quadratic.bilinear(E1, e1, E2, e2, W)
    x = rng.normal(size=3)
    assert bl(x) == pytest.approx((E1 @ x + e1) @ W @ (E2 @ x + e2))
    assert (g - g)(x) == pytest.approx(0.0)


def test_tilt_and_moments_consistent(s1):
    sol = rate_F(1.8518, s1)
    E, e = tilt_affine(sol, s1)
    # tilted drift Theta1 x + sigma d(x) has slope D and zero at mstar
    slope = s1.linear.Theta1 + s1.sigma @ E
    assert np.allclose(slope, sol.D)
    assert (slope @ sol.mstar + s1.linear.theta2 + s1.sigma @ e) == pytest.approx(0.0, abs=1e-14)
    assert stationary_std(sol)[0] == pytest.approx(np.sqrt(sol.Sigma[0, 0]))


def test_riccati_residual_definition(s1):
    A, B, C = assemble_ABC(2.0, s1)
    sol = rate_F(2.0, s1)
    assert riccati_residual(A, B, C, sol.P, 2.0) == pytest.approx(sol.residual)
    assert riccati_residual(A, B, C, sol.P + 0.01, 2.0) > 1e-4


def test_negative_lambda_rejected(s1):
    with pytest.raises(ValueError):
        rate_F(-1.0, s1)


def test_requires_linear_form(saturating):
    with pytest.raises((ValueError, TypeError)):
        rate_F(1.0, saturating)


def test_s1_p2_by_scalar_division(s1):
    sol = rate_F(1.0, s1)
    lam, k = 1.0, 0.5
    v0 = 0.04 + lam * 0.2 * 0.05
    rhs = k * (0.4 + 0.012 * sol.P[0, 0]) * v0 / 0.04 - lam * sol.P[0, 0] * (0.06 * 0.05)
    assert sol.p2[0] == pytest.approx(rhs / sol.D[0, 0], rel=1e-13)


def test_care_identity_weights():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(2, 2))
    A -= (np.max(np.linalg.eigvals(A).real) + 0.3) * np.eye(2)
    X = care_stabilizing(A, np.eye(2), np.eye(2))
    assert np.linalg.norm(A.T @ X + X @ A - X @ X + np.eye(2)) <= 1e-9
    assert np.max(np.linalg.eigvals(A - X).real) < 0


def test_rate_grows_superlinearly(s1):
    s = replace_coefficients(s1, beta=2 * s1.beta)
    ratios = [rate_F(lam, s).F / lam**2 for lam in (10.0, 20.0, 40.0)]
    assert min(ratios) > 0.1 * 0.5 * 4 * s1.beta_sq
    assert ratios == sorted(ratios)


def test_derivative_strictly_increasing(s1):
    dF = [rate_derivative(rate_F(lam, s1), s1) for lam in np.linspace(0, 6, 30)]
    assert np.all(np.diff(dF) > 0)


def test_s1_derivative_spec_step(s1):
    h = 1e-4
    fd = (rate_F(1 + h, s1).F - rate_F(1 - h, s1).F) / (2 * h)
    assert rate_derivative(rate_F(1.0, s1), s1) == pytest.approx(fd, rel=1e-6)


def test_derivative_at_zero_is_kelly_growth(s1):
    # Kelly under the untilted OU law: E[(0.4 X + 0.04)^2] / (2 c) + r - alpha + |beta|^2 / 2
    growth = (0.16 * 0.01 + 0.04**2) / 0.08 + 0.0025
    assert rate_derivative(rate_F(0.0, s1), s1) == pytest.approx(-growth, rel=1e-13)
