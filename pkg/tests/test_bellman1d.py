import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm

from shortfall_ld import bellman1d as bg
from shortfall_ld.dual import kelly_policy
from shortfall_ld.gaussian import policy_rate_F, rate_derivative, rate_F, tilt_affine
from shortfall_ld.model import replace_coefficients


def _radius(sol):
    return float(abs(sol.mstar[0]) + 6 * np.sqrt(sol.Sigma[0, 0]))


@pytest.fixture(scope="module")
def affine_pair(s1, s1_affine):
    lam = 1.0
    ref = rate_F(lam, s1)
    return ref, bg.solve_ergodic_hjb(lam, s1_affine, R=_radius(ref), N=2001)


def test_grid_matches_closed_form(s1, s1_affine, affine_pair):
    ref, sol = affine_pair
    assert abs(sol.Lambda - ref.F) <= 1e-8
    inner = np.abs(sol.xs) <= sol.R / 2
    fp_exact = ref.P[0, 0] * sol.xs + ref.p2[0]
    assert np.max(np.abs(sol.fprime - fp_exact)[inner]) <= 1e-5
    dens = norm.pdf(sol.xs, ref.mstar[0], np.sqrt(ref.Sigma[0, 0]))
    assert np.max(np.abs(sol.m - dens)) <= 1e-3 * dens.max()
    assert bg.rate_derivative_grid(sol, s1_affine) == pytest.approx(rate_derivative(ref, s1), rel=1e-6)
    assert sol.residual_inf <= 1e-9


def test_density_routes_agree(affine_pair):
    _, sol = affine_pair
    adj = bg.adjoint_density(sol.xs, sol.drift, sol.diffusion)
    assert np.max(np.abs(adj - sol.m)) <= 1e-4 * sol.m.max()
    assert trapezoid(sol.m, sol.xs) == pytest.approx(1.0, abs=1e-12)
    assert np.all(sol.m > 0)


def test_density_is_stationary_for_discrete_generator(affine_pair):
    _, sol = affine_pair
    L = bg._generator(sol.xs, sol.drift, sol.diffusion)
    pi = bg.adjoint_density(sol.xs, sol.drift, sol.diffusion)
    wts = np.full(sol.xs.size, sol.h)
    wts[[0, -1]] = sol.h / 2
    # E_pi[L phi] = 0 for smooth test functions
    for phi in (sol.xs, sol.xs**2, np.sin(3 * sol.xs)):
        assert abs(np.sum(pi * wts * (L @ phi))) <= 1e-10


def test_lambda_zero_is_trivial(s1_affine):
    sol = bg.solve_ergodic_hjb(0.0, s1_affine, N=401)
    assert abs(sol.Lambda) <= 1e-13
    assert np.max(np.abs(sol.f)) <= 1e-12


def test_policy_iteration_values_monotone(saturating):
    sol = bg.solve_ergodic_hjb(2.0, saturating, N=1001)
    hist = np.array(sol.Lambda_history)
    assert hist.size >= 2
    assert np.all(np.diff(hist) >= -1e-12)
    assert sol.iterations == hist.size


def test_midpoint_residual_second_order(saturating):
    R = bg.default_radius(1.85, saturating)
    res = [bg.midpoint_residual(bg.solve_ergodic_hjb(1.85, saturating, R=R, N=N), saturating)
           for N in (501, 1001, 2001)]
    assert res[0] / res[1] > 3.0
    assert res[1] / res[2] > 3.0


def test_mirror_symmetry(saturating):
    # x -> -x flips odd coefficients and the sign of sigma
    p = saturating.parametric
    flip = np.array([1.0, -1.0, 1.0, -1.0])
    th = p.theta.copy()
    th[0] = -th[0]
    mir = replace_coefficients(
        saturating, a=p.a * flip, r=p.r * flip, alpha=p.alpha * flip, theta=th,
        sigma=-saturating.sigma,
    )
    a = bg.solve_ergodic_hjb(1.5, saturating, R=0.8, N=1201)
    b = bg.solve_ergodic_hjb(1.5, mir, R=0.8, N=1201)
    assert a.Lambda == pytest.approx(b.Lambda, abs=1e-11)
    assert np.allclose(a.fprime, -b.fprime[::-1], atol=1e-8)
    assert np.allclose(a.m, b.m[::-1], rtol=1e-7)


def test_fixed_policy_equation(s1, s1_affine):
    ref = rate_F(1.0, s1)
    R = _radius(ref)
    pol = lambda x: x @ ref.K.T + ref.k0
    sol = bg.solve_policy_hjb(1.0, s1_affine, pol, R=R, N=2001)
    assert sol.Lambda == pytest.approx(ref.F, abs=1e-8)
    kel = kelly_policy(s1)
    want = policy_rate_F(0.5, s1, kel.K, kel.k0)
    got = bg.solve_policy_hjb(0.5, s1_affine, kel, R=12 * 0.1, N=2001)
    assert got.Lambda == pytest.approx(want.F, abs=1e-7)
    assert not got.optimal
    with pytest.raises(ValueError):
        bg.midpoint_residual(got, s1_affine)


def test_tilt_table_matches_affine(s1, s1_affine, affine_pair):
    ref, sol = affine_pair
    E, e = tilt_affine(ref, s1)
    inner = np.abs(sol.xs) <= sol.R / 2
    want = sol.xs[:, None] * E[:, 0][None, :] + e[None, :]
    assert np.max(np.abs(bg.tilt_table(sol, s1_affine) - want)[inner]) <= 1e-5


def test_boundary_sensitivity_small(s1_affine):
    lo, hi = bg.boundary_sensitivity(1.0, s1_affine, R=0.6, N=801)
    assert lo == pytest.approx(hi, abs=1e-9)


def test_errors(s1, s1_affine):
    with pytest.raises(ValueError):
        bg.make_grid(1.0, 100)
    with pytest.raises(ValueError):
        bg.solve_ergodic_hjb(1.0, __import__("factories").random_linear(np.random.default_rng(0), 2, 1))
    # the tilted drift does not point inward on a tiny grid away from its centre
    shifted = replace_coefficients(s1_affine, theta=[0.05, -0.5, 0.0, 0.0])
    with pytest.raises(bg.GridSolveError):
        bg.solve_ergodic_hjb(1.0, shifted, R=0.01, N=101)
    grid = bg.make_grid(2.0, 5)
    assert grid[2] == 0.0 and grid[0] == -2.0
    with pytest.raises(bg.GridSolveError):
        bg.solve_ergodic_hjb(1.0, s1_affine, N=101, max_iter=1)


def test_adjoint_residual_compact_test_functions(affine_pair):
    _, sol = affine_pair
    x, m, mu, s = sol.xs, sol.m, sol.drift, sol.diffusion
    worst = 0.0
    for c in np.linspace(-0.5 * sol.R, 0.5 * sol.R, 20):
        w = 0.2 * sol.R
        z = (x - c) / w
        inside = np.abs(z) < 1
        g = np.zeros_like(x)
        g[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
        # derivatives of the bump exp(-1/(1 - z^2))
        q = np.zeros_like(x)
        q[inside] = 1.0 - z[inside] ** 2
        d1 = np.zeros_like(x)
        d2 = np.zeros_like(x)
        zi, qi, gi = z[inside], q[inside], g[inside]
        d1[inside] = gi * (-2 * zi / qi**2) / w
        d2[inside] = gi * ((2 * zi / qi**2) ** 2 - (2 * qi**2 + 8 * zi**2 * qi) / qi**4) / w**2
        worst = max(worst, abs(trapezoid((mu * d1 + 0.5 * s * d2) * m, x)))
    assert worst <= 1e-6


def test_grid_rate_convex_and_derivative(s1, s1_affine):
    R = 1.2
    lams = np.linspace(0.0, 4.0, 20)
    F = np.array([bg.rate_F_grid(lam, s1_affine, R=R, N=801) for lam in lams])
    assert np.all(F[2:] - 2 * F[1:-1] + F[:-2] >= -1e-8)
    lam, h = 1.0, 1e-3
    fd = (bg.rate_F_grid(lam + h, s1_affine, R=R, N=801) - bg.rate_F_grid(lam - h, s1_affine, R=R, N=801)) / (2 * h)
    d = bg.rate_derivative_grid(bg.solve_ergodic_hjb(lam, s1_affine, R=R, N=801), s1_affine)
    assert d == pytest.approx(fd, abs=1e-3)
    d0 = bg.rate_derivative_grid(bg.solve_ergodic_hjb(0.0, s1_affine, R=R, N=801), s1_affine)
    assert d0 == pytest.approx(rate_derivative(rate_F(0.0, s1), s1), abs=1e-3)
