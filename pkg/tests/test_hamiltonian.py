import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from factories import random_linear
from shortfall_ld.hamiltonian import (
    breve_H,
    control_objective,
    drift_M,
    hamiltonian_coefficients,
    hamiltonian_hat,
    hamiltonian_nested,
    kappa,
    optimal_u,
    t_lambda,
    vol_N,
)
from shortfall_ld.model import eval_coefficients

lams = st.floats(0.0, 20.0)


def test_kappa():
    assert kappa(0.0) == 0.0
    assert kappa(1.0) == 0.5
    assert kappa(np.inf) == 1.0
    with pytest.raises(ValueError):
        kappa(-0.1)


def test_s1_point_values(s1):
    fr = eval_coefficients(s1, np.array([0.0]))
    u = np.array([1.0])
    # M = 0.04 - 0.02 + 0.03 - 0.04 + 0.0125, N = (0.15, 0, -0.15)
    assert drift_M(u, fr) == pytest.approx(0.0225)
    assert np.allclose(vol_N(u, fr), [0.15, 0.0, -0.15])
    # Kelly weight c^-1 (a - r) at lam = 0 and zero gradient
    assert optimal_u(0.0, np.zeros(1), fr) == pytest.approx([1.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), lams, st.integers(1, 3), st.integers(1, 3))
def test_optimised_hamiltonian_is_minimum_over_portfolios(seed, lam, l, n):
    rng = np.random.default_rng(seed)
    s = random_linear(rng, l, n)
    x = rng.normal(size=l)
    p = rng.normal(size=l)
    fr = eval_coefficients(s, x)
    hat = float(hamiltonian_hat(lam, p, fr))
    u_star = optimal_u(lam, p, fr)
    assert float(hamiltonian_nested(lam, p, u_star, fr)) == pytest.approx(hat, rel=1e-9, abs=1e-12)
    if lam > 1e-6:
        res = minimize(lambda u: float(hamiltonian_nested(lam, p, u, fr)), np.zeros(n),
                       method="BFGS", options={"gtol": 1e-12})
        assert res.fun == pytest.approx(hat, rel=1e-7, abs=1e-9)
    for _ in range(5):
        u = u_star + rng.normal(size=n)
        assert float(hamiltonian_nested(lam, p, u, fr)) >= hat - 1e-12 * (1 + abs(hat))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), lams)
def test_batched_matches_pointwise(seed, lam):
    rng = np.random.default_rng(seed)
    s = random_linear(rng, 2, 2)
    xs = rng.normal(size=(5, 2))
    ps = rng.normal(size=(5, 2))
    batch = hamiltonian_hat(lam, ps, eval_coefficients(s, xs))
    for i in range(5):
        assert batch[i] == pytest.approx(float(hamiltonian_hat(lam, ps[i], eval_coefficients(s, xs[i]))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), lams)
def test_breve_H_equals_nested_plus_diffusion(seed, lam):
    rng = np.random.default_rng(seed)
    s = random_linear(rng, 2, 1)
    x, grad, v = rng.normal(size=2), rng.normal(size=2), rng.normal(size=1)
    hess = rng.normal(size=(2, 2))
    hess = hess + hess.T
    fr = eval_coefficients(s, x)
    want = hamiltonian_nested(lam, grad, v, fr) + 0.5 * np.trace(s.ss @ hess)
    assert float(breve_H(fr, lam, grad, hess, v)) == pytest.approx(float(want), rel=1e-12, abs=1e-13)


def test_lambda_zero_reduces_to_factor_generator(s1):
    fr = eval_coefficients(s1, np.array([0.3]))
    T, g1, g0 = hamiltonian_coefficients(0.0, fr)
    assert np.allclose(T, s1.ss)
    assert np.allclose(g1, fr.theta)
    assert g0 == 0.0


def test_t_lambda_decreases_to_limit(s1):
    fr = eval_coefficients(s1, np.array([0.0]))
    vals = [t_lambda(lam, fr)[0, 0] for lam in (0.0, 1.0, 10.0, np.inf)]
    assert vals == sorted(vals, reverse=True)
    # sigma sigma^T - (sigma b^T)^2 / c = 0.01 - 0.012^2 / 0.04
    assert vals[-1] == pytest.approx(0.01 - 0.012**2 / 0.04)


def test_infinite_lambda_policy_hedges_benchmark(s1):
    fr = eval_coefficients(s1, np.array([0.5]))
    u = optimal_u(np.inf, np.zeros(1), fr)
    # c^-1 b beta = 0.01 / 0.04
    assert u == pytest.approx([0.25])
    obj = control_objective(2.0, np.zeros(1), u, fr)
    assert np.isfinite(obj)


def test_s1_hand_values(s1):
    fr = eval_coefficients(s1, np.array([0.0]))
    assert float(drift_M(np.zeros(1), fr)) == pytest.approx(0.0025)
    # p = 0, lam = 1: -(1/4) |a - r + b beta|^2_{c^-1} - (r - alpha + |beta|^2/2) + |beta|^2/2
    v = 0.04 + 0.2 * 0.05
    want = -0.25 * v * v / 0.04 - (0.03 - 0.04 + 0.0125) + 0.0125
    assert float(hamiltonian_hat(1.0, np.zeros(1), fr)) == pytest.approx(want, rel=1e-13)
    # zero portfolio and zero test function
    lam = 2.5
    got = float(breve_H(fr, lam, np.zeros(1), np.zeros((1, 1)), np.zeros(1)))
    assert got == pytest.approx(-lam * (0.03 - 0.04 + 0.0125) + 0.5 * lam**2 * 0.025, rel=1e-13)


@given(lams)
def test_t_lambda_bounded_below_by_projection(lam):
    from conftest import scenario_path
    from shortfall_ld.model import load_scenario

    fr = eval_coefficients(load_scenario(scenario_path("s1")), np.array([0.0]))
    assert np.min(np.linalg.eigvalsh(t_lambda(lam, fr))) >= 0.0064 - 1e-15
