"""Slower statistical invariants of the importance-sampling estimator on S1."""

import numpy as np
import pytest

from shortfall_ld import dual, simulate as sim

Q = -0.03


@pytest.fixture(scope="module")
def optimal(s1):
    sol = dual.solve_shortfall(s1, Q)
    return dual.build_policy(sol), sim.Tilt.from_riccati(sol.artifacts, s1)


@pytest.mark.slow
def test_step_size_convergence(s1, optimal):
    pol, tilt = optimal
    est = []
    for dt, seed in ((0.01, 101), (0.005, 102)):
        sample = sim.simulate_legs(s1, [sim.Leg(pol, tilt)], [50.0], dt, 20_000, seed=seed)
        est.append(sim.estimates_from_sample(sample, Q)[0])
    a, b = est
    assert abs(a.p_hat - b.p_hat) <= 2 * np.hypot(a.stderr, b.stderr)


@pytest.mark.slow
def test_tilt_reduces_relative_error(s1, optimal):
    pol, tilt = optimal
    sample = sim.simulate_legs(s1, [sim.Leg(pol, tilt), sim.Leg(pol, None)], [50.0], 0.01, 20_000, seed=103)
    tilted, physical = (sim.estimates_from_sample(sample, Q, g)[0] for g in (0, 1))
    assert tilted.rel_err < physical.rel_err
    assert abs(tilted.p_hat - physical.p_hat) <= 3 * np.hypot(tilted.stderr, physical.stderr)
