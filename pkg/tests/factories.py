"""Random scenarios for property tests."""

import numpy as np

from shortfall_ld.model import scenario_from_dict


def random_linear(rng: np.random.Generator, l: int, n: int, k: int | None = None, margin: float = 0.2):
    """Linear scenario with ``k = n + l + 1`` noises and a Hurwitz factor drift."""
    k = n + l + 1 if k is None else k
    T = rng.normal(scale=0.5, size=(l, l))
    T -= (np.max(np.linalg.eigvals(T).real) + margin) * np.eye(l)
    d = {
        "kind": "linear_gaussian",
        "dims": {"n": n, "l": l, "k": k},
        "x0": [0.0] * l,
        "linear": {
            "A1": rng.normal(scale=0.3, size=(n, l)).tolist(),
            "a2": rng.uniform(0.03, 0.1, size=n).tolist(),
            "r1": rng.normal(scale=0.05, size=l).tolist(),
            "r2": float(rng.uniform(0.0, 0.04)),
            "alpha1": rng.normal(scale=0.05, size=l).tolist(),
            "alpha2": float(rng.uniform(0.0, 0.05)),
            "Theta1": T.tolist(),
            "theta2": rng.normal(scale=0.05, size=l).tolist(),
            "b": (rng.normal(scale=0.2, size=(n, k)) + 0.3 * np.eye(n, k)).tolist(),
            "beta": rng.normal(scale=0.1, size=k).tolist(),
            "sigma": rng.normal(scale=0.1, size=(l, k)).tolist(),
        },
    }
    return scenario_from_dict(d)


def scalar_from_linear(s, lam):
    """Scalar Riccati coefficients for the quadratic-formula oracle."""
    from shortfall_ld.gaussian import assemble_ABC

    A, B, C = assemble_ABC(lam, s)
    return float(A[0, 0]), float(B[0, 0]), float(C[0, 0])
