"""Pointwise algebra of the shortfall problem.

All functions accept a :class:`~shortfall_ld.model.CoefficientFrame` that is
either a single point or a batch; vectors ``u`` (length ``n``) and ``p``
(length ``l``) broadcast over the batch axis.  ``lam`` may be ``np.inf`` where
the limit is meaningful.
"""

from __future__ import annotations

import numpy as np

from .model import CoefficientFrame


def kappa(lam: float) -> float:
    """lam / (1 + lam), with the limit 1 at infinity."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return 1.0 if np.isinf(lam) else lam / (1.0 + lam)


def _quad(u: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.einsum("...i,ij,...j->...", u, m, u)


def drift_M(u: np.ndarray, fr: CoefficientFrame) -> np.ndarray:
    """Drift of the log wealth-to-benchmark ratio under portfolio ``u``."""
    u = np.asarray(u, dtype=float)
    return (
        np.sum(u * fr.excess, axis=-1)
        - 0.5 * _quad(u, fr.c)
        + fr.r - fr.alpha + 0.5 * fr.beta @ fr.beta
    )


def vol_N(u: np.ndarray, fr: CoefficientFrame) -> np.ndarray:
    """Volatility vector b^T u - beta of the log ratio."""
    return np.asarray(u, dtype=float) @ fr.b - fr.beta


def optimal_u(lam: float, p: np.ndarray, fr: CoefficientFrame) -> np.ndarray:
    """Maximiser of M - lam |N|^2 / 2 + p^T sigma N over portfolios."""
    p = np.asarray(p, dtype=float)
    if np.isinf(lam):
        v = np.broadcast_to(fr.b @ fr.beta, np.shape(fr.excess))
        return v @ fr.c_inv
    v = fr.excess + lam * (fr.b @ fr.beta) + (p @ fr.sigma) @ fr.b.T
    return (v @ fr.c_inv) / (1.0 + lam)


def t_lambda(lam: float, fr: CoefficientFrame) -> np.ndarray:
    """Quadratic coefficient sigma sigma^T - kappa sigma b^T c^-1 b sigma^T."""
    sb = fr.sigma @ fr.b.T
    return fr.sigma @ fr.sigma.T - kappa(lam) * sb @ fr.c_inv @ sb.T


def hamiltonian_coefficients(lam: float, fr: CoefficientFrame):
    """``(T, g1, g0)`` with ``H_hat(x; lam, p) = p^T T p / 2 + g1 . p + g0``."""
    k = kappa(lam)
    bb = fr.b @ fr.beta
    v0 = fr.excess + lam * bb
    w = v0 @ fr.c_inv                       # c^-1 v0, batched
    g1 = -k * (w @ fr.b) @ fr.sigma.T + lam * (fr.sigma @ fr.beta) + fr.theta
    beta_sq = float(fr.beta @ fr.beta)
    g0 = (
        -0.5 * k * np.sum(w * v0, axis=-1)
        - lam * (fr.r - fr.alpha + 0.5 * beta_sq)
        + 0.5 * lam**2 * beta_sq
    )
    return t_lambda(lam, fr), g1, g0


def hamiltonian_hat(lam: float, p: np.ndarray, fr: CoefficientFrame) -> np.ndarray:
    """Optimised Hamiltonian from its expanded closed form."""
    T, g1, g0 = hamiltonian_coefficients(lam, fr)
    p = np.asarray(p, dtype=float)
    return 0.5 * _quad(p, T) + np.sum(g1 * p, axis=-1) + g0


def control_objective(lam: float, p: np.ndarray, u: np.ndarray, fr: CoefficientFrame) -> np.ndarray:
    """M(u) - lam |N(u)|^2 / 2 + p^T sigma N(u), the quantity maximised over u."""
    N = vol_N(u, fr)
    sp = np.asarray(p, dtype=float) @ fr.sigma
    return drift_M(u, fr) - 0.5 * lam * np.sum(N * N, axis=-1) + np.sum(sp * N, axis=-1)


def hamiltonian_nested(lam: float, p: np.ndarray, u: np.ndarray, fr: CoefficientFrame) -> np.ndarray:
    """Unoptimised Hamiltonian at portfolio ``u``; bounded below by ``hamiltonian_hat``."""
    sp = np.asarray(p, dtype=float) @ fr.sigma
    return (
        -lam * control_objective(lam, p, u, fr)
        + np.sum(np.asarray(p) * fr.theta, axis=-1)
        + 0.5 * np.sum(sp * sp, axis=-1)
    )


def breve_H(
    fr: CoefficientFrame, lam: float, grad: np.ndarray, hess: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Hamiltonian of a fixed feedback ``v`` applied to a test function with
    gradient ``grad`` and Hessian ``hess`` at the frame points."""
    grad = np.asarray(grad, dtype=float)
    d = -lam * vol_N(v, fr) + grad @ fr.sigma
    ss = fr.sigma @ fr.sigma.T
    tr = np.einsum("ij,...ji->...", ss, np.asarray(hess, dtype=float))
    return (
        -lam * drift_M(v, fr)
        + 0.5 * np.sum(d * d, axis=-1)
        + np.sum(grad * fr.theta, axis=-1)
        + 0.5 * tr
    )
