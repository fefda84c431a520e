"""Closed-form pipeline for linear scenarios.

For each dual variable ``lam`` the ergodic Bellman equation has a quadratic
solution ``f(x) = x^T P x / 2 + p2^T x``; ``P`` solves an algebraic Riccati
equation, ``p2`` a linear system, and the optimally tilted factor is an
Ornstein-Uhlenbeck process whose Gaussian invariant law gives F'(lam) exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .hamiltonian import hamiltonian_hat, kappa
from .model import LINEAR, MarketScenario, eval_coefficients


class RiccatiError(np.linalg.LinAlgError):
    """No stabilizing Riccati solution (or no stable invariant law)."""


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _require_linear(s: MarketScenario) -> None:
    if s.kind != LINEAR:
        raise ValueError(f"closed form needs a {LINEAR} scenario, got {s.kind}")


def max_real_eig(m: np.ndarray) -> float:
    return float(np.max(np.linalg.eigvals(m).real))


# ---------------------------------------------------------------------------
# Riccati and Lyapunov equations
# ---------------------------------------------------------------------------

def care_stabilizing(
    A: np.ndarray, B: np.ndarray, Q: np.ndarray, *, refine: int = 3, tol: float = 1e-11
) -> np.ndarray:
    """Stabilizing solution of ``A^T X + X A - X B X + Q = 0``.

    Ordered real Schur form of the Hamiltonian matrix ``[[A, -B], [-Q, -A^T]]``
    gives the stable invariant subspace; a few Newton-Kleinman steps polish the
    result. ``Q`` need not be semidefinite.
    """
    l = A.shape[0]
    H = np.block([[A, -B], [-Q, -A.T]])
    _, Z, sdim = sla.schur(H, output="real", sort="lhp")
    if sdim != l:
        ev = np.linalg.eigvals(H)
        raise RiccatiError(
            f"stable subspace has dimension {sdim}, need {l}; "
            f"Hamiltonian eigenvalues with |Re| < 1e-12: {np.sum(np.abs(ev.real) < 1e-12)}, "
            f"spectrum real parts {np.sort(ev.real)}"
        )
    U1, U2 = Z[:l, :l], Z[l:, :l]
    if np.linalg.cond(U1) > 1e12:
        raise RiccatiError(f"stable subspace basis block is singular (cond {np.linalg.cond(U1):.3g})")
    X = _sym(np.linalg.solve(U1.T, U2.T).T)

    def resid(X: np.ndarray) -> float:
        return float(np.linalg.norm(A.T @ X + X @ A - X @ B @ X + Q))

    res = resid(X)
    for _ in range(refine):
        if res <= tol * (1.0 + np.linalg.norm(X)):
            break
        Ak = A - B @ X
        if max_real_eig(Ak) >= 0:
            break
        Xn = _sym(sla.solve_continuous_lyapunov(Ak.T, -(Q + X @ B @ X)))
        rn = resid(Xn)
        if not rn < res:
            break
        X, res = Xn, rn
    closed = A - B @ X
    if max_real_eig(closed) >= 0:
        raise RiccatiError(
            f"closed loop A - B X not Hurwitz: eigenvalues {np.linalg.eigvals(closed)}"
        )
    return X


def lyapunov_covariance(D: np.ndarray, ss: np.ndarray) -> np.ndarray:
    """Stationary covariance ``S`` of ``dY = D Y dt + sigma dW``: D S + S D^T + ss = 0."""
    if max_real_eig(D) >= 0:
        raise RiccatiError("drift matrix is not Hurwitz; no invariant law")
    return _sym(sla.solve_continuous_lyapunov(D, -ss))


# ---------------------------------------------------------------------------
# Quadratic functions of a Gaussian factor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Quadratic:
    """x |-> x^T Q x + q . x + s0 with symmetric ``Q``."""

    Q: np.ndarray
    q: np.ndarray
    s0: float

    def __add__(self, other: Quadratic) -> Quadratic:
        return Quadratic(self.Q + other.Q, self.q + other.q, self.s0 + other.s0)

    def __sub__(self, other: Quadratic) -> Quadratic:
        return self + (-1.0) * other

    def __rmul__(self, a: float) -> Quadratic:
        return Quadratic(a * self.Q, a * self.q, a * self.s0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.Q, x) + x @ self.q + self.s0

    def expect(self, mean: np.ndarray, cov: np.ndarray) -> float:
        """Exact expectation under Normal(mean, cov)."""
        return float(mean @ self.Q @ mean + np.trace(self.Q @ cov) + self.q @ mean + self.s0)

    @staticmethod
    def bilinear(E1, e1, E2, e2, W=None) -> Quadratic:
        """(E1 x + e1)^T W (E2 x + e2)."""
        if W is None:
            W = np.eye(E1.shape[0])
        return Quadratic(_sym(E1.T @ W @ E2), E1.T @ W @ e2 + E2.T @ W.T @ e1, float(e1 @ W @ e2))

    @staticmethod
    def linear(q: np.ndarray, s0: float) -> Quadratic:
        return Quadratic(np.zeros((q.size, q.size)), np.asarray(q, dtype=float), float(s0))


# ---------------------------------------------------------------------------
# Per-lambda solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Quadratic Bellman solution at one ``lam``.

    ``K, k0`` give the feedback ``u(x) = K x + k0`` used in the Hamiltonian (the
    optimiser for :func:`rate_F`, the fixed policy for :func:`policy_rate_F`);
    ``D`` and ``mstar``/``Sigma`` describe the tilted OU dynamics
    ``dY = (D Y + mu0) dt + sigma dW`` and its invariant law.
    """

    lam: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    P: np.ndarray
    p2: np.ndarray
    D: np.ndarray
    F: float
    mstar: np.ndarray
    Sigma: np.ndarray
    K: np.ndarray
    k0: np.ndarray
    residual: float = 0.0
    optimal: bool = True

    @property
    def D_max_re(self) -> float:
        return max_real_eig(self.D)

    def grad_f(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.P + self.p2

    def policy(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.K.T + self.k0


def assemble_ABC(lam: float, s: MarketScenario):
    """Riccati coefficients ``(A, B, C)`` at ``lam``."""
    _require_linear(s)
    k = kappa(lam)
    G, cinv = s.linear.G, s.c_inv
    sb = s.sigma @ s.b.T
    A = s.linear.Theta1 - k * sb @ cinv @ G
    B = _sym(s.ss - k * sb @ cinv @ sb.T)
    C = _sym(G.T @ cinv @ G)
    return A, B, C


def riccati_residual(A, B, C, P, lam) -> float:
    """Frobenius norm of A^T P + P A + P B P - kappa C."""
    return float(np.linalg.norm(A.T @ P + P @ A + P @ B @ P - kappa(lam) * C))


def solve_riccati(A: np.ndarray, B: np.ndarray, C: np.ndarray, lam: float) -> np.ndarray:
    """Negative semidefinite ``P`` with ``A + B P`` Hurwitz.

    Solved in ``X = -P``, which turns the equation into the standard form
    ``A^T X + X A - X B X + kappa C = 0``.
    """
    return -care_stabilizing(A, B, kappa(lam) * C)


def solve_p2(lam: float, P: np.ndarray, s: MarketScenario) -> np.ndarray:
    """Linear coefficient of the quadratic Bellman solution."""
    _require_linear(s)
    A, B, _ = assemble_ABC(lam, s)
    D = A + B @ P
    lc, cinv = s.linear, s.c_inv
    k = kappa(lam)
    v0 = lc.g0 + lam * s.b @ s.beta
    rhs = (
        k * (lc.G + s.b @ s.sigma.T @ P).T @ cinv @ v0
        + lam * (lc.r1 - lc.alpha1 - P @ s.sigma @ s.beta)
        - P @ lc.theta2
    )
    try:
        return np.linalg.solve(D.T, rhs)
    except np.linalg.LinAlgError as exc:
        raise RiccatiError("D^T is singular although D should be Hurwitz") from exc


def rate_F(lam: float, s: MarketScenario) -> RiccatiSolution:
    """F(lam) and the associated quadratic Bellman solution and invariant law."""
    _require_linear(s)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    A, B, C = assemble_ABC(lam, s)
    P = solve_riccati(A, B, C, lam)
    p2 = solve_p2(lam, P, s)
    D = A + B @ P
    lc, cinv, k = s.linear, s.c_inv, kappa(lam)
    bsig = s.b @ s.sigma.T
    v = lc.g0 + lam * s.b @ s.beta + bsig @ p2
    beta_sq = s.beta_sq
    F = (
        -0.5 * k * float(v @ cinv @ v)
        - lam * (lc.r2 - lc.alpha2 + 0.5 * beta_sq - float(s.beta @ s.sigma.T @ p2))
        + 0.5 * lam**2 * beta_sq
        + 0.5 * float(p2 @ s.ss @ p2)
        + float(p2 @ lc.theta2)
        + 0.5 * float(np.trace(s.ss @ P))
    )
    mu0 = (
        -k * s.sigma @ s.b.T @ cinv @ v
        + lam * s.sigma @ s.beta
        + s.ss @ p2
        + lc.theta2
    )
    mstar = -np.linalg.solve(D, mu0)
    Sigma = lyapunov_covariance(D, s.ss)
    K = cinv @ (lc.G + bsig @ P) / (1.0 + lam)
    k0 = cinv @ v / (1.0 + lam)
    return RiccatiSolution(
        lam=float(lam), A=A, B=B, C=C, P=P, p2=p2, D=D, F=float(F), mstar=mstar, Sigma=Sigma,
        K=K, k0=k0, residual=riccati_residual(A, B, C, P, lam), optimal=True,
    )


def policy_rate_F(lam: float, s: MarketScenario, K: np.ndarray, k0: np.ndarray) -> RiccatiSolution:
    """Ergodic constant of the fixed affine feedback ``u(x) = K x + k0``.

    This is the limit of ``(1/t) ln E exp(-lam t L_t)`` for that portfolio; it
    is finite only on an interval of ``lam`` (outside, :class:`RiccatiError`).
    """
    _require_linear(s)
    lc = s.linear
    K = np.atleast_2d(np.asarray(K, dtype=float))
    k0 = np.asarray(k0, dtype=float)
    c = s.c
    bK = s.b.T @ K                      # N(x) slope, k x l
    ne = s.b.T @ k0 - s.beta            # N intercept
    A = lc.Theta1 - lam * s.sigma @ bK
    B = s.ss
    Q = 2.0 * lam * _sym(K.T @ lc.G) - lam * (1.0 + lam) * _sym(K.T @ c @ K)
    P = -care_stabilizing(A, B, Q)
    D = A + B @ P
    m_lin = K.T @ lc.g0 + lc.G.T @ k0 - K.T @ c @ k0 + (lc.r1 - lc.alpha1)
    rhs = lam * (P @ s.sigma - lam * bK.T) @ ne - P @ lc.theta2 + lam * m_lin
    p = np.linalg.solve(D.T, rhs)
    de = -lam * ne + s.sigma.T @ p
    M0 = float(k0 @ lc.g0 - 0.5 * k0 @ c @ k0 + lc.r2 - lc.alpha2 + 0.5 * s.beta_sq)
    F = -lam * M0 + 0.5 * float(de @ de) + float(p @ lc.theta2) + 0.5 * float(np.trace(s.ss @ P))
    mu0 = lc.theta2 + s.sigma @ de
    mstar = -np.linalg.solve(D, mu0)
    Sigma = lyapunov_covariance(D, s.ss)
    res = float(np.linalg.norm(A.T @ P + P @ A + P @ B @ P - Q))
    return RiccatiSolution(
        lam=float(lam), A=A, B=B, C=-Q, P=P, p2=p, D=D, F=F, mstar=mstar, Sigma=Sigma,
        K=K, k0=k0, residual=res, optimal=False,
    )


def tilt_affine(sol: RiccatiSolution, s: MarketScenario) -> tuple[np.ndarray, np.ndarray]:
    """Girsanov drift ``d(x) = -lam N(u(x), x) + sigma^T grad f(x) = E x + e``."""
    E = -sol.lam * s.b.T @ sol.K + s.sigma.T @ sol.P
    e = -sol.lam * (s.b.T @ sol.k0 - s.beta) + s.sigma.T @ sol.p2
    return E, e


def integrand_quadratic(sol: RiccatiSolution, s: MarketScenario) -> Quadratic:
    """-M(u) + lam |N(u)|^2 - grad f^T sigma N(u) as a quadratic in ``x``."""
    lc = s.linear
    K, k0 = sol.K, sol.k0
    NE, ne = s.b.T @ K, s.b.T @ k0 - s.beta
    M = (
        Quadratic.bilinear(K, k0, lc.G, lc.g0)
        - 0.5 * Quadratic.bilinear(K, k0, K, k0, s.c)
        + Quadratic.linear(lc.r1 - lc.alpha1, lc.r2 - lc.alpha2 + 0.5 * s.beta_sq)
    )
    cross = Quadratic.bilinear(s.sigma.T @ sol.P, s.sigma.T @ sol.p2, NE, ne)
    return -1.0 * M + sol.lam * Quadratic.bilinear(NE, ne, NE, ne) - cross


def rate_derivative(sol: RiccatiSolution, s: MarketScenario) -> float:
    """Right derivative F'(lam) as an exact Gaussian expectation."""
    return integrand_quadratic(sol, s).expect(sol.mstar, sol.Sigma)


def bellman_residual(sol: RiccatiSolution, s: MarketScenario, xs: np.ndarray) -> np.ndarray:
    """H(x; lam, f) - F(lam) at points ``xs`` for the quadratic ``f`` of ``sol``."""
    xs = np.atleast_2d(xs)
    fr = eval_coefficients(s, xs)
    H = hamiltonian_hat(sol.lam, sol.grad_f(xs), fr) + 0.5 * np.trace(s.ss @ sol.P)
    return H - sol.F


def stationary_std(sol: RiccatiSolution) -> np.ndarray:
    return np.sqrt(np.diag(sol.Sigma))
