"""Finite-difference solver for the scalar-factor ergodic Bellman equation.

Both the optimised equation ``H(x; lam, f) = F(lam)`` and the equation of a
fixed feedback ``v`` share the form::

    T(x) f'^2 / 2 + g1(x) f' + s f'' / 2 + g0(x) = Lambda

which is solved on ``[-R, R]`` with reflecting boundaries by relative policy
iteration on ``T p^2 / 2 = sup_w (w p - w^2 / (2 T))``.  Each iteration is a
linear ergodic problem for ``(f, Lambda)``, solved jointly with the gauge
``f(0) = 0``.  The invariant density of the resulting diffusion follows from
the zero-flux condition by an integrating factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import CubicSpline

from .hamiltonian import drift_M, hamiltonian_coefficients, optimal_u, vol_N
from .model import MarketScenario, eval_coefficients

# x (N,) -> (T, g1, g0), each (N,)
Coefficients = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


class GridSolveError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GridSolution:
    lam: float
    R: float
    xs: np.ndarray
    f: np.ndarray
    fprime: np.ndarray
    Lambda: float
    m: np.ndarray
    residual_inf: float
    u: np.ndarray                  # portfolio at the nodes, (N, n)
    drift: np.ndarray              # drift of the tilted factor at the nodes
    diffusion: float               # sigma sigma^T
    iterations: int = 0
    Lambda_history: tuple[float, ...] = field(default=())
    optimal: bool = True

    @property
    def h(self) -> float:
        return float(self.xs[1] - self.xs[0])

    @property
    def mid(self) -> int:
        return self.xs.size // 2


def _require_1d(s: MarketScenario) -> None:
    if s.l != 1:
        raise ValueError("the grid solver handles a scalar factor only (l = 1)")


def make_grid(R: float, N: int) -> np.ndarray:
    if N < 3 or N % 2 == 0:
        raise ValueError("N must be odd and at least 3")
    xs = np.linspace(-R, R, N)
    xs[N // 2] = 0.0
    return xs


def optimal_coefficients(lam: float, s: MarketScenario) -> Coefficients:
    def coeffs(x: np.ndarray):
        fr = eval_coefficients(s, x[:, None])
        T, g1, g0 = hamiltonian_coefficients(lam, fr)
        return np.full(x.shape, T[0, 0]), g1[:, 0], g0
    return coeffs


def policy_coefficients(lam: float, s: MarketScenario, policy: Callable) -> Coefficients:
    """Coefficients of the Hamiltonian of the fixed feedback ``policy``."""
    def coeffs(x: np.ndarray):
        fr = eval_coefficients(s, x[:, None])
        v = policy(x[:, None])
        N = vol_N(v, fr)
        g1 = fr.theta[:, 0] - lam * (N @ s.sigma.T)[:, 0]
        g0 = -lam * drift_M(v, fr) + 0.5 * lam**2 * np.sum(N * N, axis=1)
        return np.full(x.shape, s.ss[0, 0]), g1, g0
    return coeffs


def default_radius(lam: float, s: MarketScenario, n_std: float = 6.0) -> float:
    """``n_std`` stationary standard deviations of the linearised untilted-control drift."""
    _require_1d(s)
    coeffs = optimal_coefficients(lam, s)
    eps = 1e-4
    _, g1, _ = coeffs(np.array([-eps, 0.0, eps]))
    slope = (g1[2] - g1[0]) / (2 * eps)
    if slope >= 0:
        raise GridSolveError("factor drift is not mean-reverting at the origin")
    center = -g1[1] / slope
    std = np.sqrt(s.ss[0, 0] / (2.0 * -slope))
    return float(abs(center) + n_std * std)


def _generator(xs: np.ndarray, drift: np.ndarray, diff: float) -> sp.csr_matrix:
    """Central-difference generator ``drift d/dx + diff/2 d2/dx2`` with reflection."""
    N, h = xs.size, xs[1] - xs[0]
    lower = 0.5 * diff / h**2 - drift / (2 * h)
    upper = 0.5 * diff / h**2 + drift / (2 * h)
    diag = np.full(N, -diff / h**2)
    lo, up = lower[1:].copy(), upper[:-1].copy()
    # ghost nodes f[-1] = f[1], f[N] = f[N-2]: zero slope, drift term drops
    up[0] = diff / h**2
    lo[-1] = diff / h**2
    return sp.diags([lo, diag, up], [-1, 0, 1], format="csr")


def _derivatives(f: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    fp = np.zeros_like(f)
    fp[1:-1] = (f[2:] - f[:-2]) / (2 * h)
    fpp = np.empty_like(f)
    fpp[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h**2
    fpp[0] = 2 * (f[1] - f[0]) / h**2
    fpp[-1] = 2 * (f[-2] - f[-1]) / h**2
    return fp, fpp


def _solve_linear_ergodic(xs, drift, diff, reward):
    """Solve ``L f - Lambda = -reward`` with ``f(0) = 0``; returns ``(f, Lambda)``."""
    N = xs.size
    mid = N // 2
    L = _generator(xs, drift, diff).tolil()
    L = sp.hstack([L, -np.ones((N, 1))]).tolil()
    # drop f[mid] (gauge) by replacing its column with nothing: keep square system
    keep = [j for j in range(N + 1) if j != mid]
    A = L.tocsc()[:, keep]
    sol = spla.spsolve(A.tocsc(), -reward)
    f = np.insert(sol[:-1], mid, 0.0)
    return f, float(sol[-1])


def solve_quadratic_ergodic(
    coeffs: Coefficients,
    xs: np.ndarray,
    diff: float,
    tol: float = 1e-10,
    max_iter: int = 60,
    w0: np.ndarray | None = None,
):
    """Policy iteration for ``T f'^2/2 + g1 f' + diff f''/2 + g0 = Lambda`` on ``xs``.

    Returns ``(f, fprime, Lambda, history)``.
    """
    T, g1, g0 = coeffs(xs)
    if not (g1[0] > 0 and g1[-1] < 0):
        raise GridSolveError(
            f"drift does not point inward at the boundary (g1(-R)={g1[0]:.4g}, g1(R)={g1[-1]:.4g}); "
            "increase R or check stability"
        )
    if np.any(T <= 0):
        raise GridSolveError("quadratic coefficient T is not positive")
    h = xs[1] - xs[0]
    w = np.zeros_like(xs) if w0 is None else np.asarray(w0, dtype=float).copy()
    history = []
    for it in range(1, max_iter + 1):
        f, Lam = _solve_linear_ergodic(xs, g1 + w, diff, g0 - w**2 / (2 * T))
        history.append(Lam)
        fp, _ = _derivatives(f, h)
        w_new = T * fp
        step = float(np.max(np.abs(w_new - w)))
        w = w_new
        if step <= tol:
            return f, fp, Lam, tuple(history), it
    raise GridSolveError(f"policy iteration did not converge in {max_iter} iterations (last step {step:.3g})")


def integrating_factor_density(xs: np.ndarray, drift: np.ndarray, diff: float) -> np.ndarray:
    """Zero-flux density ``m ~ exp(int_0^x 2 drift / diff)`` normalised by the trapezoid rule."""
    logm = cumulative_trapezoid(2.0 * drift / diff, xs, initial=0.0)
    logm -= logm[xs.size // 2]
    m = np.exp(logm - logm.max())
    mass = trapezoid(m, xs)
    if not np.isfinite(mass) or mass <= 0:
        raise GridSolveError("density is not normalisable on the grid")
    return m / mass


def adjoint_density(xs: np.ndarray, drift: np.ndarray, diff: float) -> np.ndarray:
    """Stationary law of the discrete generator, rescaled to a density."""
    N, h = xs.size, xs[1] - xs[0]
    Lt = _generator(xs, drift, diff).T.tolil()
    Lt[0, :] = np.ones(N)
    rhs = np.zeros(N)
    rhs[0] = 1.0
    pi = spla.spsolve(Lt.tocsc(), rhs)
    wts = np.full(N, h)
    wts[[0, -1]] = h / 2
    return pi / wts


def _finish(lam, s, xs, f, fp, Lam, hist, iters, coeffs, u, optimal) -> GridSolution:
    T, g1, g0 = coeffs(xs)
    h = xs[1] - xs[0]
    diff = float(s.ss[0, 0])
    fp_c, fpp = _derivatives(f, h)
    H = 0.5 * T * fp_c**2 + g1 * fp_c + 0.5 * diff * fpp + g0
    residual = float(np.max(np.abs(H[1:-1] - Lam)))
    drift = g1 + T * fp
    m = integrating_factor_density(xs, drift, diff)
    return GridSolution(
        lam=float(lam), R=float(xs[-1]), xs=xs, f=f, fprime=fp, Lambda=Lam, m=m,
        residual_inf=residual, u=u, drift=drift, diffusion=diff, iterations=iters,
        Lambda_history=hist, optimal=optimal,
    )


def solve_ergodic_hjb(
    lam: float,
    s: MarketScenario,
    R: float | None = None,
    N: int = 2001,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> GridSolution:
    """Grid solution of the optimised ergodic Bellman equation at ``lam``."""
    _require_1d(s)
    if R is None:
        R = default_radius(lam, s)
    xs = make_grid(R, N)
    coeffs = optimal_coefficients(lam, s)
    f, fp, Lam, hist, iters = solve_quadratic_ergodic(coeffs, xs, float(s.ss[0, 0]), tol, max_iter)
    u = optimal_u(lam, fp[:, None], eval_coefficients(s, xs[:, None]))
    return _finish(lam, s, xs, f, fp, Lam, hist, iters, coeffs, u, True)


def solve_policy_hjb(
    lam: float,
    s: MarketScenario,
    policy: Callable,
    R: float,
    N: int = 2001,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> GridSolution:
    """Grid solution of the ergodic equation of a fixed feedback ``policy``.

    ``Lambda`` approximates ``lim (1/t) ln E exp(-lam t L_t)`` for that portfolio.
    """
    _require_1d(s)
    xs = make_grid(R, N)
    coeffs = policy_coefficients(lam, s, policy)
    f, fp, Lam, hist, iters = solve_quadratic_ergodic(coeffs, xs, float(s.ss[0, 0]), tol, max_iter)
    u = np.asarray(policy(xs[:, None]), dtype=float)
    return _finish(lam, s, xs, f, fp, Lam, hist, iters, coeffs, u, False)


def stationary_density(sol: GridSolution) -> np.ndarray:
    """Invariant density of the tilted factor diffusion (integrating factor)."""
    return integrating_factor_density(sol.xs, sol.drift, sol.diffusion)


def rate_F_grid(lam: float, s: MarketScenario, **grid) -> float:
    return solve_ergodic_hjb(lam, s, **grid).Lambda


def derivative_integrand(sol: GridSolution, s: MarketScenario) -> np.ndarray:
    """-M(u) + lam |N(u)|^2 - f' sigma N(u) at the nodes."""
    fr = eval_coefficients(s, sol.xs[:, None])
    N = vol_N(sol.u, fr)
    return (
        -drift_M(sol.u, fr)
        + sol.lam * np.sum(N * N, axis=1)
        - sol.fprime * (N @ s.sigma.T)[:, 0]
    )


def rate_derivative_grid(sol: GridSolution, s: MarketScenario) -> float:
    """F'(lam) by trapezoid quadrature against the invariant density."""
    return float(trapezoid(derivative_integrand(sol, s) * sol.m, sol.xs))


def tilt_table(sol: GridSolution, s: MarketScenario) -> np.ndarray:
    """Girsanov drift ``-lam N(u(x)) + sigma^T f'(x)`` at the nodes, shape (N, k)."""
    fr = eval_coefficients(s, sol.xs[:, None])
    return -sol.lam * vol_N(sol.u, fr) + sol.fprime[:, None] * s.sigma[0][None, :]


def midpoint_residual(sol: GridSolution, s: MarketScenario, inner: float = 0.5) -> float:
    """Max |H - Lambda| at cell midpoints within ``|x| <= inner * R`` using a cubic
    spline of ``f``; measures consistency with the continuous equation."""
    spline = CubicSpline(sol.xs, sol.f)
    xm = 0.5 * (sol.xs[1:] + sol.xs[:-1])
    xm = xm[np.abs(xm) <= inner * sol.R]
    coeffs = (
        optimal_coefficients(sol.lam, s) if sol.optimal
        else None
    )
    if coeffs is None:
        raise ValueError("midpoint residual is defined for optimised solutions")
    T, g1, g0 = coeffs(xm)
    fp, fpp = spline(xm, 1), spline(xm, 2)
    H = 0.5 * T * fp**2 + g1 * fp + 0.5 * sol.diffusion * fpp + g0
    return float(np.max(np.abs(H - sol.Lambda)))


def boundary_sensitivity(lam: float, s: MarketScenario, R: float, N: int = 2001) -> tuple[float, float]:
    """``(Lambda(R), Lambda(1.5 R))`` at equal grid spacing."""
    N2 = int(round((N - 1) * 1.5)) // 2 * 2 + 1
    return (
        solve_ergodic_hjb(lam, s, R=R, N=N).Lambda,
        solve_ergodic_hjb(lam, s, R=1.5 * R, N=N2).Lambda,
    )
