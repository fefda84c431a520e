"""Outer dual problem ``J(q) = sup_{lam >= 0} (-lam q - F(lam))``, the optimal
feedback built from its maximiser, truncated feedbacks and saddle diagnostics.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy.optimize import brentq

from . import bellman1d, gaussian
from .conditions import check_all, check_degenerate_benchmark
from .hamiltonian import optimal_u
from .model import LINEAR, MarketScenario, eval_coefficients

# lam -> (F(lam), F'(lam), artifact)
RateOracle = Callable[[float], tuple[float, float, Any]]


class DualError(RuntimeError):
    """The dual problem could not be solved."""


class OracleError(DualError):
    pass


class BracketError(DualError):
    pass


class BoundaryStabilityError(DualError):
    """A boundary optimum was found but the zero-feedback stability check fails."""


class DegenerateBenchmarkError(DualError):
    """Non-volatile benchmark for which the safe security alone is optimal."""


@dataclass(frozen=True, eq=False)
class DualSolution:
    q: float
    lambda_hat: float
    J: float
    boundary: bool
    saddle_residual: float
    artifacts: Any = None
    bracket: tuple[float, float] = (0.0, 0.0)
    F_hat: float = 0.0
    dF_hat: float = 0.0

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "lambda_hat": self.lambda_hat,
            "J": self.J,
            "boundary": self.boundary,
            "saddle_residual": self.saddle_residual,
            "bracket": list(self.bracket),
            "F_hat": self.F_hat,
            "dF_hat": self.dF_hat,
        }


# ---------------------------------------------------------------------------
# oracles

def gaussian_oracle(s: MarketScenario) -> RateOracle:
    def oracle(lam: float):
        sol = gaussian.rate_F(lam, s)
        return sol.F, gaussian.rate_derivative(sol, s), sol
    return oracle


def grid_oracle(s: MarketScenario, R: float | None = None, N: int = 2001, tol: float = 1e-10) -> RateOracle:
    def oracle(lam: float):
        sol = bellman1d.solve_ergodic_hjb(lam, s, R=R, N=N, tol=tol)
        return sol.Lambda, bellman1d.rate_derivative_grid(sol, s), sol
    return oracle


def policy_gaussian_oracle(s: MarketScenario, K: np.ndarray, k0: np.ndarray) -> RateOracle:
    """Log-moment generating rate of a fixed affine feedback."""
    def oracle(lam: float):
        sol = gaussian.policy_rate_F(lam, s, K, k0)
        return sol.F, gaussian.rate_derivative(sol, s), sol
    return oracle


def policy_grid_oracle(s: MarketScenario, policy: Callable, R: float, N: int = 2001, tol: float = 1e-10) -> RateOracle:
    def oracle(lam: float):
        sol = bellman1d.solve_policy_hjb(lam, s, policy, R=R, N=N, tol=tol)
        return sol.Lambda, bellman1d.rate_derivative_grid(sol, s), sol
    return oracle


# ---------------------------------------------------------------------------
# dual maximisation

def shortfall_rate(
    q: float,
    oracle: RateOracle,
    lmax_init: float = 1.0,
    tol: float = 1e-10,
    max_doublings: int = 60,
    domain_limited: bool = False,
) -> DualSolution:
    """Maximise ``-lam q - F(lam)`` over ``lam >= 0``.

    ``F`` is convex, so the maximiser is ``0`` when ``F'(0+) >= -q`` and is the
    root of ``F'(lam) + q`` otherwise.  With ``domain_limited`` the oracle may
    fail beyond some finite ``lam`` (where ``F`` is infinite); such failures are
    treated as ``F' = +inf`` and the bracket is shrunk into the domain.
    """
    def call(lam):
        try:
            return oracle(lam)
        except (np.linalg.LinAlgError, bellman1d.GridSolveError, ValueError) as exc:
            if domain_limited:
                return None
            raise OracleError(f"rate oracle failed at lambda={lam:.6g}: {exc}") from exc

    first = call(0.0)
    if first is None:
        raise OracleError("rate oracle failed at lambda=0")
    F0, d0, art0 = first
    if d0 >= -q:
        return DualSolution(
            q=float(q), lambda_hat=0.0, J=float(-F0) + 0.0, boundary=True,
            saddle_residual=float(max(0.0, -q - d0)), artifacts=art0, bracket=(0.0, 0.0),
            F_hat=float(F0), dF_hat=float(d0),
        )

    lo, hi = 0.0, float(lmax_init)
    for _ in range(max_doublings):
        out = call(hi)
        if out is None:
            # left the domain: bisect towards lo until the oracle succeeds
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                o = call(mid)
                if o is None:
                    hi = mid
                elif o[1] + q <= 0:
                    lo = mid
                else:
                    hi = mid
                    out = o
                    break
            else:
                raise BracketError("could not locate the domain edge of the rate oracle")
            if out is None:
                continue
        if out[1] + q > 0:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise BracketError(
            f"F'(lambda) + q stayed nonpositive up to lambda={hi:.3g}; check condition (N)"
        )

    cache: dict[float, tuple] = {}

    def g(lam):
        o = call(lam)
        if o is None:
            raise OracleError(f"rate oracle failed inside the bracket at lambda={lam:.6g}")
        cache[lam] = o
        return o[1] + q

    lam_hat = brentq(g, lo, hi, xtol=tol * 1e-3, rtol=4 * np.finfo(float).eps, maxiter=500)
    F, dF, art = cache.get(lam_hat) or call(lam_hat)
    return DualSolution(
        q=float(q), lambda_hat=float(lam_hat), J=float(-lam_hat * q - F), boundary=False,
        saddle_residual=float(abs(dF + q)), artifacts=art, bracket=(lo, hi),
        F_hat=float(F), dF_hat=float(dF),
    )


def solve_shortfall(
    s: MarketScenario,
    q: float,
    method: str = "gaussian",
    lmax_init: float = 1.0,
    **grid: Any,
) -> DualSolution:
    """Rate and maximiser for scenario ``s``; ``method`` is ``gaussian`` or ``grid``."""
    if s.beta_sq == 0.0:
        rep = check_degenerate_benchmark(s, q)
        if rep.safe_only_optimal:
            raise DegenerateBenchmarkError(rep.message)
    if method == "gaussian":
        if s.kind != LINEAR and not s.is_affine:
            raise ValueError("closed-form rates need an affine scenario; use method='grid'")
        oracle = gaussian_oracle(s if s.kind == LINEAR else s.to_linear())
    elif method == "grid":
        oracle = grid_oracle(s, **grid)
    else:
        raise ValueError(f"unknown method {method!r}")
    sol = shortfall_rate(q, oracle, lmax_init=lmax_init)
    if sol.boundary and not check_all(s).passed["stability"]:
        raise BoundaryStabilityError(
            "the maximiser is lambda=0 but the factor drift fails the stability check"
        )
    return sol


# ---------------------------------------------------------------------------
# policies

@dataclass(frozen=True, eq=False)
class PortfolioPolicy:
    """Feedback ``u(x)``: affine ``K x + k0`` or a linear interpolation table.

    With finite ``tau`` the portfolio is zero outside the closed ball ``|x| <= tau``.
    Tables are held constant beyond their end nodes.
    """

    lambda_hat: float
    K: np.ndarray | None = None
    k0: np.ndarray | None = None
    xs: np.ndarray | None = None
    table: np.ndarray | None = None
    tau: float = np.inf

    def __post_init__(self) -> None:
        linear = self.K is not None and self.k0 is not None
        tab = self.xs is not None and self.table is not None
        if linear == tab:
            raise ValueError("give either (K, k0) or (xs, table)")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def form(self) -> str:
        return "linear" if self.K is not None else "tabulated"

    @property
    def n(self) -> int:
        return self.K.shape[0] if self.K is not None else self.table.shape[1]

    def untruncated(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.K is not None:
            return x @ self.K.T + self.k0
        xv = x[..., 0]
        cols = [np.interp(xv, self.xs, self.table[:, j]) for j in range(self.table.shape[1])]
        return np.stack(cols, axis=-1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self.untruncated(x)
        if np.isfinite(self.tau):
            inside = np.linalg.norm(x, axis=-1) <= self.tau
            u = np.where(inside[..., None], u, 0.0)
        return u

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"lambda_hat": self.lambda_hat, "form": self.form,
                             "tau": None if np.isinf(self.tau) else self.tau}
        if self.K is not None:
            d["K"] = self.K.tolist()
            d["k0"] = self.k0.tolist()
        else:
            d["table"] = {"x": self.xs.tolist(), "u": self.table.tolist()}
        return d


def build_policy(sol: DualSolution) -> PortfolioPolicy:
    art = sol.artifacts
    if isinstance(art, gaussian.RiccatiSolution):
        return PortfolioPolicy(sol.lambda_hat, K=art.K.copy(), k0=art.k0.copy())
    if isinstance(art, bellman1d.GridSolution):
        return PortfolioPolicy(sol.lambda_hat, xs=art.xs.copy(), table=art.u.copy())
    raise TypeError("dual solution carries no usable artifacts")


def kelly_policy(s: MarketScenario, xs: np.ndarray | None = None) -> PortfolioPolicy:
    """Log-optimal feedback ``c^-1 (a(x) - r(x) 1)``."""
    if s.kind == LINEAR:
        lc = s.linear
        return PortfolioPolicy(0.0, K=s.c_inv @ lc.G, k0=s.c_inv @ lc.g0)
    if s.is_affine:
        lc = s.to_linear().linear
        return PortfolioPolicy(0.0, K=s.c_inv @ lc.G, k0=s.c_inv @ lc.g0)
    if xs is None:
        raise ValueError("a tabulation grid is needed for a nonlinear scenario")
    fr = eval_coefficients(s, np.asarray(xs, dtype=float)[:, None])
    return PortfolioPolicy(0.0, xs=np.asarray(xs, dtype=float), table=optimal_u(0.0, np.zeros((len(xs), 1)), fr))


def truncate_policy(policy: PortfolioPolicy, tau: float) -> PortfolioPolicy:
    if not tau > 0:
        raise ValueError("tau must be positive")
    return dataclasses.replace(policy, tau=float(tau))


# ---------------------------------------------------------------------------
# diagnostics

RHOS = (0.01, 0.1, 1.0)


@dataclass(frozen=True)
class TruncationReport:
    rho: tuple[float, ...]
    linear_growth: tuple[bool, ...]      # g(x) <= C1 |x| + C2
    tends_to_minus_inf: tuple[bool, ...]  # proxy for the strong version
    leading: tuple[float, ...]           # largest eigenvalue / quadratic coefficient of g

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def truncation_g(sol: DualSolution, s: MarketScenario, x: np.ndarray, rho: float) -> np.ndarray:
    """``(1+rho) |b sigma^T grad f|^2_{c^-1} - |a - r 1|^2_{c^-1}`` at points ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    art = sol.artifacts
    if isinstance(art, gaussian.RiccatiSolution):
        grad = art.grad_f(x)
    else:
        grad = np.interp(x[:, 0], art.xs, art.fprime)[:, None]
    fr = eval_coefficients(s, x)
    v = (grad @ s.sigma) @ s.b.T
    ex = fr.excess
    return (1.0 + rho) * np.einsum("mi,ij,mj->m", v, s.c_inv, v) - np.einsum("mi,ij,mj->m", ex, s.c_inv, ex)


def check_truncation_conditions(
    sol: DualSolution, s: MarketScenario, probe: np.ndarray | None = None, tol: float = 1e-12
) -> TruncationReport:
    """Growth of ``g`` for each ``rho`` in ``RHOS``.

    Affine artifacts are decided exactly from the quadratic part of ``g``.  Grid
    artifacts use a least-squares quadratic fit over ``probe`` (default: the
    nodes with ``|x| <= 0.9 R``).
    """
    art = sol.artifacts
    lin, neg, lead = [], [], []
    if isinstance(art, gaussian.RiccatiSolution):
        G = s.linear.G if s.kind == LINEAR else s.to_linear().linear.G
        V = s.b @ s.sigma.T @ art.P
        for rho in RHOS:
            Q = (1.0 + rho) * V.T @ s.c_inv @ V - G.T @ s.c_inv @ G
            top = float(np.max(np.linalg.eigvalsh(0.5 * (Q + Q.T))))
            scale = tol * (1.0 + np.abs(Q).max())
            lin.append(top <= scale)
            neg.append(top < -scale)
            lead.append(top)
    else:
        xs = art.xs if probe is None else np.asarray(probe, dtype=float).ravel()
        if probe is None:
            xs = xs[np.abs(xs) <= 0.9 * art.R]
        for rho in RHOS:
            gv = truncation_g(sol, s, xs[:, None], rho)
            a2 = float(np.polyfit(xs, gv, 2)[0])
            scale = 1e-8 * (1.0 + np.abs(gv).max())
            outer = np.abs(xs) >= 0.8 * np.abs(xs).max()
            inner_max = gv[np.abs(xs) <= 0.5 * np.abs(xs).max()].max()
            lin.append(a2 <= scale)
            neg.append(bool(a2 < -scale and gv[outer].max() < inner_max))
            lead.append(a2)
    return TruncationReport(RHOS, tuple(bool(v) for v in lin), tuple(bool(v) for v in neg), tuple(lead))


def saddle_integral(sol: DualSolution, s: MarketScenario) -> float:
    """``E_m[M(u) - lam |N(u)|^2 + grad f^T sigma N(u)]`` under the tilted invariant law."""
    art = sol.artifacts
    if isinstance(art, gaussian.RiccatiSolution):
        ls = s if s.kind == LINEAR else s.to_linear()
        return -gaussian.integrand_quadratic(art, ls).expect(art.mstar, art.Sigma)
    return -bellman1d.rate_derivative_grid(art, s)


def check_saddle(sol: DualSolution, s: MarketScenario) -> float:
    """Equality residual at an interior maximiser; excess over ``q`` at the boundary."""
    val = saddle_integral(sol, s)
    if sol.boundary:
        return float(max(0.0, val - sol.q))
    return float(abs(val - sol.q))
