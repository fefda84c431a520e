"""Numerical checks of the standing hypotheses: ellipticity, nondegeneracy (N)
and the drift stability condition with zero feedback correction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import LINEAR, MarketScenario, SaturatedCoefficients, min_eig


class SingularProjectionError(np.linalg.LinAlgError):
    """sigma Q1 sigma^T is singular: part 1 of condition (N) fails."""


def projection_Q1(b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Orthogonal projector I - b^T c^-1 b onto the null space of ``b``."""
    k = b.shape[1]
    Q1 = np.eye(k) - b.T @ np.linalg.solve(c, b)
    return 0.5 * (Q1 + Q1.T)


def projection_Q2(b: np.ndarray, c: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Q1 (I - sigma^T (sigma Q1 sigma^T)^-1 sigma) Q1."""
    Q1 = projection_Q1(b, c)
    S = sigma @ Q1 @ sigma.T
    try:
        cho = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise SingularProjectionError("sigma Q1 sigma^T is not positive definite") from exc
    Z = np.linalg.solve(cho, sigma)           # cho^-1 sigma, so Z^T Z = sigma^T S^-1 sigma
    inner = np.eye(b.shape[1]) - Z.T @ Z
    Q2 = Q1 @ inner @ Q1
    return 0.5 * (Q2 + Q2.T)


def n1_alternative(b: np.ndarray, sigma: np.ndarray) -> float:
    """min eigenvalue of c - b sigma^T (sigma sigma^T)^-1 sigma b^T.

    Positive exactly when sigma Q1 sigma^T is positive definite.
    """
    c = b @ b.T
    sb = sigma @ b.T
    return min_eig(c - sb.T @ np.linalg.solve(sigma @ sigma.T, sb))


@dataclass(frozen=True)
class ConditionReport:
    ellipticity_min_eig_c: float
    ellipticity_min_eig_ss: float
    n1_min_eig: float
    n2_min_value: float
    stability_margin: float
    passed: dict[str, bool] = field(default_factory=dict)
    threshold: float = 1e-10

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["all_passed"] = self.all_passed
        return d


def check_all(
    s: MarketScenario,
    probe: np.ndarray | None = None,
    shell_radius: float = 50.0,
    threshold: float = 1e-10,
    shell_points: int = 64,
) -> ConditionReport:
    """Evaluate every hypothesis over ``probe`` (points of shape ``(m, l)``).

    Volatilities are constant in all supported scenarios, so the ellipticity and
    (N) values are exact; the probe set only matters for future x-dependent
    volatilities.  Stability is exact (Hurwitz test on Theta1) for linear
    scenarios and evaluated on the sphere ``|x| = shell_radius`` otherwise.
    """
    if probe is None:
        probe = np.zeros((1, s.l))
    probe = np.atleast_2d(np.asarray(probe, dtype=float))
    if probe.shape[0] == 0:
        raise ValueError("probe set is empty")
    if shell_radius <= 0:
        raise ValueError("shell_radius must be positive")

    c, ss = s.c, s.ss
    e_c, e_ss = min_eig(c), min_eig(ss)
    Q1 = projection_Q1(s.b, c)
    n1 = min_eig(s.sigma @ Q1 @ s.sigma.T)
    try:
        n2 = float(s.beta @ projection_Q2(s.b, c, s.sigma) @ s.beta)
    except SingularProjectionError:
        n2 = float("nan")
    # constant volatilities: every probe point gives the same values
    n1_vals = np.full(probe.shape[0], n1)
    n2_vals = np.full(probe.shape[0], n2)

    if s.kind == LINEAR:
        margin = float(np.max(np.linalg.eigvals(s.linear.Theta1).real))
    else:
        margin = _shell_margin(s, shell_radius, shell_points)

    n1_min, n2_min = float(n1_vals.min()), float(n2_vals.min())
    passed = {
        "ellipticity_c": e_c > threshold,
        "ellipticity_ss": e_ss > threshold,
        "n1": n1_min > threshold,
        "n2": bool(np.isfinite(n2_min) and n2_min > threshold),
        "stability": margin < 0.0,
    }
    return ConditionReport(e_c, e_ss, n1_min, n2_min, margin, passed, threshold)


def _shell_margin(s: MarketScenario, radius: float, m: int) -> float:
    if s.l == 1:
        xs = np.array([[-radius], [radius]])
    else:
        rng = np.random.default_rng(0)
        v = rng.standard_normal((m, s.l))
        xs = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    _, _, _, theta = s.drifts(xs)
    return float(np.max(np.sum(theta * xs, axis=1) / radius**2))


@dataclass(frozen=True)
class DegenerateBenchmarkReport:
    inf_r_minus_alpha: float
    q: float
    safe_only_optimal: bool

    @property
    def message(self) -> str:
        if self.safe_only_optimal:
            return (
                f"benchmark is not volatile and inf(r - alpha) = {self.inf_r_minus_alpha:.6g} >= q = "
                f"{self.q:.6g}: investing in the safe security only is optimal; no rate computed"
            )
        return "benchmark is not volatile; inf(r - alpha) < q, rate is computable"


def inf_r_minus_alpha(s: MarketScenario) -> float:
    """Infimum over the factor space of r(x) - alpha(x)."""
    if s.kind == LINEAR:
        lc = s.linear
        if np.any(lc.r1 != lc.alpha1):
            return float("-inf")
        return lc.r2 - lc.alpha2
    pr, pa = s.parametric.r, s.parametric.alpha
    if pr[1] != pa[1]:
        return float("-inf")
    scales = [abs(v) for v in (pr[3], pa[3]) if v != 0.0]
    span = 40.0 / min(scales) if scales else 1.0
    x = np.linspace(-span, span, 200001)
    ev = SaturatedCoefficients.evaluate
    vals = ev(pr, x) - ev(pa, x)
    # tanh saturates: the tails are attained in the limit
    limits = [
        pr[0] - pa[0] + pr[2] * np.sign(pr[3]) * sgn - pa[2] * np.sign(pa[3]) * sgn
        for sgn in (-1.0, 1.0)
    ]
    return float(min(vals.min(), *limits))


def check_degenerate_benchmark(s: MarketScenario, q: float) -> DegenerateBenchmarkReport:
    """Feasibility check for a benchmark with beta = 0."""
    inf_ra = inf_r_minus_alpha(s)
    return DegenerateBenchmarkReport(inf_ra, q, bool(inf_ra >= q))
