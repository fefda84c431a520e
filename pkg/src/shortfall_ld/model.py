"""Market scenarios: problem instances, scenario files and coefficient evaluation.

A scenario fixes the factor dynamics ``dX = theta(X) dt + sigma dW``, the ``n``
risky assets ``dS/S = a(X) dt + b dW``, the safe rate ``r(X)`` and the
benchmark ``dY/Y = alpha(X) dt + beta^T dW``.  Volatilities are constant; the
drifts are either affine in ``x`` (``linear_gaussian``) or, for a scalar
factor, of the form ``c0 + c1*x + c2*tanh(c3*x)`` (``parametric_1d``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

LINEAR = "linear_gaussian"
PARAMETRIC = "parametric_1d"
KINDS = (LINEAR, PARAMETRIC)
TABLES = {LINEAR: "linear", PARAMETRIC: "parametric_1d"}


class ScenarioError(ValueError):
    """Base class for invalid scenario input."""


class ScenarioParseError(ScenarioError):
    pass


class DimensionError(ScenarioError):
    pass


class DefinitenessError(ScenarioError):
    pass


def _frozen(a: Any, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.shape != shape:
        # leading singleton axes may be omitted, e.g. b = [0.2, 0, 0] for n = 1
        lead = len(shape) - arr.ndim
        if lead > 0 and all(d == 1 for d in shape[:lead]) and arr.shape == shape[lead:]:
            arr = arr.reshape(shape)
        else:
            raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ScenarioError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LinearCoefficients:
    """a(x) = A1 x + a2, r(x) = r1.x + r2, alpha(x) = alpha1.x + alpha2, theta(x) = Theta1 x + theta2."""

    A1: np.ndarray
    a2: np.ndarray
    r1: np.ndarray
    r2: float
    alpha1: np.ndarray
    alpha2: float
    Theta1: np.ndarray
    theta2: np.ndarray

    @property
    def G(self) -> np.ndarray:
        """Excess-return slope A1 - 1 r1^T."""
        return self.A1 - np.outer(np.ones(self.A1.shape[0]), self.r1)

    @property
    def g0(self) -> np.ndarray:
        """Excess-return intercept a2 - r2 1."""
        return self.a2 - self.r2


@dataclass(frozen=True, eq=False)
class SaturatedCoefficients:
    """Rows ``[c0, c1, c2, c3]`` of ``c0 + c1 x + c2 tanh(c3 x)`` for a scalar factor.

    ``a`` has one row per asset; ``r``, ``alpha`` and ``theta`` are single rows.
    """

    a: np.ndarray
    r: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray

    @staticmethod
    def evaluate(c: np.ndarray, x: np.ndarray) -> np.ndarray:
        return c[..., 0] + c[..., 1] * x + c[..., 2] * np.tanh(c[..., 3] * x)

    @staticmethod
    def derivative(c: np.ndarray, x: np.ndarray) -> np.ndarray:
        return c[..., 1] + c[..., 2] * c[..., 3] / np.cosh(c[..., 3] * x) ** 2

    @property
    def is_affine(self) -> bool:
        rows = np.vstack([self.a, self.r, self.alpha, self.theta])
        return bool(np.all(rows[:, 2] * rows[:, 3] == 0.0))


@dataclass(frozen=True, eq=False)
class CoefficientFrame:
    """Model coefficients at a factor point, or at a batch of points.

    For a batch ``x`` has shape ``(m, l)`` and ``a, r, alpha, theta`` carry the
    same leading axis; ``b, beta, sigma, c`` are constant in every scenario.
    """

    x: np.ndarray
    a: np.ndarray
    r: np.ndarray | float
    alpha: np.ndarray | float
    theta: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    c: np.ndarray
    c_inv: np.ndarray

    @property
    def excess(self) -> np.ndarray:
        """a(x) - r(x) 1."""
        return self.a - np.asarray(self.r)[..., None]


@dataclass(frozen=True, eq=False)
class MarketScenario:
    n: int
    l: int
    k: int
    kind: str
    b: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    x0: np.ndarray
    linear: LinearCoefficients | None = None
    parametric: SaturatedCoefficients | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ScenarioParseError(f"unknown scenario kind {self.kind!r}")
        if (self.kind == LINEAR) != (self.linear is not None) or (
            self.kind == PARAMETRIC
        ) != (self.parametric is not None):
            raise ScenarioParseError(f"coefficients do not match kind {self.kind!r}")
        if self.kind == PARAMETRIC and self.l != 1:
            raise DimensionError("parametric_1d scenarios need l = 1")

    # -- derived quantities -------------------------------------------------
    @property
    def c(self) -> np.ndarray:
        return self.b @ self.b.T

    @property
    def c_inv(self) -> np.ndarray:
        return _spd_inverse(self.c)

    @property
    def ss(self) -> np.ndarray:
        """sigma sigma^T."""
        return self.sigma @ self.sigma.T

    @property
    def beta_sq(self) -> float:
        return float(self.beta @ self.beta)

    @property
    def is_affine(self) -> bool:
        return self.kind == LINEAR or self.parametric.is_affine

    def drifts(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised ``(a, r, alpha, theta)`` at points ``xs`` of shape ``(m, l)``."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if self.kind == LINEAR:
            lc = self.linear
            return (
                xs @ lc.A1.T + lc.a2,
                xs @ lc.r1 + lc.r2,
                xs @ lc.alpha1 + lc.alpha2,
                xs @ lc.Theta1.T + lc.theta2,
            )
        pc = self.parametric
        x = xs[:, 0]
        ev = SaturatedCoefficients.evaluate
        a = ev(pc.a[None, :, :], x[:, None])
        return a, ev(pc.r, x), ev(pc.alpha, x), ev(pc.theta, x)[:, None]

    def to_linear(self) -> MarketScenario:
        """The same scenario in ``linear_gaussian`` form (affine scenarios only)."""
        if self.kind == LINEAR:
            return self
        if not self.is_affine:
            raise ScenarioError("scenario has saturating coefficients; no linear form")
        pc = self.parametric
        # tanh term vanishes identically, slope is c1 (c2*c3 == 0)
        lin = LinearCoefficients(
            A1=_ro(pc.a[:, 1:2]),
            a2=_ro(pc.a[:, 0]),
            r1=_ro(pc.r[1:2]),
            r2=float(pc.r[0]),
            alpha1=_ro(pc.alpha[1:2]),
            alpha2=float(pc.alpha[0]),
            Theta1=_ro(pc.theta[1:2].reshape(1, 1)),
            theta2=_ro(pc.theta[0:1]),
        )
        return dataclasses.replace(self, kind=LINEAR, linear=lin, parametric=None)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "dims": {"n": self.n, "l": self.l, "k": self.k},
            "kind": self.kind,
            "x0": self.x0.tolist(),
        }
        if self.name:
            d["name"] = self.name
        if self.kind == LINEAR:
            lc = self.linear
            d["linear"] = {
                "A1": lc.A1.tolist(),
                "a2": lc.a2.tolist(),
                "r1": lc.r1.tolist(),
                "r2": lc.r2,
                "alpha1": lc.alpha1.tolist(),
                "alpha2": lc.alpha2,
                "Theta1": lc.Theta1.tolist(),
                "theta2": lc.theta2.tolist(),
                "b": self.b.tolist(),
                "beta": self.beta.tolist(),
                "sigma": self.sigma.tolist(),
            }
        else:
            pc = self.parametric
            d["parametric_1d"] = {
                "a": pc.a.tolist(),
                "r": pc.r.tolist(),
                "alpha": pc.alpha.tolist(),
                "theta": pc.theta.tolist(),
                "b": self.b.tolist(),
                "beta": self.beta.tolist(),
                "sigma": self.sigma.tolist(),
            }
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _spd_inverse(m: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(m)
    Linv = np.linalg.solve(L, np.eye(m.shape[0]))
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


def min_eig(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])


def scenario_from_dict(
    d: dict[str, Any], *, allow_zero_beta: bool = False, check_definiteness: bool = True
) -> MarketScenario:
    """Build and validate a scenario from its parsed file contents."""
    try:
        dims = d["dims"]
        n, l, k = int(dims["n"]), int(dims["l"]), int(dims["k"])
        kind = d["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioParseError(f"missing or malformed dims/kind: {exc}") from exc
    if min(n, l, k) < 1:
        raise DimensionError("n, l and k must be positive")
    if kind not in KINDS:
        raise ScenarioParseError(f"unknown scenario kind {kind!r}")
    try:
        block = d[TABLES[kind]]
    except KeyError as exc:
        raise ScenarioParseError(f"missing [{TABLES[kind]}] table") from exc

    def get(name: str) -> Any:
        try:
            return block[name]
        except KeyError as exc:
            raise ScenarioParseError(f"{TABLES[kind]}.{name} missing") from exc

    try:
        b = _frozen(get("b"), (n, k), "b")
        beta = _frozen(get("beta"), (k,), "beta")
        sigma = _frozen(get("sigma"), (l, k), "sigma")
        x0 = _frozen(d.get("x0", [0.0] * l), (l,), "x0")
        linear = parametric = None
        if kind == LINEAR:
            linear = LinearCoefficients(
                A1=_frozen(get("A1"), (n, l), "A1"),
                a2=_frozen(get("a2"), (n,), "a2"),
                r1=_frozen(get("r1"), (l,), "r1"),
                r2=float(_frozen(get("r2"), (), "r2")),
                alpha1=_frozen(get("alpha1"), (l,), "alpha1"),
                alpha2=float(_frozen(get("alpha2"), (), "alpha2")),
                Theta1=_frozen(get("Theta1"), (l, l), "Theta1"),
                theta2=_frozen(get("theta2"), (l,), "theta2"),
            )
        else:
            if l != 1:
                raise DimensionError("parametric_1d scenarios need l = 1")
            parametric = SaturatedCoefficients(
                a=_frozen(get("a"), (n, 4), "a"),
                r=_frozen(get("r"), (4,), "r"),
                alpha=_frozen(get("alpha"), (4,), "alpha"),
                theta=_frozen(get("theta"), (4,), "theta"),
            )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioParseError(str(exc)) from exc

    s = MarketScenario(
        n=n, l=l, k=k, kind=kind, b=b, beta=beta, sigma=sigma, x0=x0,
        linear=linear, parametric=parametric, name=str(d.get("name", "")),
    )
    if check_definiteness:
        validate(s, allow_zero_beta=allow_zero_beta)
    return s


def validate(s: MarketScenario, *, allow_zero_beta: bool = False) -> None:
    """Eager checks of the standing scenario invariants."""
    if min_eig(s.c) <= 0.0:
        raise DefinitenessError("b b^T is not positive definite")
    if min_eig(s.ss) <= 0.0:
        raise DefinitenessError("sigma sigma^T is not positive definite")
    if s.beta_sq == 0.0 and not allow_zero_beta:
        raise DefinitenessError("benchmark volatility beta is zero")


def load_scenario(path: str | Path, *, allow_zero_beta: bool = False) -> MarketScenario:
    """Read a TOML or JSON scenario file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ScenarioParseError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            d = tomllib.loads(raw.decode())
        else:
            d = json.loads(raw)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ScenarioParseError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ScenarioParseError(f"{path}: top level must be a table")
    return scenario_from_dict(d, allow_zero_beta=allow_zero_beta)


def save_scenario(s: MarketScenario, path: str | Path) -> None:
    """Write ``s`` as JSON; floats use shortest round-trip repr."""
    Path(path).write_text(json.dumps(s.to_dict(), indent=2) + "\n")


def eval_coefficients(s: MarketScenario, x: np.ndarray) -> CoefficientFrame:
    """Coefficients at ``x`` (shape ``(l,)``) or at a batch (shape ``(m, l)``)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a, r, alpha, theta = s.drifts(x.reshape(-1, s.l))
    if single:
        a, r, alpha, theta = a[0], float(r[0]), float(alpha[0]), theta[0]
    return CoefficientFrame(
        x=x, a=a, r=r, alpha=alpha, theta=theta,
        b=s.b, beta=s.beta, sigma=s.sigma, c=s.c, c_inv=s.c_inv,
    )


def replace_coefficients(s: MarketScenario, **changes: Any) -> MarketScenario:
    """Copy of ``s`` with top-level or coefficient fields replaced (no validation)."""
    top = {f.name for f in dataclasses.fields(MarketScenario)}
    outer = {key: _ro(v) if key in ("b", "beta", "sigma", "x0") else v
             for key, v in changes.items() if key in top}
    inner = {key: v for key, v in changes.items() if key not in top}
    if inner:
        if s.kind == LINEAR:
            conv = {key: (float(v) if key in ("r2", "alpha2") else _ro(v)) for key, v in inner.items()}
            outer["linear"] = dataclasses.replace(s.linear, **conv)
        else:
            outer["parametric"] = dataclasses.replace(
                s.parametric, **{key: _ro(v) for key, v in inner.items()}
            )
    return dataclasses.replace(s, **outer)
