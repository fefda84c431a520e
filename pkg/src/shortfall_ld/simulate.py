"""Euler-Maruyama Monte Carlo for the factor and the time-averaged log ratio.

Several *legs* (portfolio plus optional Girsanov tilt) are driven by the same
Brownian increments, so comparisons between portfolios use common random
numbers.  Path ``i`` draws its normals from a Philox stream keyed by
``(seed, i)``; chunks of paths may run on worker threads and every result is
stored by path index, so the output does not depend on the thread count.

Under a tilt ``d(x)`` the simulated noise is the tilted Brownian motion and::

    dX = (theta(X) + sigma d(X)) dt + sigma dW
    dL = M(u, X) dt + N(u, X)^T (dW + d(X) dt)
    d log w = -d(X)^T dW - |d(X)|^2 dt / 2

so that ``w`` is the density of the original measure with respect to the tilted one.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from . import bellman1d, gaussian
from . import dual
from .dual import PortfolioPolicy
from .model import LINEAR, MarketScenario

EXPLOSION = 1e6
MAX_FLAGGED = 1e-3


class SimulationError(RuntimeError):
    pass


class PathExplosionError(SimulationError):
    pass


def default_threads() -> int:
    env = os.environ.get("SHORTFALL_LD_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# tilts and legs

@dataclass(frozen=True, eq=False)
class Tilt:
    """Girsanov drift: affine ``E x + e`` or a table over a scalar factor."""

    E: np.ndarray | None = None
    e: np.ndarray | None = None
    xs: np.ndarray | None = None
    table: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.E is None) == (self.xs is None):
            raise ValueError("give either (E, e) or (xs, table)")

    @classmethod
    def from_riccati(cls, sol: gaussian.RiccatiSolution, s: MarketScenario) -> Tilt:
        E, e = gaussian.tilt_affine(sol, s if s.kind == LINEAR else s.to_linear())
        return cls(E=E, e=e)

    @classmethod
    def from_grid(cls, sol: bellman1d.GridSolution, s: MarketScenario) -> Tilt:
        return cls(xs=sol.xs.copy(), table=bellman1d.tilt_table(sol, s))

    @classmethod
    def from_artifacts(cls, art, s: MarketScenario) -> Tilt:
        if isinstance(art, gaussian.RiccatiSolution):
            return cls.from_riccati(art, s)
        return cls.from_grid(art, s)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.E is not None:
            return x @ self.E.T + self.e
        return np.stack([np.interp(x[..., 0], self.xs, self.table[:, j])
                         for j in range(self.table.shape[1])], axis=-1)


@dataclass(frozen=True, eq=False)
class Leg:
    policy: PortfolioPolicy | None = None
    tilt: Tilt | None = None


# ---------------------------------------------------------------------------
# kernel

@numba.njit(cache=True, nogil=True)
def _interp(x, x0, h, tab, out):
    m = tab.shape[0]
    pos = (x - x0) / h
    if pos <= 0.0:
        for j in range(out.size):
            out[j] = tab[0, j]
        return
    if pos >= m - 1:
        for j in range(out.size):
            out[j] = tab[m - 1, j]
        return
    i = int(pos)
    if i > m - 2:
        i = m - 2
    fr = pos - i
    for j in range(out.size):
        out[j] = tab[i, j] + fr * (tab[i + 1, j] - tab[i, j])


@numba.njit(cache=True, nogil=True)
def _path_kernel(
    gen, p, n_steps, x_init, dt, rec,
    # drifts: affine part plus amplitude * tanh(scale * x[0])
    a2, A1, a_amp, a_sc, r2, r1, r_amp, r_sc, al2, al1, al_amp, al_sc,
    th2, Th1, th_amp, th_sc, saturating,
    b, beta, sigma, c,
    # legs
    pkind, K, k0, tau, ptab_x0, ptab_h, ptab,
    tkind, E, e, ttab_x0, ttab_h, ttab,
    want_mom,
    out_L, out_lw, out_x, out_flag, out_m1, out_m2,
):
    """Advance every leg of path ``p`` on one shared stream of normals."""
    k = beta.size
    n = a2.size
    l = th2.size
    H = rec.size
    G = pkind.size
    sq = np.sqrt(dt)
    beta_sq = 0.0
    for j in range(k):
        beta_sq += beta[j] * beta[j]
    x = np.empty((G, l))
    for g in range(G):
        for m in range(l):
            x[g, m] = x_init[m]
    L = np.zeros(G)
    lw = np.zeros(G)
    alive = np.ones(G, dtype=np.bool_)
    a = np.empty(n)
    th = np.empty(l)
    u = np.empty(n)
    N = np.empty(k)
    d = np.empty(k)
    dW = np.empty(k)
    h = 0
    for step in range(n_steps):
        for j in range(k):
            dW[j] = sq * gen.standard_normal()
        for g in range(G):
            if not alive[g]:
                continue
            # coefficients
            for i in range(n):
                v = a2[i]
                for m in range(l):
                    v += A1[i, m] * x[g, m]
                a[i] = v
            r = r2
            al = al2
            for m in range(l):
                r += r1[m] * x[g, m]
                al += al1[m] * x[g, m]
            for m in range(l):
                v = th2[m]
                for mm in range(l):
                    v += Th1[m, mm] * x[g, mm]
                th[m] = v
            if saturating:
                tx = x[g, 0]
                for i in range(n):
                    a[i] += a_amp[i] * np.tanh(a_sc[i] * tx)
                r += r_amp * np.tanh(r_sc * tx)
                al += al_amp * np.tanh(al_sc * tx)
                th[0] += th_amp * np.tanh(th_sc * tx)
            # portfolio, zero outside the closed ball of radius tau
            inside = True
            if tau[g] < np.inf:
                nrm = 0.0
                for m in range(l):
                    nrm += x[g, m] * x[g, m]
                inside = np.sqrt(nrm) <= tau[g]
            if pkind[g] == 0 or not inside:
                for i in range(n):
                    u[i] = 0.0
            elif pkind[g] == 1:
                for i in range(n):
                    v = k0[g, i]
                    for m in range(l):
                        v += K[g, i, m] * x[g, m]
                    u[i] = v
            else:
                _interp(x[g, 0], ptab_x0[g], ptab_h[g], ptab[g], u)
            # drift and volatility of the log ratio
            M = r - al + 0.5 * beta_sq
            for i in range(n):
                cu = 0.0
                for ii in range(n):
                    cu += c[i, ii] * u[ii]
                M += u[i] * (a[i] - r - 0.5 * cu)
            for j in range(k):
                v = -beta[j]
                for i in range(n):
                    v += b[i, j] * u[i]
                N[j] = v
            # tilt
            if tkind[g] == 0:
                for j in range(k):
                    d[j] = 0.0
            elif tkind[g] == 1:
                for j in range(k):
                    v = e[g, j]
                    for m in range(l):
                        v += E[g, j, m] * x[g, m]
                    d[j] = v
            else:
                _interp(x[g, 0], ttab_x0[g], ttab_h[g], ttab[g], d)
            if want_mom:
                for m in range(l):
                    out_m1[g, p, h, m] += x[g, m] * dt
                    for mm in range(l):
                        out_m2[g, p, h, m, mm] += x[g, m] * x[g, mm] * dt
            # Euler step
            dL = M * dt
            dlw = 0.0
            dd = 0.0
            for j in range(k):
                dL += N[j] * (dW[j] + d[j] * dt)
                dlw -= d[j] * dW[j]
                dd += d[j] * d[j]
            L[g] += dL
            lw[g] += dlw - 0.5 * dd * dt
            for m in range(l):
                v = th[m] * dt
                for j in range(k):
                    v += sigma[m, j] * (dW[j] + d[j] * dt)
                x[g, m] += v
                if not (np.abs(x[g, m]) <= 1e6):
                    alive[g] = False
            if not alive[g]:
                out_flag[g, p] = True
                for hh in range(h, H):
                    out_L[g, p, hh] = np.nan
                    out_lw[g, p, hh] = np.nan
        if step + 1 == rec[h]:
            t = rec[h] * dt
            for g in range(G):
                if alive[g]:
                    out_L[g, p, h] = L[g] / t
                    out_lw[g, p, h] = lw[g]
            h += 1
            if h == H:
                break
    for g in range(G):
        for m in range(l):
            out_x[g, p, m] = x[g, m]


@numba.njit(cache=True, nogil=True)
def _affine_kernel(
    gen, p, n_steps, x_init, dt, rec, Th, th2, sigma, beta,
    Qin, qin, min_, Nin, nin, qout, mout, tau, tkind, E, e, ttab_x0, ttab_h, ttab,
    out_L, out_lw, out_x, out_flag,
):
    """Fast path for affine drifts and affine (possibly truncated) portfolios.

    Per leg ``M = x^T Qin x + qin.x + min_`` and ``N = Nin x + nin`` inside the
    truncation ball; outside it ``M = qout.x + mout`` and ``N = -beta``.  Tilts
    are affine or, for a scalar factor, tabulated.
    """
    k = beta.size
    l = th2.size
    H = rec.size
    G = tau.size
    sq = np.sqrt(dt)
    x = np.empty((G, l))
    for g in range(G):
        for m in range(l):
            x[g, m] = x_init[m]
    L = np.zeros(G)
    lw = np.zeros(G)
    alive = np.ones(G, dtype=np.bool_)
    dW = np.empty(k)
    dWt = np.empty(k)
    d = np.empty(k)
    dx = np.empty(l)
    h = 0
    for step in range(n_steps):
        for j in range(k):
            dW[j] = sq * gen.standard_normal()
        for g in range(G):
            if not alive[g]:
                continue
            inside = True
            if tau[g] < np.inf:
                nrm = 0.0
                for m in range(l):
                    nrm += x[g, m] * x[g, m]
                inside = np.sqrt(nrm) <= tau[g]
            if tkind[g] == 2:
                _interp(x[g, 0], ttab_x0[g], ttab_h[g], ttab[g], d)
            else:
                for j in range(k):
                    v = e[g, j]
                    for m in range(l):
                        v += E[g, j, m] * x[g, m]
                    d[j] = v
            dlw = 0.0
            dd = 0.0
            for j in range(k):
                v = d[j]
                dlw -= v * dW[j]
                dd += v * v
                dWt[j] = dW[j] + v * dt
            if inside:
                M = min_[g]
                for m in range(l):
                    acc = qin[g, m]
                    for mm in range(l):
                        acc += Qin[g, m, mm] * x[g, mm]
                    M += acc * x[g, m]
                dL = M * dt
                for j in range(k):
                    v = nin[g, j]
                    for m in range(l):
                        v += Nin[g, j, m] * x[g, m]
                    dL += v * dWt[j]
            else:
                M = mout[g]
                for m in range(l):
                    M += qout[g, m] * x[g, m]
                dL = M * dt
                for j in range(k):
                    dL -= beta[j] * dWt[j]
            L[g] += dL
            lw[g] += dlw - 0.5 * dd * dt
            for m in range(l):
                v = th2[m]
                for mm in range(l):
                    v += Th[m, mm] * x[g, mm]
                v *= dt
                for j in range(k):
                    v += sigma[m, j] * dWt[j]
                dx[m] = v
            for m in range(l):
                x[g, m] += dx[m]
                if not (np.abs(x[g, m]) <= 1e6):
                    alive[g] = False
            if not alive[g]:
                out_flag[g, p] = True
                for hh in range(h, H):
                    out_L[g, p, hh] = np.nan
                    out_lw[g, p, hh] = np.nan
        if step + 1 == rec[h]:
            t = rec[h] * dt
            for g in range(G):
                if alive[g]:
                    out_L[g, p, h] = L[g] / t
                    out_lw[g, p, h] = lw[g]
            h += 1
            if h == H:
                break
    for g in range(G):
        for m in range(l):
            out_x[g, p, m] = x[g, m]


def _affine_leg_arrays(s: MarketScenario, legs: Sequence[Leg]):
    """Quadratic/affine coefficients of every leg for :func:`_affine_kernel`."""
    lc = s.to_linear().linear
    G, n, l, k = len(legs), s.n, s.l, s.k
    c = s.c
    Qin, qin, min_ = np.zeros((G, l, l)), np.zeros((G, l)), np.zeros(G)
    Nin, nin = np.zeros((G, k, l)), np.zeros((G, k))
    qout = np.tile(lc.r1 - lc.alpha1, (G, 1))
    mout = np.full(G, lc.r2 - lc.alpha2 + 0.5 * s.beta_sq)
    tau = np.full(G, np.inf)
    tilts = _tilt_arrays(s, legs)
    for g, lg in enumerate(legs):
        if lg.policy is not None:
            K, k0 = lg.policy.K, lg.policy.k0
            tau[g] = lg.policy.tau
        else:
            K, k0 = np.zeros((n, l)), np.zeros(n)
        Q = K.T @ lc.G - 0.5 * K.T @ c @ K
        Qin[g] = 0.5 * (Q + Q.T)
        qin[g] = K.T @ lc.g0 + lc.G.T @ k0 - K.T @ c @ k0 + lc.r1 - lc.alpha1
        min_[g] = k0 @ lc.g0 - 0.5 * k0 @ c @ k0 + mout[g]
        Nin[g] = s.b.T @ K
        nin[g] = s.b.T @ k0 - s.beta
    drift = (np.array(lc.Theta1), np.array(lc.theta2), np.array(s.sigma), np.array(s.beta))
    return drift, (Qin, qin, min_, Nin, nin, qout, mout, tau) + tilts


def _is_affine_run(s: MarketScenario, legs: Sequence[Leg]) -> bool:
    return s.is_affine and all(lg.policy is None or lg.policy.K is not None for lg in legs)


def _drift_arrays(s: MarketScenario):
    """Affine-plus-tanh representation of the drifts for the kernel."""
    z = np.zeros
    if s.kind == LINEAR:
        lc = s.linear
        return (
            np.array(lc.a2), np.array(lc.A1), z(s.n), z(s.n),
            float(lc.r2), np.array(lc.r1), 0.0, 0.0,
            float(lc.alpha2), np.array(lc.alpha1), 0.0, 0.0,
            np.array(lc.theta2), np.array(lc.Theta1), 0.0, 0.0, False,
        )
    pc = s.parametric
    return (
        pc.a[:, 0].copy(), pc.a[:, 1:2].copy(), pc.a[:, 2].copy(), pc.a[:, 3].copy(),
        float(pc.r[0]), pc.r[1:2].copy(), float(pc.r[2]), float(pc.r[3]),
        float(pc.alpha[0]), pc.alpha[1:2].copy(), float(pc.alpha[2]), float(pc.alpha[3]),
        pc.theta[0:1].copy(), pc.theta[1:2].reshape(1, 1).copy(), float(pc.theta[2]),
        float(pc.theta[3]), not s.is_affine,
    )


def _table_params(xs: np.ndarray) -> tuple[float, float]:
    h = np.diff(xs)
    if not np.allclose(h, h[0], rtol=1e-9, atol=0.0):
        raise ValueError("tables must live on a uniform grid")
    return float(xs[0]), float(h[0])


def _tilt_arrays(s: MarketScenario, legs: Sequence[Leg]):
    G, l, k = len(legs), s.l, s.k
    tkind = np.zeros(G, np.int64)
    E = np.zeros((G, k, l))
    e = np.zeros((G, k))
    ttab_x0, ttab_h = np.zeros(G), np.ones(G)
    tsize = max([lg.tilt.table.shape[0] for lg in legs
                 if lg.tilt is not None and lg.tilt.table is not None] + [1])
    ttab = np.zeros((G, tsize, k))
    for g, lg in enumerate(legs):
        tl = lg.tilt
        if tl is None:
            continue
        if tl.E is not None:
            tkind[g] = 1
            E[g], e[g] = tl.E, tl.e
        else:
            if l != 1:
                raise ValueError("tabulated tilts need a scalar factor")
            tkind[g] = 2
            ttab_x0[g], ttab_h[g] = _table_params(tl.xs)
            m = tl.table.shape[0]
            ttab[g, :m] = tl.table
            ttab[g, m:] = tl.table[-1]
    return tkind, E, e, ttab_x0, ttab_h, ttab


def _leg_arrays(s: MarketScenario, legs: Sequence[Leg]):
    G, n, l = len(legs), s.n, s.l
    pkind = np.zeros(G, np.int64)
    K = np.zeros((G, n, l))
    k0 = np.zeros((G, n))
    tau = np.full(G, np.inf)
    ptab_x0, ptab_h = np.zeros(G), np.ones(G)
    psize = max([lg.policy.table.shape[0] for lg in legs
                 if lg.policy is not None and lg.policy.table is not None] + [1])
    ptab = np.zeros((G, psize, n))
    for g, lg in enumerate(legs):
        pol = lg.policy
        if pol is None:
            continue
        tau[g] = pol.tau
        if pol.K is not None:
            pkind[g] = 1
            K[g], k0[g] = pol.K, pol.k0
        else:
            if l != 1:
                raise ValueError("tabulated policies need a scalar factor")
            pkind[g] = 2
            ptab_x0[g], ptab_h[g] = _table_params(pol.xs)
            m = pol.table.shape[0]
            ptab[g, :m] = pol.table
            ptab[g, m:] = pol.table[-1]
    return (pkind, K, k0, tau, ptab_x0, ptab_h, ptab) + _tilt_arrays(s, legs)


def _record_steps(t_list: Sequence[float], dt: float) -> np.ndarray:
    t = np.asarray(t_list, dtype=float)
    steps = np.rint(t / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - t) > 1e-9 * np.maximum(1.0, t)):
        raise ValueError("every horizon must be a multiple of dt")
    if np.any(np.diff(steps) <= 0) or steps[0] <= 0:
        raise ValueError("horizons must be positive and increasing")
    return steps


def path_generator(seed: int, index: int) -> np.random.Generator:
    """Generator of path ``index``: a Philox stream keyed by ``(seed, index)``."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


# ---------------------------------------------------------------------------
# path simulation

@dataclass(frozen=True, eq=False)
class PathSample:
    """Per-leg, per-path results at every horizon of ``t_list``."""

    t_list: np.ndarray
    dt: float
    L: np.ndarray            # (legs, paths, horizons), time-averaged log ratio
    log_weight: np.ndarray   # (legs, paths, horizons)
    x_final: np.ndarray      # (legs, paths, l)
    flagged: np.ndarray      # (legs, paths)
    tilted: tuple[bool, ...]
    mom1: np.ndarray | None = None   # (legs, paths, horizons, l): int X ds over each segment
    mom2: np.ndarray | None = None   # (legs, paths, horizons, l, l)

    @property
    def n_paths(self) -> int:
        return self.L.shape[1]


def simulate_legs(
    s: MarketScenario,
    legs: Sequence[Leg],
    t_list: Sequence[float],
    dt: float,
    n_paths: int,
    seed: int,
    *,
    threads: int | None = None,
    chunk: int = 256,
    moments: bool = False,
    x0: np.ndarray | None = None,
    first_path: int = 0,
    force_generic: bool = False,
) -> PathSample:
    """Simulate every leg on the same ``n_paths`` noise paths up to ``max(t_list)``.

    Affine runs use a specialised kernel; ``force_generic`` disables it.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rec = _record_steps(t_list, dt)
    S, H, G = int(rec[-1]), rec.size, len(legs)
    if G == 0:
        raise ValueError("no legs to simulate")
    x_init = np.array(s.x0 if x0 is None else x0, dtype=float).reshape(s.l)
    fast = not moments and not force_generic and _is_affine_run(s, legs)

    out_L = np.zeros((G, n_paths, H))
    out_lw = np.zeros((G, n_paths, H))
    out_x = np.zeros((G, n_paths, s.l))
    out_flag = np.zeros((G, n_paths), dtype=np.bool_)
    if moments:
        m1 = np.zeros((G, n_paths, H, s.l))
        m2 = np.zeros((G, n_paths, H, s.l, s.l))
    else:
        m1 = np.zeros((G, 1, 1, s.l))
        m2 = np.zeros((G, 1, 1, s.l, s.l))

    if fast:
        adrift, alegs = _affine_leg_arrays(s, legs)

        def run(start: int) -> None:
            for i in range(start, min(start + chunk, n_paths)):
                _affine_kernel(
                    path_generator(seed, first_path + i), i, S, x_init, float(dt), rec,
                    *adrift, *alegs, out_L, out_lw, out_x, out_flag,
                )
    else:
        drift = _drift_arrays(s)
        legarr = _leg_arrays(s, legs)
        c = np.array(s.c)
        b, beta, sigma = np.array(s.b), np.array(s.beta), np.array(s.sigma)

        def run(start: int) -> None:
            for i in range(start, min(start + chunk, n_paths)):
                _path_kernel(
                    path_generator(seed, first_path + i), i, S, x_init, float(dt), rec, *drift,
                    b, beta, sigma, c, *legarr, moments, out_L, out_lw, out_x, out_flag, m1, m2,
                )

    starts = range(0, n_paths, chunk)
    workers = min(threads or default_threads(), len(starts))
    if workers <= 1:
        for st in starts:
            run(st)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, starts))

    frac = out_flag.mean(axis=1)
    if np.any(frac > MAX_FLAGGED):
        raise PathExplosionError(
            f"{frac.max():.2%} of paths exceeded |X| > {EXPLOSION:g}; reduce dt"
        )
    return PathSample(
        t_list=np.asarray(t_list, dtype=float), dt=float(dt), L=out_L, log_weight=out_lw,
        x_final=out_x, flagged=out_flag, tilted=tuple(lg.tilt is not None for lg in legs),
        mom1=m1 if moments else None, mom2=m2 if moments else None,
    )


@dataclass(frozen=True)
class SimConfig:
    t_list: tuple[float, ...]
    dt: float
    n_paths: int
    seed: int
    measure: str = "physical"
    policy: PortfolioPolicy | None = None
    q: float = 0.0
    tilt: Tilt | None = None
    threads: int | None = None
    chunk: int = 256

    def __post_init__(self) -> None:
        t = tuple(float(v) for v in self.t_list)
        object.__setattr__(self, "t_list", t)
        if not t or any(b <= a for a, b in zip(t, t[1:])) or t[0] <= 0:
            raise ValueError("t_list must be positive and increasing")
        if not self.dt > 0 or self.dt > t[0] / 100 * (1 + 1e-12):
            raise ValueError("dt must be positive and at most min(t_list)/100")
        if self.n_paths < 100:
            raise ValueError("n_paths must be at least 100")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.measure not in ("physical", "tilted"):
            raise ValueError("measure is 'physical' or 'tilted'")
        if self.measure == "tilted" and self.tilt is None:
            raise ValueError("a tilted run needs a tilt")

    @property
    def leg(self) -> Leg:
        return Leg(self.policy, self.tilt if self.measure == "tilted" else None)


def simulate_paths(s: MarketScenario, config: SimConfig) -> PathSample:
    return simulate_legs(
        s, [config.leg], config.t_list, config.dt, config.n_paths, config.seed,
        threads=config.threads, chunk=config.chunk,
    )


# ---------------------------------------------------------------------------
# estimation

@dataclass(frozen=True)
class MCEstimate:
    t: float
    p_hat: float
    stderr: float
    log_decay: float
    ess: float
    n_events: int = 0
    upper95: float = 1.0     # one-sided bound when no event was observed

    @property
    def rel_err(self) -> float:
        return self.stderr / self.p_hat if self.p_hat > 0 else np.inf


def _contributions(sample: PathSample, q: float, leg: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-path estimator values ``w 1{L <= q}`` and weights, shape (paths, horizons)."""
    ok = ~sample.flagged[leg]
    L = sample.L[leg]
    if sample.tilted[leg]:
        w = np.exp(sample.log_weight[leg])
    else:
        w = np.ones_like(L)
    w = np.where(ok[:, None], w, 0.0)
    ind = (L <= q) & ok[:, None]
    return np.where(ind, w, 0.0), w


def estimates_from_sample(sample: PathSample, q: float, leg: int = 0) -> list[MCEstimate]:
    vals, w = _contributions(sample, q, leg)
    P = sample.n_paths
    out = []
    for h, t in enumerate(sample.t_list):
        v = vals[:, h]
        p = float(np.mean(v))
        se = float(np.std(v, ddof=1) / np.sqrt(P))
        n_ev = int(np.count_nonzero(v))
        ess = float(np.sum(w[:, h]) ** 2 / np.sum(w[:, h] ** 2)) if sample.tilted[leg] else float(P)
        p = min(max(p, 0.0), 1.0)
        out.append(MCEstimate(
            t=float(t), p_hat=p, stderr=se,
            log_decay=float(-np.log(p) / t) if p > 0 else np.inf,
            ess=min(ess, float(P)), n_events=n_ev,
            upper95=float(1.0 - 0.05 ** (1.0 / P)) if n_ev == 0 else p,
        ))
    return out


def log_covariance(sample: PathSample, q: float, leg: int = 0) -> np.ndarray:
    """Delta-method covariance of ``-log p_hat`` across horizons (paths are shared)."""
    vals, _ = _contributions(sample, q, leg)
    p = vals.mean(axis=0)
    cov = np.cov(vals, rowvar=False, ddof=1) / sample.n_paths
    return np.atleast_2d(cov) / np.outer(p, p)


def estimate_shortfall(s: MarketScenario, config: SimConfig) -> list[MCEstimate]:
    return estimates_from_sample(simulate_paths(s, config), config.q)


def estimate_decay_rate(
    estimates: Sequence[MCEstimate], cov: np.ndarray | None = None
) -> tuple[float, float, float]:
    """Least-squares line through ``(t, -log p_hat)``: ``(slope, intercept, slope stderr)``.

    Weights come from the delta-method variances ``(stderr/p_hat)^2``, or from a full
    covariance ``cov`` when horizons share paths.  With zero reported errors the
    fit is ordinary least squares with a residual-based error.
    """
    est = [e for e in estimates if e.p_hat > 0]
    if len(est) < 3:
        raise ValueError("need at least three horizons with positive estimates")
    keep = [i for i, e in enumerate(estimates) if e.p_hat > 0]
    t = np.array([e.t for e in est])
    y = -np.log([e.p_hat for e in est])
    X = np.column_stack([t, np.ones_like(t)])
    if cov is not None:
        V = np.asarray(cov, dtype=float)[np.ix_(keep, keep)]
    else:
        V = np.diag([(e.stderr / e.p_hat) ** 2 for e in est])
    if np.all(np.diag(V) > 0):
        Vi = np.linalg.inv(V)
        covb = np.linalg.inv(X.T @ Vi @ X)
        beta = covb @ X.T @ Vi @ y
        return float(beta[0]), float(beta[1]), float(np.sqrt(covb[0, 0]))
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ beta
    dof = max(len(t) - 2, 1)
    s2 = float(res @ res) / dof
    covb = s2 * np.linalg.inv(X.T @ X)
    return float(beta[0]), float(beta[1]), float(np.sqrt(covb[0, 0]))


# ---------------------------------------------------------------------------
# ergodic averages

@dataclass(frozen=True)
class ErgodicDiagnostic:
    t: float
    mean_x: np.ndarray
    mean_xx: np.ndarray
    se_x: np.ndarray
    se_xx: np.ndarray
    batches: int

    def average(self, g: gaussian.Quadratic) -> tuple[float, float]:
        """Time average of the quadratic ``g`` and its batch-means standard error."""
        return self._avg_of(g, self.mean_x, self.mean_xx), self._se_of(g)

    @staticmethod
    def _avg_of(g, m1, m2):
        return float(np.sum(g.Q * m2) + g.q @ m1 + g.s0)

    def _se_of(self, g):
        vals = np.array([self._avg_of(g, a, b) for a, b in zip(self._b1, self._b2)])
        return float(np.std(vals, ddof=1) / np.sqrt(vals.size))

    _b1: np.ndarray = field(default=None, repr=False)
    _b2: np.ndarray = field(default=None, repr=False)


def ergodic_average_diagnostic(
    s: MarketScenario,
    tilt: Tilt | None,
    t_total: float,
    dt: float,
    seed: int,
    n_batches: int = 50,
    burn_in: float = 0.0,
) -> ErgodicDiagnostic:
    """Time averages of ``1, x, x x^T`` along one long path of the (tilted) factor.

    Standard errors come from ``n_batches`` batch means; the portfolio plays no role.
    """
    if n_batches < 2:
        raise ValueError("need at least two batches")
    seg = (t_total - burn_in) / n_batches
    t_list = burn_in + seg * np.arange(0 if burn_in > 0 else 1, n_batches + 1)
    sample = simulate_legs(s, [Leg(None, tilt)], t_list, dt, 1, seed, moments=True, chunk=1)
    m1 = sample.mom1[0, 0]
    m2 = sample.mom2[0, 0]
    if burn_in > 0:
        m1, m2 = m1[1:], m2[1:]
    b1 = m1 / seg
    b2 = m2 / seg
    return ErgodicDiagnostic(
        t=float(t_total - burn_in), mean_x=b1.mean(axis=0), mean_xx=b2.mean(axis=0),
        se_x=b1.std(axis=0, ddof=1) / np.sqrt(len(b1)),
        se_xx=b2.std(axis=0, ddof=1) / np.sqrt(len(b2)),
        batches=len(b1), _b1=b1, _b2=b2,
    )


# ---------------------------------------------------------------------------
# importance-sampling tilts for arbitrary portfolios

def policy_tilt(
    s: MarketScenario,
    q: float,
    policy: PortfolioPolicy | None,
    R: float | None = None,
    N: int = 2001,
) -> tuple[Tilt, dual.DualSolution]:
    """Tilt at the maximiser of the portfolio's own rate ``sup_lam (-lam q - Lambda(lam))``.

    ``Lambda`` is the scaled log-moment generating function of ``-L_t`` under
    ``policy``.  Affine untruncated portfolios on affine scenarios use the
    Riccati form; otherwise a scalar factor is required and the grid solver is used.
    """
    if policy is None:
        policy = PortfolioPolicy(0.0, K=np.zeros((s.n, s.l)), k0=np.zeros(s.n))
    if s.is_affine and policy.K is not None and np.isinf(policy.tau):
        ls = s.to_linear()
        sol = dual.shortfall_rate(q, dual.policy_gaussian_oracle(ls, policy.K, policy.k0),
                                  domain_limited=True)
        return Tilt.from_riccati(sol.artifacts, s), sol
    if s.l != 1:
        raise ValueError("tilts for truncated or tabulated portfolios need a scalar factor")
    if R is None:
        R = bellman1d.default_radius(0.0, s, n_std=12.0)
    sol = dual.shortfall_rate(q, dual.policy_grid_oracle(s, policy, R, N=N), domain_limited=True)
    return Tilt.from_grid(sol.artifacts, s), sol
