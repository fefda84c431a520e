"""Command-line interface: ``shortfall-ld <command> <scenario> [options]``.

Structured results go to stdout as JSON; curves as CSV with ``#``-prefixed JSON
header and footer lines.  Primary output depends only on the inputs and the
seed; run metadata (wall time, version) is written to stderr, or to the file
given by ``--report`` together with the full result.

Exit codes: 0 success, 1 validation failure, 2 solver failure, 3 input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Any, Sequence

import numpy as np

from . import __version__, bellman1d, dual, gaussian, simulate
from .conditions import check_all
from .model import LINEAR, MarketScenario, ScenarioError, load_scenario

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_INPUT = 0, 1, 2, 3


class InputError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def fmt(v: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    return "%.17g" % v


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, allow_nan=False)


class Output:
    """Collects primary output lines and the result dictionary of a command."""

    def __init__(self, command: str, s: MarketScenario | None, params: dict):
        self.lines: list[str] = []
        self.result: dict[str, Any] = {}
        self.header = {"command": command, "version": __version__, "parameters": params}
        if s is not None:
            self.header["scenario_digest"] = s.digest()

    def json(self, payload: dict) -> None:
        self.result = {**self.header, **payload}
        self.lines.append(dumps(self.result))

    def csv(self, head: dict, columns: Sequence[str], rows, foot: dict | None = None) -> None:
        self.result = {**self.header, **head}
        self.lines.append("# " + dumps(self.result))
        self.lines.append(",".join(columns))
        for r in rows:
            self.lines.append(",".join(fmt(v) for v in r))
        if foot is not None:
            self.result.update(foot)
            self.lines.append("# " + dumps(foot))

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def _plot_data(path: str | None, columns: Sequence[str], rows) -> None:
    if not path:
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for r in rows:
            fh.write(" ".join(fmt(v) for v in r) + "\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from exc


def _load(path: str, allow_zero_beta: bool = True) -> MarketScenario:
    try:
        return load_scenario(path, allow_zero_beta=allow_zero_beta)
    except ScenarioError as exc:
        raise InputError(str(exc)) from exc


def _method(s: MarketScenario, grid: bool) -> str:
    if grid or not s.is_affine:
        if s.l != 1:
            raise InputError("the grid method needs a scalar factor")
        return "grid"
    return "gaussian"


def _linear(s: MarketScenario) -> MarketScenario:
    return s if s.kind == LINEAR else s.to_linear()


# ---------------------------------------------------------------------------
# commands

def cmd_validate(args, out: Output) -> int:
    s = _load(args.scenario)
    rep = check_all(s, shell_radius=args.shell_radius)
    out.json({"conditions": rep.to_dict()})
    return EXIT_OK if rep.all_passed else EXIT_INVALID


def _rate_curve(s: MarketScenario, lams: np.ndarray, method: str, grid_kw: dict):
    rows = []
    for lam in lams:
        if method == "gaussian":
            sol = gaussian.rate_F(lam, _linear(s))
            rows.append((lam, sol.F, gaussian.rate_derivative(sol, _linear(s))))
        else:
            sol = bellman1d.solve_ergodic_hjb(lam, s, **grid_kw)
            rows.append((lam, sol.Lambda, bellman1d.rate_derivative_grid(sol, s)))
    return rows


def cmd_rate(args, out: Output) -> int:
    s = _load(args.scenario, allow_zero_beta=False)
    if args.lambdas:
        lams = np.array(_floats(args.lambdas))
    else:
        lams = np.linspace(args.lambda_min, args.lambda_max, args.points)
    if np.any(lams < 0):
        raise InputError("lambda values must be nonnegative")
    method = _method(s, args.grid)
    grid_kw = {"R": args.radius, "N": args.nodes}
    rows = _rate_curve(s, lams, method, grid_kw)
    F = np.array([r[1] for r in rows])
    foot: dict[str, Any] = {}
    if len(lams) >= 3:
        lin = bool(np.allclose(np.diff(lams), lams[1] - lams[0], rtol=1e-9))
        d2 = F[2:] - 2 * F[1:-1] + F[:-2] if lin else np.diff(np.diff(F) / np.diff(lams))
        foot["convex"] = bool(np.all(d2 >= -1e-8))
        foot["min_second_difference"] = float(d2.min())
    if method == "grid" and s.is_affine:
        Fg = np.array([r[1] for r in _rate_curve(s, lams, "gaussian", {})])
        err = float(np.max(np.abs(Fg - F)))
        foot["closed_form_max_abs_diff"] = err
        foot["closed_form_agrees"] = err <= 1e-4
    out.csv({"method": method}, ["lambda", "F", "dF"], rows, foot)
    _plot_data(args.emit_plot_data, ["lambda", "F", "dF"], rows)
    return EXIT_OK


def _solve(s: MarketScenario, q: float, grid: bool, radius, nodes) -> dual.DualSolution:
    method = _method(s, grid)
    kw = {"R": radius, "N": nodes} if method == "grid" else {}
    return dual.solve_shortfall(s, q, method=method, **kw)


def cmd_solve(args, out: Output) -> int:
    s = _load(args.scenario)
    try:
        sol = _solve(s, args.q, args.grid, args.radius, args.nodes)
    except dual.DegenerateBenchmarkError as exc:
        out.json({"refused": True, "message": str(exc)})
        return EXIT_INVALID
    pol = dual.build_policy(sol)
    payload = sol.to_dict()
    payload["policy"] = pol.to_dict()
    payload["saddle_check"] = dual.check_saddle(sol, s)
    payload["truncation_report"] = dual.check_truncation_conditions(sol, s).to_dict()
    out.json(payload)
    return EXIT_OK


def cmd_policy(args, out: Output) -> int:
    s = _load(args.scenario)
    if s.l != 1:
        raise InputError("policy tables are written for a scalar factor")
    sol = _solve(s, args.q, args.grid, args.radius, args.nodes)
    pol = dual.build_policy(sol)
    if args.tau is not None:
        pol = dual.truncate_policy(pol, args.tau)
    R = args.radius or (pol.xs[-1] if pol.xs is not None else 6.0 * float(
        np.sqrt(sol.artifacts.Sigma[0, 0])))
    xs = np.linspace(-R, R, args.table_nodes)
    u = pol(xs[:, None])
    cols = ["x"] + [f"u{i + 1}" for i in range(s.n)]
    rows = [(x, *ui) for x, ui in zip(xs, u)]
    head = {"lambda_hat": sol.lambda_hat, "J": sol.J, "form": pol.form,
            "tau": None if np.isinf(pol.tau) else pol.tau}
    if pol.K is not None:
        head.update(K=pol.K, k0=pol.k0)
    out.csv(head, cols, rows)
    _plot_data(args.emit_plot_data, cols, rows)
    return EXIT_OK


def cmd_simulate(args, out: Output) -> int:
    s = _load(args.scenario, allow_zero_beta=False)
    t_list = _floats(args.t)
    taus = _floats(args.tau) if args.tau else [np.inf]
    if any(not t > 0 for t in taus):
        raise InputError("tau must be positive")
    simulate.SimConfig(tuple(t_list), args.dt, args.paths, args.seed)  # raises on bad settings
    ref = _solve(s, args.q, args.grid, args.radius, args.nodes)
    if args.policy == "optimal":
        base = dual.build_policy(ref)
    elif args.policy == "kelly":
        xs = None if s.is_affine else bellman1d.make_grid(bellman1d.default_radius(0.0, s), args.nodes)
        base = dual.kelly_policy(s, xs)
    else:
        base = None
    legs, own = [], []
    for tau in taus:
        pol = base if base is None or np.isinf(tau) else dual.truncate_policy(base, tau)
        tilt = None
        own_J = None
        if args.tilted:
            if args.policy == "optimal" and np.isinf(tau):
                tilt = simulate.Tilt.from_artifacts(ref.artifacts, s)
                own_J = ref.J
            else:
                tilt, own_sol = simulate.policy_tilt(s, args.q, pol)
                own_J = own_sol.J
        legs.append(simulate.Leg(pol, tilt))
        own.append(own_J)
    sample = simulate.simulate_legs(s, legs, t_list, args.dt, args.paths, args.seed)

    rows, fits = [], []
    multi = len(taus) > 1
    for g, tau in enumerate(taus):
        est = simulate.estimates_from_sample(sample, args.q, g)
        for e in est:
            r = (e.t, e.p_hat, e.stderr, e.log_decay, e.ess)
            rows.append((tau, *r) if multi else r)
        fit: dict[str, Any] = {"tau": None if np.isinf(tau) else tau, "policy_rate": own[g],
                               "flagged_paths": int(sample.flagged[g].sum())}
        try:
            cov = simulate.log_covariance(sample, args.q, g)
            slope, icpt, se = simulate.estimate_decay_rate(est, cov)
            fit.update(slope=slope, intercept=icpt, slope_stderr=se)
        except (ValueError, np.linalg.LinAlgError):
            fit.update(slope=None, intercept=None, slope_stderr=None)
        fits.append(fit)
    cols = (["tau"] if multi else []) + ["t", "p_hat", "stderr", "log_decay", "ess"]
    head = {"measure": "tilted" if args.tilted else "physical", "policy": args.policy, "q": args.q}
    foot = {"J": ref.J, "lambda_hat": ref.lambda_hat, "fits": fits}
    out.csv(head, cols, rows, foot)
    _plot_data(args.emit_plot_data, cols, rows)
    return EXIT_OK


def cmd_bellman(args, out: Output) -> int:
    s = _load(args.scenario, allow_zero_beta=False)
    if s.l != 1:
        raise InputError("the grid solver needs a scalar factor")
    sol = bellman1d.solve_ergodic_hjb(args.lam, s, R=args.radius, N=args.nodes, tol=args.tol)
    rows = list(zip(sol.xs, sol.f, sol.fprime, sol.m))
    lo, hi = bellman1d.boundary_sensitivity(args.lam, s, sol.R, args.nodes)
    head = {"lambda": sol.lam, "Lambda": sol.Lambda, "residual_inf": sol.residual_inf, "R": sol.R,
            "iterations": sol.iterations, "Lambda_at_1.5R": hi,
            "derivative": bellman1d.rate_derivative_grid(sol, s)}
    out.csv(head, ["x", "f", "fprime", "m"], rows)
    _plot_data(args.emit_plot_data, ["x", "f", "fprime", "m"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="shortfall-ld", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def common(sp, q=False):
        sp.add_argument("scenario", help="scenario file (.toml or .json)")
        sp.add_argument("--report", help="write the full run report (with metadata) as JSON")
        if q:
            sp.add_argument("-q", type=float, required=True, help="shortfall threshold")
        return sp

    def grid_flags(sp):
        sp.add_argument("--grid", action="store_true", help="use the grid solver")
        sp.add_argument("--radius", type=float, default=None, help="grid half-width R")
        sp.add_argument("--nodes", type=int, default=2001, help="grid size N (odd)")

    sp = common(sub.add_parser("validate", help="check the standing hypotheses"))
    sp.add_argument("--shell-radius", type=float, default=50.0)
    sp.set_defaults(func=cmd_validate)

    sp = common(sub.add_parser("rate", help="tabulate F(lambda) and F'(lambda)"))
    sp.add_argument("--lambda-min", type=float, default=0.0)
    sp.add_argument("--lambda-max", type=float, default=5.0)
    sp.add_argument("--points", type=int, default=41)
    sp.add_argument("--lambdas", help="explicit comma-separated lambda values")
    sp.add_argument("--emit-plot-data", metavar="PATH")
    grid_flags(sp)
    sp.set_defaults(func=cmd_rate)

    sp = common(sub.add_parser("solve", help="solve the dual problem for the decay rate"), q=True)
    grid_flags(sp)
    sp.set_defaults(func=cmd_solve)

    sp = common(sub.add_parser("policy", help="tabulate the optimal feedback"), q=True)
    sp.add_argument("--tau", type=float, default=None, help="truncation radius")
    sp.add_argument("--table-nodes", type=int, default=201)
    sp.add_argument("--emit-plot-data", metavar="PATH")
    grid_flags(sp)
    sp.set_defaults(func=cmd_policy)

    sp = common(sub.add_parser("simulate", help="Monte Carlo shortfall probabilities"), q=True)
    sp.add_argument("--t", default="50,100,200,400", help="comma-separated horizons")
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--paths", type=int, default=200_000)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--tilted", action="store_true", help="importance sampling under the tilt")
    sp.add_argument("--tau", default=None, help="truncation radius, or a comma-separated sweep")
    sp.add_argument("--policy", choices=("optimal", "kelly", "none"), default="optimal")
    sp.add_argument("--emit-plot-data", metavar="PATH")
    grid_flags(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("bellman", help="grid solution of the ergodic equation"))
    sp.add_argument("--lambda", dest="lam", type=float, required=True)
    sp.add_argument("--radius", type=float, default=None)
    sp.add_argument("--nodes", type=int, default=2001)
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--emit-plot-data", metavar="PATH")
    sp.set_defaults(func=cmd_bellman)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    params = {k: v for k, v in vars(args).items() if k not in ("func", "report", "command")}
    try:
        out = Output(args.command, _load(args.scenario), params)
        code = args.func(args, out)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (np.linalg.LinAlgError, bellman1d.GridSolveError, dual.DualError,
            simulate.SimulationError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    sys.stdout.write(out.text())
    meta = {"wall_time_s": time.perf_counter() - t0, "version": __version__,
            "exit_code": code}
    print("# metadata " + dumps(meta), file=sys.stderr)
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(_jsonable({**out.result, "metadata": meta}), indent=2, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
