"""Batch experiment driver.

Subcommands (all take a JSON config path unless noted):

    run-discrete     realized trajectories, one CSV per grid step size
    run-ode          deterministic surrogate path and endpoint value
    run-sde          surrogate endpoint batch with mean / standard error
    weak-error       weak errors over the h grid with the fitted order
    expansion-check  residuals after subtracting the leading error term
    convergence      refit the order from an existing report.json

Every run writes a manifest.json echoing the config, the seed, and library
versions; rerunning from the echoed config reproduces outputs byte for
byte.  Exit codes: 0 success, 2 config validation failure (all violations
reported together), 3 diverged run (partial outputs retained).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy
import scipy.integrate

from . import __version__
from .augment import AugmentedSystem
from .continuous import SurrogateSpec, capital_phi_profile, ode_path, sde_endpoint_batch
from .discrete import DiscreteConfig, DivergenceError, run_trajectory
from .observables import OBSERVABLES, make_observable
from .problems import (
    GradientFamily,
    QuadraticFamilySpec,
    ou_family,
    quadratic_family,
    random_quadratic_family,
    scalar_affine_family,
    tanh_family,
    two_member_linear,
)
from .schedules import Schedule, validate as validate_schedule
from .weakerror import WeakErrorReport, convergence_fit, expansion_residual, study_grid

_SCHEDULE_KINDS = ("constant", "exponential", "polynomial", "tabulated")
_SURROGATES = ("ode", "sde1", "sde2")
_MODES = ("sgd", "momentum")


# ---------------------------------------------------------------------------
# Config parsing and validation
# ---------------------------------------------------------------------------


class ConfigError(Exception):
    """Carries the full list of validation messages."""

    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


def _build_schedule(node, path, violations) -> Schedule | None:
    if not isinstance(node, dict) or "kind" not in node:
        violations.append(f"{path}: schedule must be an object with a 'kind'")
        return None
    kind = node["kind"]
    try:
        if kind == "constant":
            return Schedule.constant(node.get("a", 1.0))
        if kind == "exponential":
            return Schedule.exponential(node.get("a", 1.0), node.get("rate", 0.0))
        if kind == "polynomial":
            return Schedule.polynomial(node.get("a", 1.0), node.get("exponent", 0.0))
        if kind == "tabulated":
            return Schedule.tabulated(node["times"], node["values"])
    except (KeyError, ValueError, TypeError) as exc:
        violations.append(f"{path}: {exc}")
        return None
    violations.append(f"{path}: unknown schedule kind {kind!r}; expected one of {_SCHEDULE_KINDS}")
    return None


def _build_schedules(node, dim, path, violations, t_max) -> tuple[Schedule, ...] | None:
    nodes = node if isinstance(node, list) else [node] * dim
    if len(nodes) != dim:
        violations.append(f"{path}: expected {dim} schedules (one per coordinate), got {len(nodes)}")
        return None
    out = []
    for j, sub in enumerate(nodes):
        sched = _build_schedule(sub, f"{path}[{j}]", violations)
        if sched is None:
            return None
        for msg in validate_schedule(sched, t_max=t_max):
            violations.append(f"{path}[{j}]: {msg}")
        out.append(sched)
    return tuple(out)


def _build_family(node, path, violations) -> GradientFamily | None:
    if not isinstance(node, dict) or "kind" not in node:
        violations.append(f"{path}: problem must be an object with a 'kind'")
        return None
    kind = node.get("kind")
    try:
        if kind == "two_member_linear":
            fam = two_member_linear(node.get("slopes", (1.0, 2.0)), node.get("probs", (0.5, 0.5)))
        elif kind == "scalar_affine":
            fam = scalar_affine_family(node["slopes"], node.get("offsets"), node.get("probs"))
        elif kind == "ou":
            fam = ou_family(node.get("rate", 1.0), node.get("noise", 1.0))
        elif kind == "quadratic":
            if "csv" in node:
                spec = QuadraticFamilySpec.from_csv(node["csv"], node["probs"])
            else:
                spec = QuadraticFamilySpec(
                    matrices=np.asarray(node["matrices"], dtype=float),
                    centers=np.asarray(node["centers"], dtype=float),
                    probabilities=np.asarray(node["probs"], dtype=float),
                )
            fam = quadratic_family(spec)
        elif kind == "random_quadratic":
            fam = random_quadratic_family(
                node["dim"], node.get("members", 2), node.get("seed", 0)
            )
        elif kind == "tanh":
            fam = tanh_family(node["scales"], node["centers"], node.get("probs"))
        else:
            violations.append(f"{path}.kind: unknown problem kind {kind!r}")
            return None
    except (KeyError, ValueError, TypeError, OSError) as exc:
        violations.append(f"{path}: {exc}")
        return None
    if node.get("analytic_jacobian", True) is False:
        fam = dataclasses.replace(fam, jacobians=None, constant_jacobian=False)
    return fam


@dataclasses.dataclass
class Experiment:
    """Validated, fully built experiment inputs."""

    raw: dict
    family: GradientFamily
    lr_schedules: tuple[Schedule, ...]
    momentum_schedules: tuple[Schedule, ...] | None
    mode: str
    surrogate: str
    horizon: float
    h_grid: list[float]
    x0: np.ndarray
    x1: np.ndarray | None
    observable_name: str
    observable_params: dict
    samples: int
    surrogate_samples: int | None
    seed: int
    substep: float
    fd_space: float
    fd_time: float
    fd_jacobian: bool
    quadrature_nodes: int
    min_fit_points: int
    threads: int
    output_dir: Path

    def observable(self):
        return make_observable(self.observable_name, **self.observable_params)

    def discrete_config(self, h: float) -> DiscreteConfig:
        return DiscreteConfig(
            family=self.family,
            lr_schedules=self.lr_schedules,
            momentum_schedules=self.momentum_schedules,
            h=h,
            horizon=self.horizon,
            x0=self.x0,
            x1=self.x1,
            seed=self.seed,
        )

    def surrogate_spec(self, h: float) -> SurrogateSpec:
        augmented = None
        if self.mode == "momentum":
            augmented = AugmentedSystem(
                family=self.family,
                lr_schedules=self.lr_schedules,
                momentum_schedules=self.momentum_schedules,
                h=h,
            )
        substep = self.substep
        if self.surrogate != "ode":
            substep = min(substep, h / 4.0)
        if augmented is not None:
            # The pair gap relaxes on the h timescale; resolve it.
            substep = min(substep, h / 20.0)
        return SurrogateSpec(
            kind=self.surrogate,
            family=self.family,
            lr_schedules=self.lr_schedules,
            horizon=self.horizon,
            h=None if self.surrogate == "ode" else h,
            substep=substep,
            augmented=augmented,
            fd_jacobian=self.fd_jacobian,
        )


def parse_experiment(raw: dict, seed_override: int | None = None, threads_override: int | None = None,
                     out_override: str | None = None, needs_surrogate: bool = True) -> Experiment:
    violations: list[str] = []

    horizon = raw.get("horizon")
    if not isinstance(horizon, (int, float)) or horizon <= 0:
        violations.append("horizon: must be a positive number")
        horizon = 1.0

    grid = raw.get("h_grid")
    if not isinstance(grid, list) or not grid:
        violations.append("h_grid: must be a nonempty list of step sizes")
        grid = [0.1]
    else:
        for k, h in enumerate(grid):
            if not isinstance(h, (int, float)) or not 0.0 < h < 1.0:
                violations.append(f"h_grid[{k}]: h must lie in (0, 1), got {h!r}")
            else:
                ratio = horizon / h
                if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                    violations.append(f"h_grid[{k}]: T/h not an integer (T={horizon}, h={h})")
        if any(b >= a for a, b in zip(grid, grid[1:])):
            violations.append("h_grid: must be sorted strictly descending")

    family = _build_family(raw.get("problem"), "problem", violations)
    dim = family.dim if family is not None else 1

    lr = None
    if "schedules" not in raw:
        violations.append("schedules: missing")
    else:
        lr = _build_schedules(raw["schedules"], dim, "schedules", violations, t_max=horizon)

    momentum = None
    if raw.get("momentum") is not None:
        momentum = _build_schedules(raw["momentum"], dim, "momentum", violations, t_max=horizon)

    mode = raw.get("mode", "sgd")
    if mode not in _MODES:
        violations.append(f"mode: must be one of {_MODES}, got {mode!r}")
        mode = "sgd"
    if mode == "momentum" and momentum is None:
        violations.append("momentum: required for momentum mode (zero momentum is plain sgd)")

    surrogate = raw.get("surrogate", "ode")
    if surrogate not in _SURROGATES:
        violations.append(f"surrogate: must be one of {_SURROGATES}, got {surrogate!r}")
        surrogate = "ode"

    fd_jacobian = bool(raw.get("fd_jacobian", False))
    if (
        surrogate == "sde2"
        and family is not None
        and family.jacobians is None
        and not fd_jacobian
    ):
        violations.append("surrogate: second-order drift requires Jacobian or FD fallback enabled")

    x0 = np.atleast_1d(np.asarray(raw.get("x0", 1.0), dtype=float))
    if family is not None and x0.shape != (family.dim,):
        violations.append(f"x0: expected {family.dim} coordinates, got {x0.shape[0]}")
    x1 = raw.get("x1")
    if x1 is not None:
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        if family is not None and x1.shape != (family.dim,):
            violations.append(f"x1: expected {family.dim} coordinates, got {x1.shape[0]}")
    if mode == "momentum" and x1 is None and needs_surrogate:
        # A bootstrapped first iterate is a random variable; the surrogate
        # initial pair (x1, x0) must be definite.  Plain trajectory export
        # may still bootstrap.
        violations.append("x1: momentum-mode studies need an explicit first iterate "
                          "so the surrogate initial pair is definite")

    obs = raw.get("observable", {"name": "coordinate"})
    obs_name = obs.get("name") if isinstance(obs, dict) else None
    obs_params = {k: v for k, v in obs.items() if k != "name"} if isinstance(obs, dict) else {}
    if obs_name not in OBSERVABLES:
        violations.append(f"observable.name: unknown observable {obs_name!r}")
        obs_name = "coordinate"
        obs_params = {}

    samples = raw.get("samples", 10_000)
    if not isinstance(samples, int) or samples < 100:
        violations.append(f"samples: need an integer >= 100, got {samples!r}")
        samples = 100

    substep = float(raw.get("substep", 1e-3))
    if substep <= 0:
        violations.append("substep: must be positive")
        substep = 1e-3
    if surrogate == "ode" and grid and substep > min(grid):
        violations.append(f"substep: must not exceed the finest h ({min(grid)}) for the ode surrogate")

    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    threads = threads_override if threads_override is not None else raw.get("threads", 1)
    threads = int(os.environ.get("SGDFLOW_THREADS", threads))
    out_dir = Path(out_override if out_override is not None else raw.get("output_dir", "sgdflow-out"))

    if violations:
        raise ConfigError(violations)

    return Experiment(
        raw=raw,
        family=family,
        lr_schedules=lr,
        momentum_schedules=momentum,
        mode=mode,
        surrogate=surrogate,
        horizon=float(horizon),
        h_grid=[float(h) for h in grid],
        x0=x0,
        x1=x1,
        observable_name=obs_name,
        observable_params=obs_params,
        samples=samples,
        surrogate_samples=raw.get("surrogate_samples"),
        seed=int(seed),
        substep=substep,
        fd_space=float(raw.get("fd_space", 1e-4)),
        fd_time=float(raw.get("fd_time", 1e-4)),
        fd_jacobian=fd_jacobian,
        quadrature_nodes=int(raw.get("quadrature_nodes", 101)),
        min_fit_points=int(raw.get("min_fit_points", 4)),
        threads=max(1, threads),
        output_dir=out_dir,
    )


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError([f"{path}: {exc}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"])


def _write_json(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(exp: Experiment, command: str):
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    config = dict(exp.raw)
    config["seed"] = exp.seed
    _write_json(
        exp.output_dir / "manifest.json",
        {
            "command": command,
            "config": config,
            "seed": exp.seed,
            "versions": {
                "sgdflow": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": sys.version.split()[0],
            },
        },
    )


def _mapper(exp: Experiment):
    if exp.threads > 1:
        pool = ThreadPoolExecutor(max_workers=exp.threads)
        return pool, pool.map
    return None, map


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_run_discrete(exp: Experiment) -> int:
    _write_manifest(exp, "run-discrete")
    traj_dir = exp.output_dir / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)
    block = int(round(exp.horizon / min(exp.h_grid)))
    for h in exp.h_grid:
        cfg = exp.discrete_config(h)
        try:
            traj = run_trajectory(cfg, mode=exp.mode, block=block)
        except DivergenceError as exc:
            if exc.partial is not None:
                exc.partial.to_csv(traj_dir / f"traj_h{h:g}_partial.csv")
            raise
        traj.to_csv(traj_dir / f"traj_h{h:g}.csv")
    return 0


def _cmd_run_ode(exp: Experiment) -> int:
    _write_manifest(exp, "run-ode")
    h = exp.h_grid[0]
    spec = exp.surrogate_spec(h) if exp.surrogate == "ode" else dataclasses.replace(
        exp.surrogate_spec(h), kind="ode", h=None
    )
    x0 = exp.x0 if exp.mode == "sgd" else np.concatenate([exp.x1, exp.x0])
    times = np.linspace(0.0, exp.horizon, exp.quadrature_nodes)
    path = ode_path(spec, x0, times)
    g = exp.observable()
    import csv as _csv

    with open(exp.output_dir / "ode_path.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["t"] + [f"x_{j + 1}" for j in range(path.shape[1])])
        for t, row in zip(times, path):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    _write_json(
        exp.output_dir / "report.json",
        {"endpoint": [float(v) for v in path[-1]], "value": float(g(path[-1]))},
    )
    return 0


def _cmd_run_sde(exp: Experiment) -> int:
    _write_manifest(exp, "run-sde")
    h = exp.h_grid[0]
    if exp.surrogate == "ode":
        print("run-sde needs surrogate sde1 or sde2", file=sys.stderr)
        return 2
    spec = exp.surrogate_spec(h)
    x0 = exp.x0 if exp.mode == "sgd" else np.concatenate([exp.x1, exp.x0])
    ends = sde_endpoint_batch(spec, x0, 0.0, exp.horizon, exp.samples, exp.seed)
    g = exp.observable()
    values = np.asarray(g(ends), dtype=float)
    import csv as _csv

    with open(exp.output_dir / "sde_endpoints.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["sample"] + [f"x_{j + 1}" for j in range(ends.shape[1])])
        for i, row in enumerate(ends):
            writer.writerow([i] + [repr(float(v)) for v in row])
    _write_json(
        exp.output_dir / "report.json",
        {
            "mean": float(values.mean()),
            "se": float(values.std(ddof=1) / np.sqrt(len(values))),
            "samples": exp.samples,
            "h": h,
        },
    )
    return 0


def _run_study(exp: Experiment):
    g = exp.observable()
    base_cfg = exp.discrete_config(exp.h_grid[0])
    pool, map_fn = _mapper(exp)
    try:
        points = study_grid(
            base_cfg,
            exp.h_grid,
            exp.surrogate_spec,
            g,
            exp.samples,
            mode=exp.mode,
            surrogate_samples=exp.surrogate_samples,
            map_fn=map_fn,
        )
    finally:
        if pool is not None:
            pool.shutdown()
    return g, points


def _export_sample_trajectories(exp: Experiment):
    traj_dir = exp.output_dir / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)
    block = int(round(exp.horizon / min(exp.h_grid)))
    for h in exp.h_grid:
        traj = run_trajectory(exp.discrete_config(h), mode=exp.mode, block=block)
        traj.to_csv(traj_dir / f"traj_h{h:g}.csv")


def _cmd_weak_error(exp: Experiment) -> int:
    _write_manifest(exp, "weak-error")
    _export_sample_trajectories(exp)
    g, points = _run_study(exp)
    try:
        fit = convergence_fit(points, min_points=exp.min_fit_points)
    except ValueError as exc:
        print(f"order fit skipped: {exc}", file=sys.stderr)
        fit = None
    report = WeakErrorReport(
        observable=g.name,
        horizon=exp.horizon,
        surrogate=exp.surrogate,
        points=tuple(points),
        fit=fit,
    )
    report.to_json(exp.output_dir / "report.json")
    report.to_csv(exp.output_dir / "report.csv")
    report.loglog_csv(exp.output_dir / "loglog.csv")
    if fit is not None:
        print(f"fitted order: {fit.slope:.4f}  (95% CI [{fit.ci_low:.4f}, {fit.ci_high:.4f}])")
    return 0


def _cmd_expansion_check(exp: Experiment) -> int:
    _write_manifest(exp, "expansion-check")
    g, points = _run_study(exp)
    spec = exp.surrogate_spec(exp.h_grid[0])
    if spec.kind != "ode":
        print("expansion-check uses the ode surrogate", file=sys.stderr)
        return 2
    x0 = exp.x0 if exp.mode == "sgd" else np.concatenate([exp.x1, exp.x0])
    nodes = exp.quadrature_nodes if exp.quadrature_nodes % 2 else exp.quadrature_nodes + 1
    times = np.linspace(0.0, exp.horizon, nodes)
    profile = capital_phi_profile(spec, g, x0, times, eps_x=exp.fd_space, eps_t=exp.fd_time)
    import csv as _csv

    with open(exp.output_dir / "phi_profile.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["t", "capital_phi"])
        for t, v in zip(times, profile):
            writer.writerow([repr(float(t)), repr(float(v))])
    integral = float(scipy.integrate.simpson(profile, x=times))
    residuals = expansion_residual(points, integral)
    try:
        fit = convergence_fit(residuals, min_points=exp.min_fit_points)
    except ValueError as exc:
        print(f"residual order fit skipped: {exc}", file=sys.stderr)
        fit = None
    report = WeakErrorReport(
        observable=g.name,
        horizon=exp.horizon,
        surrogate="ode-expansion",
        points=tuple(residuals),
        fit=fit,
    )
    report.to_json(exp.output_dir / "report.json")
    report.to_csv(exp.output_dir / "report.csv")
    report.loglog_csv(exp.output_dir / "loglog.csv")
    payload = report.to_dict()
    payload["leading_error_integral"] = integral
    _write_json(exp.output_dir / "expansion.json", payload)
    if fit is not None:
        print(f"residual order: {fit.slope:.4f}")
    return 0


def _cmd_convergence(report_path: str, min_points: int) -> int:
    with open(report_path) as fh:
        data = json.load(fh)
    from .weakerror import GridPointResult

    points = [
        GridPointResult(
            h=h,
            discrete_mean=dm,
            discrete_se=dse,
            surrogate_value=sv,
            surrogate_se=sse,
        )
        for h, dm, dse, sv, sse in zip(
            data["grid"],
            data["discrete_mean"],
            data["discrete_se"],
            data["surrogate_value"],
            data["surrogate_se"],
        )
    ]
    fit = convergence_fit(points, min_points=min_points)
    print(f"fitted order: {fit.slope:.4f}  (95% CI [{fit.ci_low:.4f}, {fit.ci_high:.4f}])")
    if fit.excluded:
        print(f"excluded (|error| <= 3 SE): {sorted(fit.excluded)}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sgdflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads (env SGDFLOW_THREADS overrides)")
        p.add_argument("--out", default=None, help="output directory")
        return p

    add_run("run-discrete", "export realized trajectories")
    add_run("run-ode", "integrate the deterministic surrogate")
    add_run("run-sde", "sample surrogate endpoints")
    add_run("weak-error", "weak errors across the h grid")
    add_run("expansion-check", "residuals after the leading error term")
    conv = sub.add_parser("convergence", help="refit the order from a report.json")
    conv.add_argument("report", help="path to a weak-error report.json")
    conv.add_argument("--min-points", type=int, default=4)

    args = parser.parse_args(argv)

    if args.command == "convergence":
        return _cmd_convergence(args.report, args.min_points)

    try:
        raw = _load_config(args.config)
        exp = parse_experiment(
            raw,
            seed_override=args.seed,
            threads_override=args.threads,
            out_override=args.out,
            needs_surrogate=args.command != "run-discrete",
        )
    except ConfigError as exc:
        for msg in exc.violations:
            print(f"config error: {msg}", file=sys.stderr)
        return 2

    handlers = {
        "run-discrete": _cmd_run_discrete,
        "run-ode": _cmd_run_ode,
        "run-sde": _cmd_run_sde,
        "weak-error": _cmd_weak_error,
        "expansion-check": _cmd_expansion_check,
    }
    try:
        return handlers[args.command](exp)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
