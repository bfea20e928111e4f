"""Weak-error estimation across a step-size grid and convergence-order fits.

The weak error at step size h is the difference of expectations

    E g(chi_{T/h})  -  (E) g(X_T)

between the discrete chain endpoint and the surrogate endpoint.  Discrete
expectations come from Monte Carlo over independent trajectories (or from
exact enumeration of member sequences when the family is small enough);
surrogate values are deterministic for the ode kind and Monte Carlo or
closed form for sde kinds.  Orders are fitted by least squares on
log |error| against log h, excluding grid points indistinguishable from
Monte Carlo noise.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .continuous import SurrogateSpec, ode_flow, sde_endpoint_batch
from .discrete import DiscreteConfig, simulate_batch
from .observables import Observable

__all__ = [
    "GridPointResult",
    "ConvergenceFit",
    "WeakErrorReport",
    "estimate_discrete_expectation",
    "exact_discrete_expectation",
    "surrogate_expectation",
    "weak_error",
    "convergence_fit",
    "expansion_residual",
]


@dataclass(frozen=True)
class GridPointResult:
    """Weak-error measurement at one step size."""

    h: float
    discrete_mean: float
    discrete_se: float
    surrogate_value: float
    surrogate_se: float

    @property
    def error(self) -> float:
        return self.discrete_mean - self.surrogate_value

    @property
    def se(self) -> float:
        return float(np.hypot(self.discrete_se, self.surrogate_se))


@dataclass(frozen=True)
class ConvergenceFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    n_used: int
    excluded: tuple[float, ...] = ()


@dataclass(frozen=True)
class WeakErrorReport:
    """Per-h weak errors with the fitted convergence order."""

    observable: str
    horizon: float
    surrogate: str
    points: tuple[GridPointResult, ...]
    fit: ConvergenceFit | None

    def to_dict(self) -> dict:
        return {
            "observable": self.observable,
            "horizon": self.horizon,
            "surrogate": self.surrogate,
            "grid": [p.h for p in self.points],
            "discrete_mean": [p.discrete_mean for p in self.points],
            "discrete_se": [p.discrete_se for p in self.points],
            "surrogate_value": [p.surrogate_value for p in self.points],
            "surrogate_se": [p.surrogate_se for p in self.points],
            "errors": [p.error for p in self.points],
            "se": [p.se for p in self.points],
            "slope": None if self.fit is None else self.fit.slope,
            "ci": None if self.fit is None else [self.fit.ci_low, self.fit.ci_high],
            "excluded": [] if self.fit is None else list(self.fit.excluded),
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["h", "discrete_mean", "discrete_se", "surrogate_value", "surrogate_se", "error", "se", "excluded"]
            )
            excluded = set() if self.fit is None else set(self.fit.excluded)
            for p in self.points:
                writer.writerow(
                    [repr(float(v)) for v in (p.h, p.discrete_mean, p.discrete_se, p.surrogate_value, p.surrogate_se, p.error, p.se)]
                    + [int(p.h in excluded)]
                )

    def loglog_csv(self, path):
        """Plot-ready (log h, log |error|) rows, fit-included points only."""
        excluded = set() if self.fit is None else set(self.fit.excluded)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["log_h", "log_abs_error"])
            for p in self.points:
                if p.h not in excluded and p.error != 0.0:
                    writer.writerow([repr(float(np.log(p.h))), repr(float(np.log(abs(p.error))))])


def estimate_discrete_expectation(
    cfg: DiscreteConfig,
    observable: Observable,
    n_samples: int,
    mode: str = "sgd",
    block: int | None = None,
) -> tuple[float, float]:
    """Monte Carlo mean of g at trajectory endpoints with its standard error."""
    if n_samples < 2:
        raise ValueError("need at least two samples for a standard error")
    endpoints = simulate_batch(cfg, mode, n_samples, block=block)
    values = np.asarray(observable(endpoints), dtype=float)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(n_samples))
    return mean, se


def exact_discrete_expectation(
    cfg: DiscreteConfig,
    observable: Observable,
    mode: str = "sgd",
    max_paths: int = 2**21,
) -> float:
    """E g(chi_{T/h}) by exact enumeration of all member sequences.

    Walks the full m^(T/h) tree of member draws with their probabilities;
    feasible when m**(T/h) <= max_paths.  Independent of the Monte Carlo
    sampler, which makes it a noise-free oracle for small benchmarks.
    """
    if mode not in ("sgd", "momentum"):
        raise ValueError("enumeration supports sgd and momentum modes")
    m = cfg.family.n_members
    M = cfg.n_steps
    if m**M > max_paths:
        raise ValueError(f"enumeration needs {m}^{M} paths > limit {max_paths}")
    d = cfg.family.dim
    states = cfg.x0.reshape(1, d).copy()
    prev = states.copy()
    weights = np.ones(1)
    probs = cfg.family.probabilities

    start = 0
    if mode == "momentum":
        if cfg.x1 is not None:
            prev, states = states, np.broadcast_to(cfg.x1, (1, d)).copy()
        else:
            eta0 = cfg.step_sizes(0)
            branches = [states + eta0 * cfg.family.member_drift(i, states) for i in range(m)]
            prev = np.concatenate([states] * m, axis=0)
            states = np.concatenate(branches, axis=0)
            weights = np.concatenate([weights * probs[i] for i in range(m)])
        start = 1

    for n in range(start, M):
        eta = cfg.step_sizes(n)
        zeta = cfg.momentum_values(n) if mode == "momentum" else None
        branches = []
        for i in range(m):
            nxt = states + eta * cfg.family.member_drift(i, states)
            if mode == "momentum":
                nxt = nxt + zeta * (states - prev)
            branches.append(nxt)
        if mode == "momentum":
            prev = np.concatenate([states] * m, axis=0)
        states = np.concatenate(branches, axis=0)
        weights = np.concatenate([weights * probs[i] for i in range(m)])

    values = np.asarray(observable(states), dtype=float)
    return float(weights @ values)


def surrogate_expectation(
    spec: SurrogateSpec,
    observable: Observable,
    x0,
    n_samples: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """(E) g(X_T): deterministic endpoint for ode, Monte Carlo for sde kinds.

    ``x0`` is the surrogate's full initial state (the pair (x1, x0) for
    momentum systems); the observable is applied to the first base-space
    block of the endpoint.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = spec.family.dim
    if x0.shape != (spec.state_dim,):
        raise ValueError(f"surrogate initial state must have {spec.state_dim} coordinates")
    if spec.kind == "ode":
        end = ode_flow(spec, x0, 0.0, spec.horizon)
        return float(observable(end[:d])), 0.0
    ends = sde_endpoint_batch(spec, x0, 0.0, spec.horizon, n_samples, seed)
    values = np.asarray(observable(ends[:, :d]), dtype=float)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n_samples))


def weak_error(
    cfg: DiscreteConfig,
    spec: SurrogateSpec,
    observable: Observable,
    n_samples: int,
    mode: str = "sgd",
    block: int | None = None,
    surrogate_value: tuple[float, float] | None = None,
    surrogate_samples: int | None = None,
) -> GridPointResult:
    """Discrete-minus-surrogate expectation at cfg.h, uncertainties combined.

    ``surrogate_value`` short-circuits the surrogate side with a known
    (value, standard_error) pair, e.g. a closed form on a benchmark.
    """
    if abs(spec.horizon - cfg.horizon) > 1e-12:
        raise ValueError("surrogate horizon must match the discrete horizon")
    mean, se = estimate_discrete_expectation(cfg, observable, n_samples, mode=mode, block=block)
    if surrogate_value is None:
        if spec.augmented is not None:
            if cfg.x1 is None:
                raise ValueError("momentum surrogate needs an explicit first iterate x1")
            initial = np.concatenate([cfg.x1, cfg.x0])
        else:
            initial = cfg.x0
        sv, sse = surrogate_expectation(
            spec, observable, initial, n_samples=surrogate_samples or n_samples, seed=cfg.seed
        )
    else:
        sv, sse = surrogate_value
    return GridPointResult(
        h=cfg.h, discrete_mean=mean, discrete_se=se, surrogate_value=float(sv), surrogate_se=float(sse)
    )


def convergence_fit(
    points: Sequence[GridPointResult],
    min_points: int = 4,
    noise_factor: float = 3.0,
) -> ConvergenceFit:
    """Least-squares order fit of log |error| against log h.

    Grid points whose |error| does not exceed ``noise_factor`` times their
    standard error are excluded from the fit (they measure Monte Carlo
    noise, not the error) and reported. The 95% confidence interval assumes
    Gaussian fit residuals, which is indicative at 4-6 grid points.
    """
    hs = np.array([p.h for p in points])
    if len(hs) != len(set(hs.tolist())):
        raise ValueError("duplicate h in grid")
    if np.any(np.diff(hs) >= 0):
        raise ValueError("h grid must be strictly decreasing")
    keep = np.array([abs(p.error) > noise_factor * p.se and p.error != 0.0 for p in points])
    excluded = tuple(float(h) for h, k in zip(hs, keep) if not k)
    if keep.sum() < min_points:
        raise ValueError(
            f"only {int(keep.sum())} usable grid points (need {min_points}); excluded {excluded}"
        )
    x = np.log(hs[keep])
    y = np.log(np.abs(np.array([p.error for p in points])[keep]))
    n = len(x)
    slope, intercept = np.polyfit(x, y, 1)
    if n > 2:
        resid = y - (slope * x + intercept)
        s2 = float(resid @ resid) / (n - 2)
        sxx = float(np.sum((x - x.mean()) ** 2))
        se_slope = np.sqrt(s2 / sxx)
        tq = stats.t.ppf(0.975, n - 2)
        ci = (slope - tq * se_slope, slope + tq * se_slope)
    else:
        ci = (-np.inf, np.inf)
    return ConvergenceFit(
        slope=float(slope),
        intercept=float(intercept),
        ci_low=float(ci[0]),
        ci_high=float(ci[1]),
        n_used=int(n),
        excluded=excluded,
    )


def expansion_residual(
    grid_points: Sequence[GridPointResult],
    integral: float,
) -> list[GridPointResult]:
    """Residuals error(h) - h * integral, keeping the measurement noise.

    ``integral`` is the leading-error time integral (h-free); the caller
    obtains it once from :func:`leading_error_integral` since it does not
    depend on h.
    """
    out = []
    for p in grid_points:
        out.append(
            dataclasses.replace(
                p, surrogate_value=p.surrogate_value + p.h * integral
            )
        )
    return out


def study_grid(
    base_cfg: DiscreteConfig,
    h_grid: Sequence[float],
    make_spec: Callable[[float], SurrogateSpec],
    observable: Observable,
    n_samples: int,
    mode: str = "sgd",
    surrogate_values: Callable[[float], tuple[float, float]] | None = None,
    surrogate_samples: int | None = None,
    map_fn=map,
) -> list[GridPointResult]:
    """Weak errors over a descending h grid with shared randomness.

    Every grid point reuses the same seed and a draw block sized for the
    finest step, so a trajectory's draws at coarse h are a prefix of its
    draws at fine h (common random numbers across the grid).
    """
    hs = list(h_grid)
    if np.any(np.diff(hs) >= 0):
        raise ValueError("h grid must be strictly decreasing")
    block = int(round(base_cfg.horizon / min(hs)))

    def one(h: float) -> GridPointResult:
        cfg = dataclasses.replace(base_cfg, h=float(h))
        sv = None if surrogate_values is None else surrogate_values(h)
        return weak_error(
            cfg,
            make_spec(float(h)),
            observable,
            n_samples,
            mode=mode,
            block=block,
            surrogate_value=sv,
            surrogate_samples=surrogate_samples,
        )

    return list(map_fn(one, hs))
