"""Discrete stochastic recursions: plain SGD, heavy-ball momentum, and the
2d augmented rewrite.

Randomness model
----------------
All member sampling for a run derives from a single Philox stream keyed by
``(seed, 0)``.  Trajectory ``i`` owns the contiguous counter block
``[i * block, (i + 1) * block)`` of that stream, where ``block`` is the
number of draws reserved per trajectory (the step count by default).  The
blocks make Monte Carlo batches reproducible under any chunking of the
work, and choosing one common ``block`` for a whole step-size grid makes a
trajectory's draws at a coarse step a prefix of its draws at a fine step,
so estimates across the grid share randomness.  Gaussian noise for SDE
sampling lives on the separate ``(seed, 1)`` stream.

Within a trajectory, the draw consumed at step ``n`` is the ``n``-th entry
of its block in every mode, so a momentum run and its augmented rewrite see
identical member sequences under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import csv

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from .augment import AugmentedSystem
from .problems import GradientFamily, indices_from_uniform
from .schedules import Schedule

__all__ = [
    "DiscreteConfig",
    "Trajectory",
    "DivergenceError",
    "member_stream",
    "noise_stream",
    "sgd_step",
    "momentum_step",
    "bootstrap_first_iterate",
    "run_trajectory",
    "simulate_batch",
]

MODES = ("sgd", "momentum", "augmented")
_MAX_STORED = 1_000_000


class DivergenceError(RuntimeError):
    """A trajectory left the finite / bounded region."""

    def __init__(self, step: int, message: str, partial: "Trajectory | None" = None):
        super().__init__(f"diverged at step {step}: {message}")
        self.step = step
        self.partial = partial


def member_stream(seed: int) -> Generator:
    """Philox stream that owns all member-index draws for this seed."""
    return Generator(Philox(SeedSequence(entropy=(int(seed), 0))))


def noise_stream(seed: int) -> Generator:
    """Philox stream that owns all Gaussian draws for this seed."""
    return Generator(Philox(SeedSequence(entropy=(int(seed), 1))))


def _as_schedule_tuple(schedules, dim: int) -> tuple[Schedule, ...]:
    if isinstance(schedules, Schedule):
        return (schedules,) * dim
    out = tuple(schedules)
    if len(out) != dim:
        raise ValueError(f"need {dim} schedules (one per coordinate), got {len(out)}")
    return out


@dataclass(frozen=True)
class DiscreteConfig:
    """Everything one discrete run needs: problem, schedules, grid and seed.

    The horizon constraint T/h integral is enforced at construction so the
    final step lands exactly on T.
    """

    family: GradientFamily
    lr_schedules: Schedule | Sequence[Schedule]
    h: float
    horizon: float
    x0: np.ndarray
    momentum_schedules: Schedule | Sequence[Schedule] | None = None
    x1: np.ndarray | None = None
    seed: int = 0
    divergence_limit: float = 1e12

    def __post_init__(self):
        if not 0.0 < self.h < 1.0:
            raise ValueError(f"h must lie in (0, 1), got {self.h}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        ratio = self.horizon / self.h
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"T/h not an integer (T={self.horizon}, h={self.h})")
        d = self.family.dim
        object.__setattr__(self, "lr_schedules", _as_schedule_tuple(self.lr_schedules, d))
        if self.momentum_schedules is not None:
            object.__setattr__(
                self, "momentum_schedules", _as_schedule_tuple(self.momentum_schedules, d)
            )
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (d,):
            raise ValueError(f"x0 must have shape ({d},)")
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite")
        object.__setattr__(self, "x0", x0)
        if self.x1 is not None:
            x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
            if x1.shape != (d,):
                raise ValueError(f"x1 must have shape ({d},)")
            object.__setattr__(self, "x1", x1)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.h))

    def step_sizes(self, n: int) -> np.ndarray:
        """Per-coordinate step sizes h * u_i(n h)."""
        t = n * self.h
        return self.h * np.array([s.value(t) for s in self.lr_schedules])

    def momentum_values(self, n: int) -> np.ndarray:
        """Per-coordinate momentum coefficients v_i(n h); zeros when absent."""
        if self.momentum_schedules is None:
            return np.zeros(self.family.dim)
        t = n * self.h
        return np.array([s.value(t) for s in self.momentum_schedules])

    def augmented_system(self) -> AugmentedSystem:
        if self.momentum_schedules is None:
            raise ValueError("augmented mode requires momentum schedules")
        return AugmentedSystem(
            family=self.family,
            lr_schedules=tuple(self.lr_schedules),
            momentum_schedules=tuple(self.momentum_schedules),
            h=self.h,
        )


@dataclass(frozen=True)
class Trajectory:
    """Stored iterates of one realized run.

    ``iterates[k]`` is the state at ``steps[k]``; augmented-mode states hold
    the pair (current, previous) of base iterates, so their first block is
    the momentum chain shifted one step ahead of ``steps``.
    ``member_indices[n]`` is the draw consumed at step ``n`` (-1 where a
    supplied first iterate made the draw unnecessary).
    """

    mode: str
    h: float
    seed: int
    traj_id: int
    iterates: np.ndarray
    steps: np.ndarray
    member_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    stride: int = 1

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.h

    @property
    def endpoint(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def endpoint_primary(self) -> np.ndarray:
        """Final base-space iterate (first block in augmented mode)."""
        if self.mode == "augmented":
            return self.iterates[-1][: self.iterates.shape[1] // 2]
        return self.iterates[-1]

    def primary_block(self) -> np.ndarray:
        """All stored iterates projected to base space."""
        if self.mode == "augmented":
            return self.iterates[:, : self.iterates.shape[1] // 2]
        return self.iterates

    def to_csv(self, path):
        """Write rows (step, t, x_1.., gamma); gamma is the draw consumed
        while leaving that row's state, empty on the final row."""
        dim = self.iterates.shape[1]
        offset = 1 if self.mode == "augmented" else 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "t"] + [f"x_{j + 1}" for j in range(dim)] + ["gamma"])
            for k, step in enumerate(self.steps):
                draw = step + offset
                if k + 1 < len(self.steps) and draw < len(self.member_indices):
                    gamma = str(self.member_indices[draw])
                else:
                    gamma = ""
                writer.writerow(
                    [int(step), repr(float(step * self.h))]
                    + [repr(float(v)) for v in self.iterates[k]]
                    + [gamma]
                )


def _guard(x: np.ndarray, n: int, limit: float, partial=None):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(n, "non-finite state", partial)
    if np.max(np.abs(x)) > limit:
        raise DivergenceError(n, f"|state| exceeded {limit:.3g}", partial)


def sgd_step(x: np.ndarray, n: int, cfg: DiscreteConfig, rng: Generator) -> np.ndarray:
    """One plain step: x + eta_n * H_gamma(x), drawing gamma from rng."""
    idx = cfg.family.sample_index(rng)
    nxt = x + cfg.step_sizes(n) * cfg.family.member_drift(idx, x)
    _guard(nxt, n, cfg.divergence_limit)
    return nxt


def momentum_step(
    x_curr: np.ndarray, x_prev: np.ndarray, n: int, cfg: DiscreteConfig, rng: Generator
) -> np.ndarray:
    """One heavy-ball step: adds zeta_n * (x_curr - x_prev) to the plain step."""
    idx = cfg.family.sample_index(rng)
    nxt = (
        x_curr
        + cfg.step_sizes(n) * cfg.family.member_drift(idx, x_curr)
        + cfg.momentum_values(n) * (x_curr - x_prev)
    )
    _guard(nxt, n, cfg.divergence_limit)
    return nxt


def bootstrap_first_iterate(x0: np.ndarray, cfg: DiscreteConfig, rng: Generator) -> np.ndarray:
    """First iterate from a single plain step at step index 0."""
    return sgd_step(np.asarray(x0, dtype=float), 0, cfg, rng)


def _trajectory_uniforms(seed: int, traj_id: int, block: int) -> np.ndarray:
    rows = member_stream(seed).random((traj_id + 1, block))
    return rows[traj_id]


def run_trajectory(
    cfg: DiscreteConfig,
    mode: str = "sgd",
    traj_id: int = 0,
    block: int | None = None,
    max_stored: int = _MAX_STORED,
) -> Trajectory:
    """Run one full trajectory to step T/h.

    In augmented mode the state is the 2d pair and the run starts from
    (x1, x0); its first block reproduces a momentum-mode run with the same
    seed up to roundoff in the block step algebra.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    M = cfg.n_steps
    block = M if block is None else int(block)
    if block < M:
        raise ValueError("draw block smaller than the number of steps")
    uniforms = _trajectory_uniforms(cfg.seed, traj_id, block)
    gammas = indices_from_uniform(uniforms[:M], cfg.family.probabilities).astype(int)
    member_indices = gammas.copy()

    def build(iterates_list, start_step):
        iterates = np.asarray(iterates_list)
        steps = np.arange(start_step, start_step + len(iterates))
        stride = 1
        if len(iterates) > max_stored:
            stride = int(np.ceil(len(iterates) / max_stored))
            keep = np.unique(np.r_[np.arange(0, len(iterates), stride), len(iterates) - 1])
            iterates, steps = iterates[keep], steps[keep]
        return iterates, steps, stride

    limit = cfg.divergence_limit

    if mode == "sgd":
        x = cfg.x0.copy()
        iterates = [x.copy()]
        for n in range(M):
            x = x + cfg.step_sizes(n) * cfg.family.member_drift(gammas[n], x)
            iterates.append(x.copy())
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > limit:
                it, st, sd = build(iterates, 0)
                partial = Trajectory(mode, cfg.h, cfg.seed, traj_id, it, st, member_indices[: n + 1], sd)
                _guard(x, n, limit, partial)
        it, st, sd = build(iterates, 0)
        return Trajectory(mode, cfg.h, cfg.seed, traj_id, it, st, member_indices, sd)

    if cfg.momentum_schedules is None and mode == "augmented":
        raise ValueError("augmented mode requires momentum schedules")

    # First iterate: supplied, or one plain step consuming the step-0 draw.
    if cfg.x1 is not None:
        x1 = cfg.x1.copy()
        member_indices[0] = -1
    else:
        x1 = cfg.x0 + cfg.step_sizes(0) * cfg.family.member_drift(gammas[0], cfg.x0)
        _guard(x1, 0, limit)

    if mode == "momentum":
        x_prev, x = cfg.x0.copy(), x1
        iterates = [x_prev.copy(), x.copy()]
        for n in range(1, M):
            nxt = (
                x
                + cfg.step_sizes(n) * cfg.family.member_drift(gammas[n], x)
                + cfg.momentum_values(n) * (x - x_prev)
            )
            x_prev, x = x, nxt
            iterates.append(x.copy())
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > limit:
                it, st, sd = build(iterates, 0)
                partial = Trajectory(mode, cfg.h, cfg.seed, traj_id, it, st, member_indices[: n + 1], sd)
                _guard(x, n, limit, partial)
        it, st, sd = build(iterates, 0)
        return Trajectory(mode, cfg.h, cfg.seed, traj_id, it, st, member_indices, sd)

    system = cfg.augmented_system()
    state = np.concatenate([x1, cfg.x0])
    iterates = [state.copy()]
    for k in range(M - 1):
        n = k + 1
        state = state + system.rate_matrix(n).entries * system.member_drift(n, state, gammas[n])
        iterates.append(state.copy())
        if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > limit:
            it, st, sd = build(iterates, 0)
            partial = Trajectory(mode, cfg.h, cfg.seed, traj_id, it, st, member_indices[: n + 1], sd)
            _guard(state, n, limit, partial)
    it, st, sd = build(iterates, 0)
    return Trajectory(mode, cfg.h, cfg.seed, traj_id, it, st, member_indices, sd)


def simulate_batch(
    cfg: DiscreteConfig,
    mode: str,
    n_samples: int,
    block: int | None = None,
    return_sup: bool = False,
    chunk_rows: int = 200_000,
):
    """Endpoints of n_samples independent trajectories, vectorized per step.

    Returns the base-space endpoints with shape (n_samples, d); with
    ``return_sup`` also the per-sample running maximum of |x_n|^2 over the
    whole path (including the start).  Chunking over samples never changes
    the result because the member stream is consumed in trajectory order.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    M = cfg.n_steps
    block = M if block is None else int(block)
    if block < M:
        raise ValueError("draw block smaller than the number of steps")
    d = cfg.family.dim
    gen = member_stream(cfg.seed)
    endpoints = np.empty((n_samples, d))
    sups = np.empty(n_samples) if return_sup else None

    momentum_like = mode in ("momentum", "augmented")
    system = cfg.augmented_system() if mode == "augmented" else None

    done = 0
    while done < n_samples:
        rows = min(chunk_rows, n_samples - done)
        uniforms = gen.random((rows, block))[:, :M]
        gammas = indices_from_uniform(uniforms, cfg.family.probabilities)

        x = np.broadcast_to(cfg.x0, (rows, d)).copy()
        sup = np.sum(x * x, axis=1) if return_sup else None

        if momentum_like:
            if cfg.x1 is not None:
                x1 = np.broadcast_to(cfg.x1, (rows, d)).copy()
            else:
                drift = cfg.family.drift_at_indices(gammas[:, 0], x)
                x1 = x + cfg.step_sizes(0) * drift
            x_prev, x = x, x1
            if return_sup:
                sup = np.maximum(sup, np.sum(x * x, axis=1))
            start = 1
        else:
            x_prev = None
            start = 0

        for n in range(start, M):
            drift = cfg.family.drift_at_indices(gammas[:, n], x)
            if mode == "sgd":
                nxt = x + cfg.step_sizes(n) * drift
            elif mode == "momentum":
                nxt = x + cfg.step_sizes(n) * drift + cfg.momentum_values(n) * (x - x_prev)
            else:
                eta, zeta = system.eta(n), system.zeta(n)
                coupling = (zeta / eta) * (x - x_prev)
                rate = system.rate_matrix(n).entries
                nxt = x + rate[:d] * (drift + coupling)
                x_prev_next = x_prev + rate[d:] * (-coupling)
                x_prev = x_prev_next
            if mode == "momentum":
                x_prev = x
            x = nxt
            if not np.all(np.isfinite(x)):
                raise DivergenceError(n, "non-finite state in batch")
            if np.max(np.abs(x)) > cfg.divergence_limit:
                raise DivergenceError(n, f"|state| exceeded {cfg.divergence_limit:.3g} in batch")
            if return_sup:
                sup = np.maximum(sup, np.sum(x * x, axis=1))

        endpoints[done : done + rows] = x
        if return_sup:
            sups[done : done + rows] = sup
        done += rows

    if return_sup:
        return endpoints, sups
    return endpoints
