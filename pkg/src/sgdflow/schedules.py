"""Time-varying per-coordinate rate schedules.

A schedule is a smooth scalar function of time t >= 0 with values in (0, 1],
either constant or decreasing.  Schedules serve two roles: learning-rate
functions (scaled by the step size h into a diagonal step matrix) and
momentum coefficients.  Four families are built in:

    constant            u(t) = a
    exponential-decay   u(t) = a * exp(-rate * t)
    polynomial-decay    u(t) = a * (1 + t) ** (-exponent)
    tabulated-smooth    clamped cubic spline through nonincreasing knots,
                        held at the final knot value afterwards

All kinds expose an analytic (or spline) first derivative, used by the
drift-corrected second-order surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "Schedule",
    "DiagonalRateMatrix",
    "rate_matrix",
    "validate",
]

_KINDS = ("constant", "exponential-decay", "polynomial-decay", "tabulated-smooth")


@dataclass(frozen=True)
class Schedule:
    """A scalar rate function of time, constant or decreasing, valued in (0, 1]."""

    kind: str
    initial: float = 1.0
    rate: float = 0.0
    exponent: float = 0.0
    knot_times: tuple[float, ...] = field(default=())
    knot_values: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "tabulated-smooth" and len(self.knot_times) < 2:
            raise ValueError("tabulated schedule needs at least two knots")

    @classmethod
    def constant(cls, a: float) -> "Schedule":
        return cls(kind="constant", initial=float(a))

    @classmethod
    def exponential(cls, a: float, rate: float) -> "Schedule":
        return cls(kind="exponential-decay", initial=float(a), rate=float(rate))

    @classmethod
    def polynomial(cls, a: float, exponent: float) -> "Schedule":
        return cls(kind="polynomial-decay", initial=float(a), exponent=float(exponent))

    @classmethod
    def tabulated(cls, times: Sequence[float], values: Sequence[float]) -> "Schedule":
        return cls(
            kind="tabulated-smooth",
            initial=float(values[0]),
            knot_times=tuple(float(t) for t in times),
            knot_values=tuple(float(v) for v in values),
        )

    @cached_property
    def _spline(self) -> CubicSpline:
        # Clamped endpoints (zero slope) keep the held tail C^1.
        return CubicSpline(self.knot_times, self.knot_values, bc_type="clamped")

    @property
    def is_eventually_constant(self) -> bool:
        """True when the schedule holds a fixed value beyond some time."""
        if self.kind == "constant":
            return True
        return self.kind == "tabulated-smooth"

    def value(self, t):
        """Evaluate the schedule at time t (scalar or array), t >= 0."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("schedule evaluated at negative time")
        if self.kind == "constant":
            out = np.full_like(t, self.initial)
        elif self.kind == "exponential-decay":
            out = self.initial * np.exp(-self.rate * t)
        elif self.kind == "polynomial-decay":
            out = self.initial * (1.0 + t) ** (-self.exponent)
        else:
            t_last = self.knot_times[-1]
            out = np.where(t >= t_last, self.knot_values[-1], self._spline(np.minimum(t, t_last)))
        return out if out.ndim else float(out)

    def derivative(self, t):
        """Evaluate du/dt at time t; nonpositive for valid schedules."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("schedule derivative evaluated at negative time")
        if self.kind == "constant":
            out = np.zeros_like(t)
        elif self.kind == "exponential-decay":
            out = -self.rate * self.initial * np.exp(-self.rate * t)
        elif self.kind == "polynomial-decay":
            out = -self.initial * self.exponent * (1.0 + t) ** (-self.exponent - 1.0)
        else:
            t_last = self.knot_times[-1]
            out = np.where(t >= t_last, 0.0, self._spline(np.minimum(t, t_last), 1))
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class DiagonalRateMatrix:
    """Diagonal step matrix; only the diagonal is stored."""

    entries: np.ndarray
    h: float

    @property
    def dimension(self) -> int:
        return self.entries.shape[0]


def rate_matrix(schedules: Sequence[Schedule], h: float, n: int) -> DiagonalRateMatrix:
    """Step matrix at step n: diagonal entries h * u_i(n*h), one per coordinate."""
    if not 0.0 < h < 1.0:
        raise ValueError(f"step scale h must lie in (0, 1), got {h}")
    if n < 0:
        raise ValueError("step index must be nonnegative")
    if not schedules:
        raise ValueError("need at least one schedule")
    t = n * h
    entries = h * np.array([s.value(t) for s in schedules], dtype=float)
    return DiagonalRateMatrix(entries=entries, h=float(h))


def validate(
    schedule: Schedule,
    t_max: float = 100.0,
    grid_points: int = 1001,
    lower_open: bool = True,
) -> list[str]:
    """Check the schedule against the rate-function contract.

    Returns a list of human-readable violations (empty means valid):
    values must lie in (0, 1] on [0, t_max], be nonincreasing, and have a
    nonpositive derivative.  Analytic kinds are also checked through their
    parameter signs; tabulated kinds additionally need strictly increasing
    knot times starting at 0 and nonincreasing knot values.

    ``lower_open=False`` relaxes the range to [0, 1], which admits a zero
    momentum coefficient (plain-SGD reduction).
    """
    violations: list[str] = []
    low = 0.0

    if schedule.initial > 1.0:
        violations.append(f"initial value {schedule.initial} > 1")
    if schedule.initial < low or (lower_open and schedule.initial == 0.0):
        violations.append(f"initial value {schedule.initial} not positive")
    if schedule.kind == "exponential-decay" and schedule.rate < 0:
        violations.append(f"decay rate {schedule.rate} < 0 (increasing schedule)")
    if schedule.kind == "polynomial-decay" and schedule.exponent < 0:
        violations.append(f"decay exponent {schedule.exponent} < 0 (increasing schedule)")

    if schedule.kind == "tabulated-smooth":
        times = np.asarray(schedule.knot_times)
        values = np.asarray(schedule.knot_values)
        if times[0] != 0.0:
            violations.append("tabulated knots must start at t = 0")
        if np.any(np.diff(times) <= 0):
            violations.append("tabulated knot times not strictly increasing")
        if np.any(np.diff(values) > 0):
            violations.append("tabulated knot values not nonincreasing")

    if violations:
        # Grid checks on a malformed schedule would only repeat the problem.
        return violations

    grid = np.linspace(0.0, t_max, grid_points)
    vals = np.asarray(schedule.value(grid))
    derivs = np.asarray(schedule.derivative(grid))
    if np.any(vals > 1.0 + 1e-12):
        violations.append(f"value exceeds 1 on [0, {t_max}] (max {vals.max():.6g})")
    below_range = np.any(vals <= 0.0) if lower_open else np.any(vals < 0.0)
    if below_range:
        violations.append(f"value not positive on [0, {t_max}] (min {vals.min():.6g})")
    if np.any(np.diff(vals) > 1e-12):
        violations.append("values increase somewhere on the validation grid")
    if np.any(derivs > 1e-12):
        violations.append("derivative positive somewhere on the validation grid")
    return violations
