"""The 2d-dimensional rewrite of momentum SGD.

Tracking two consecutive iterates as one state x = (x_first, x_second) in
R^{2d} turns the heavy-ball recursion into a plain gradient-style step

    x_next = x + R_n J_n(x),

where R_n is the block-diagonal step matrix with entries (h u_i, -h u_i / v_i)
and J_n is a 2d drift whose member deviation J_i - Jbar is exactly the base
family deviation H_i - Hbar in the first block and zero in the second.

Two drift surfaces coexist on purpose:

* ``objective`` / ``objective_gradient`` evaluate the coupled quadratic
  objective in its displayed form (potential of the member plus the
  per-coordinate coupling terms) and are internally consistent with each
  other (the gradient is the exact derivative of the objective).
* ``member_drift`` is the recursion-consistent block drift
  (H_i(x1) + (zeta/eta) (x1 - x2), -(zeta/eta) (x1 - x2)); it is the form
  under which one augmented step reproduces one momentum step to roundoff,
  which :func:`step_equivalence_check` certifies.  The displayed objective's
  gradient differs from it by a member-independent recentering term, so the
  recursion and all surrogates are driven by ``member_drift``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import GradientFamily, principal_sqrt
from .schedules import DiagonalRateMatrix, Schedule

__all__ = ["AugmentedSystem", "DegenerateMomentumError", "step_equivalence_check"]


class DegenerateMomentumError(ValueError):
    """Momentum coefficient hit zero where the augmented form divides by it."""


@dataclass(frozen=True)
class AugmentedSystem:
    """Momentum SGD rewritten over pairs of consecutive iterates."""

    family: GradientFamily
    lr_schedules: tuple[Schedule, ...]
    momentum_schedules: tuple[Schedule, ...]
    h: float

    def __post_init__(self):
        d = self.family.dim
        if len(self.lr_schedules) != d or len(self.momentum_schedules) != d:
            raise ValueError("need one learning-rate and one momentum schedule per coordinate")
        if not 0.0 < self.h < 1.0:
            raise ValueError(f"step scale h must lie in (0, 1), got {self.h}")

    @property
    def base_dim(self) -> int:
        return self.family.dim

    @property
    def dim(self) -> int:
        return 2 * self.family.dim

    def eta(self, n: int) -> np.ndarray:
        """Per-coordinate step sizes h * u_i(n h)."""
        t = n * self.h
        return self.h * np.array([s.value(t) for s in self.lr_schedules])

    def zeta(self, n: int) -> np.ndarray:
        """Per-coordinate momentum coefficients v_i(n h)."""
        t = n * self.h
        z = np.array([s.value(t) for s in self.momentum_schedules])
        if np.any(z == 0.0):
            raise DegenerateMomentumError("momentum coefficient is zero; augmented form undefined")
        return z

    # -- displayed coupled objective -------------------------------------

    def objective(self, n: int, x: np.ndarray, member: int) -> float:
        """Coupled objective: member potential plus per-coordinate quadratic coupling."""
        x = np.asarray(x, dtype=float)
        d = self.base_dim
        eta, zeta = self.eta(n), self.zeta(n)
        x1, x2 = x[:d], x[d:]
        coupling = np.sum(
            (1.0 + zeta) * x1**2 / (2.0 * eta)
            + zeta * x2**2 / (2.0 * eta)
            - zeta * x1 * x2 / eta
        )
        return float(self.family.potential(member, x1) + coupling)

    def objective_gradient(self, n: int, x: np.ndarray, member: int) -> np.ndarray:
        """Exact gradient of :meth:`objective` in R^{2d}."""
        x = np.asarray(x, dtype=float)
        d = self.base_dim
        eta, zeta = self.eta(n), self.zeta(n)
        x1, x2 = x[:d], x[d:]
        grad_f = -self.family.member_drift(member, x1)
        first = grad_f + (1.0 + zeta) * x1 / eta - zeta * x2 / eta
        second = zeta * x2 / eta - zeta * x1 / eta
        return np.concatenate([first, second])

    # -- recursion-consistent drift ---------------------------------------

    def member_drift(self, n: int, x: np.ndarray, member: int) -> np.ndarray:
        """Block drift J_member: one augmented step is x + rate_matrix(n) * J."""
        x = np.asarray(x, dtype=float)
        d = self.base_dim
        eta, zeta = self.eta(n), self.zeta(n)
        x1, x2 = x[..., :d], x[..., d:]
        coupling = (zeta / eta) * (x1 - x2)
        first = self.family.member_drift(member, x1) + coupling
        return np.concatenate([first, -coupling], axis=-1)

    def mean_drift(self, n: int, x: np.ndarray) -> np.ndarray:
        """Probability-weighted member drift Jbar."""
        x = np.asarray(x, dtype=float)
        d = self.base_dim
        eta, zeta = self.eta(n), self.zeta(n)
        x1, x2 = x[..., :d], x[..., d:]
        coupling = (zeta / eta) * (x1 - x2)
        first = self.family.mean_drift(x1) + coupling
        return np.concatenate([first, -coupling], axis=-1)

    def rate_matrix(self, n: int) -> DiagonalRateMatrix:
        """Block step matrix diag(h u_1..h u_d, -h u_1/v_1..-h u_d/v_d) at t = n h."""
        eta, zeta = self.eta(n), self.zeta(n)
        return DiagonalRateMatrix(entries=np.concatenate([eta, -eta / zeta]), h=self.h)

    # -- continuous-time pieces -------------------------------------------

    def continuous_rate(self, t: float) -> np.ndarray:
        """Diagonal of the h-free surrogate rate matrix: (u_i(t), -u_i(t)/v_i(t))."""
        u = np.array([s.value(t) for s in self.lr_schedules])
        v = np.array([s.value(t) for s in self.momentum_schedules])
        if np.any(v == 0.0):
            raise DegenerateMomentumError("momentum coefficient is zero; augmented form undefined")
        return np.concatenate([u, -u / v])

    def surrogate_drift(self, t: float, x: np.ndarray) -> np.ndarray:
        """Drift of the augmented surrogate flow, U(t) Jbar_t(x).

        The coupling coefficient divides by the step scale h, so the pair
        gap relaxes on the fast timescale h; integrators must resolve it.
        """
        x = np.asarray(x, dtype=float)
        d = self.base_dim
        u = np.array([s.value(t) for s in self.lr_schedules])
        v = np.array([s.value(t) for s in self.momentum_schedules])
        x1, x2 = x[..., :d], x[..., d:]
        gap = x1 - x2
        first = u * self.family.mean_drift(x1) + (v / self.h) * gap
        return np.concatenate([first, gap / self.h], axis=-1)

    def covariance(self, n: int, x: np.ndarray) -> np.ndarray:
        """Member-drift covariance: the base Sigma(x1) in the top-left block."""
        x = np.asarray(x, dtype=float)
        d = self.base_dim
        out = np.zeros(x.shape[:-1] + (2 * d, 2 * d))
        out[..., :d, :d] = self.family.covariance(x[..., :d])
        return out

    def sqrt_covariance(self, n: int, x: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = self.base_dim
        out = np.zeros(x.shape[:-1] + (2 * d, 2 * d))
        out[..., :d, :d] = principal_sqrt(self.family.covariance(x[..., :d]), tol=tol)
        return out


def step_equivalence_check(
    system: AugmentedSystem, n: int, x: np.ndarray, member: int
) -> float:
    """Max componentwise gap between one augmented step and one momentum step.

    The augmented step is x + R_n J_member(x); the direct step applies the
    heavy-ball recursion to the first block and the copy rule to the second.
    """
    x = np.asarray(x, dtype=float)
    d = system.base_dim
    augmented = x + system.rate_matrix(n).entries * system.member_drift(n, x, member)
    eta, zeta = system.eta(n), system.zeta(n)
    x1, x2 = x[:d], x[d:]
    direct_first = x1 + eta * system.family.member_drift(member, x1) + zeta * (x1 - x2)
    direct = np.concatenate([direct_first, x1])
    return float(np.max(np.abs(augmented - direct)))
