"""Continuous surrogates of the discrete recursions and their error densities.

Three surrogate kinds share one drift/diffusion assembly:

    ode    dX = U_t Hbar(X) dt
    sde1   dX = U_t Hbar(X) dt + U_t sqrt(h Sigma(X)) dW
    sde2   same diffusion, drift corrected to second order:
           U_t Hbar - (h/2) (U_t^2 grad(Hbar) Hbar + dU_t/dt Hbar)

(The corrected drift's quadratic coefficient is read as the squared rate
"u-squared correction"; for per-coordinate rates the correction is assembled
as -(h/2) (dU/dt Hbar + U grad(Hbar) U Hbar), which reduces to the scalar
form above.)  Momentum systems substitute the augmented rate matrix and
block drift for U_t and Hbar.

Time stepping is fixed-step by design: weak-error measurement needs the
integrator bias controlled and identical across a step-size grid.  The SDE
stepper advances the drift with the same classical 4th-order substep as the
ODE flow and adds the Ito Gaussian increment evaluated at the left point;
with zero noise it therefore coincides with the ODE flow to roundoff.

The module also evaluates the value function y_t(x) (terminal observable
transported by the flow), its transport-equation residual, and the
error-expansion densities phi / Phi whose time integral, scaled by h, gives
the leading weak-error term.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .augment import AugmentedSystem
from .discrete import DivergenceError, noise_stream
from .observables import Observable
from .problems import GradientFamily, principal_sqrt
from .schedules import Schedule

__all__ = [
    "SurrogateSpec",
    "ValueFunctionProbe",
    "ValueEstimate",
    "ode_flow",
    "ode_path",
    "sde_sample",
    "sde_endpoint_batch",
    "second_order_drift",
    "value_function",
    "fk_residual",
    "phi_density",
    "capital_phi_density",
    "capital_phi_profile",
    "leading_error_integral",
    "linear_sde_moments",
]

_KINDS = ("ode", "sde1", "sde2")


@dataclass(frozen=True)
class SurrogateSpec:
    """Drift/diffusion assembly for one surrogate process on [0, horizon]."""

    kind: str
    family: GradientFamily
    lr_schedules: tuple[Schedule, ...]
    horizon: float
    h: float | None = None
    substep: float = 1e-3
    augmented: AugmentedSystem | None = None
    fd_jacobian: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}")
        if isinstance(self.lr_schedules, Schedule):
            object.__setattr__(self, "lr_schedules", (self.lr_schedules,) * self.family.dim)
        else:
            object.__setattr__(self, "lr_schedules", tuple(self.lr_schedules))
        if len(self.lr_schedules) != self.family.dim:
            raise ValueError("need one learning-rate schedule per coordinate")
        if self.kind != "ode" and self.h is None:
            raise ValueError("sde surrogates need the step scale h for the noise amplitude")
        if self.kind != "ode" and self.substep > self.h / 4 + 1e-15:
            raise ValueError("sde substep must satisfy substep <= h/4")
        if self.kind == "ode" and self.h is not None and self.substep > self.h + 1e-15:
            raise ValueError("ode substep must satisfy substep <= h")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def state_dim(self) -> int:
        return 2 * self.family.dim if self.augmented is not None else self.family.dim

    def rate_diagonal(self, t: float) -> np.ndarray:
        """Diagonal of the surrogate rate matrix at time t."""
        if self.augmented is not None:
            return self.augmented.continuous_rate(t)
        return np.array([s.value(t) for s in self.lr_schedules])

    def rate_derivative(self, t: float) -> np.ndarray:
        return np.array([s.derivative(t) for s in self.lr_schedules])

    def base_drift(self, t: float, x: np.ndarray) -> np.ndarray:
        """First-order drift U_t Hbar(x) (block form for momentum systems)."""
        if self.augmented is not None:
            return self.augmented.surrogate_drift(t, x)
        return self.rate_diagonal(t) * self.family.mean_drift(x)

    def mean_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Jacobian of Hbar at a single point, analytic or finite-difference."""
        if self.family.jacobians is not None:
            return self.family.jacobian_mean_drift(x)
        if not self.fd_jacobian:
            raise ValueError(
                "second-order drift requires Jacobian or FD fallback enabled"
            )
        d = self.family.dim
        eps = 1e-5
        cols = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = eps
            cols.append((self.family.mean_drift(x + e) - self.family.mean_drift(x - e)) / (2 * eps))
        return np.stack(cols, axis=-1)

    def _jacobian_apply(self, x: np.ndarray, vec: np.ndarray) -> np.ndarray:
        """grad(Hbar)(x) vec, batched over leading axes of x."""
        if self.family.constant_jacobian or x.ndim == 1:
            point = x if x.ndim == 1 else x[0]
            return vec @ self.mean_jacobian(point).T
        return np.stack([self.mean_jacobian(xi) @ vi for xi, vi in zip(x, vec)])

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        """Full drift: base drift, plus the order-h correction for sde2."""
        b0 = self.base_drift(t, x)
        if self.kind != "sde2":
            return b0
        if self.augmented is not None:
            # Generic modified-drift correction -(h/2)(d_t b0 + grad(b0) b0),
            # assembled by finite differences on the block drift.
            eps = 1e-5
            dt_b = (self.base_drift(t + eps, x) - self.base_drift(t - eps, x)) / (2 * eps)
            x = np.asarray(x, dtype=float)
            conv = np.zeros_like(b0)
            for j in range(x.shape[-1]):
                e = np.zeros(x.shape[-1])
                e[j] = eps
                dj = (self.base_drift(t, x + e) - self.base_drift(t, x - e)) / (2 * eps)
                conv += dj * b0[..., j : j + 1] if b0.ndim > 1 else dj * b0[j]
            return b0 - 0.5 * self.h * (dt_b + conv)
        x = np.asarray(x, dtype=float)
        u = self.rate_diagonal(t)
        du = self.rate_derivative(t)
        hbar = self.family.mean_drift(x)
        conv = u * self._jacobian_apply(x, u * hbar)
        return b0 - 0.5 * self.h * (du * hbar + conv)

    def noise_covariance(self, x: np.ndarray) -> np.ndarray:
        if self.augmented is not None:
            return self.augmented.covariance(0, x)
        return self.family.covariance(x)

    def noise_sqrt(self, x: np.ndarray) -> np.ndarray:
        if self.augmented is not None:
            return self.augmented.sqrt_covariance(0, x)
        return self.family.sqrt_covariance(x)

    def diffusion(self, t: float, x: np.ndarray) -> np.ndarray:
        """Diffusion matrix U_t sqrt(h Sigma(x)); zero for the ode kind."""
        if self.kind == "ode":
            raise ValueError("ode surrogate has no diffusion")
        s = self.noise_sqrt(x)
        u = self.rate_diagonal(t)
        return np.sqrt(self.h) * u[..., :, None] * s


def second_order_drift(spec: SurrogateSpec, t: float, x: np.ndarray) -> np.ndarray:
    """Drift with the order-h correction, regardless of the spec kind."""
    if spec.kind == "sde2":
        return spec.drift(t, x)
    if spec.h is None:
        raise ValueError("second-order drift needs the step scale h")
    corrected = dataclasses.replace(
        spec, kind="sde2", substep=min(spec.substep, spec.h / 4.0)
    )
    return corrected.drift(t, x)


def _rk4_step(drift, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = drift(t, x)
    k2 = drift(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = drift(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = drift(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _n_substeps(spec: SurrogateSpec, span: float) -> int:
    return max(1, int(round(abs(span) / spec.substep)))


def ode_flow(spec: SurrogateSpec, x, t0: float, t1: float) -> np.ndarray:
    """Deterministic flow of the surrogate drift from (t0, x) to time t1.

    Classical 4th-order fixed-step integration; the step count is chosen so
    substeps do not exceed the configured substep and land exactly on t1.
    Reversed spans (t1 < t0) integrate backwards, which derivative stencils
    at the horizon rely on.
    """
    x = np.asarray(x, dtype=float)
    if t0 == t1:
        return x.copy()
    n = _n_substeps(spec, t1 - t0)
    dt = (t1 - t0) / n
    if min(t0, t1) >= 0.0:
        # Rounding in t0 + k dt can land stage times a few ulp below zero,
        # where schedules are undefined; clamp only that dust.
        drift = lambda tt, xx: spec.drift(max(tt, 0.0), xx)
    else:
        drift = spec.drift
    for k in range(n):
        x = _rk4_step(drift, t0 + k * dt, x, dt)
    return x


def ode_path(spec: SurrogateSpec, x0, times: np.ndarray) -> np.ndarray:
    """States of the deterministic flow started at (times[0], x0) at each time."""
    times = np.asarray(times, dtype=float)
    x = np.asarray(x0, dtype=float)
    out = np.empty((len(times),) + x.shape)
    out[0] = x
    for k in range(1, len(times)):
        x = ode_flow(spec, x, times[k - 1], times[k])
        out[k] = x
    return out


def _diffusion_apply(spec: SurrogateSpec, t: float, x: np.ndarray, xi: np.ndarray, s_const):
    u = spec.rate_diagonal(t)
    if s_const is not None:
        s = s_const
    else:
        s = spec.noise_sqrt(x)
    scaled = np.sqrt(spec.h) * np.einsum("...ij,...j->...i", s, xi)
    return u * scaled


def _constant_noise_sqrt(spec: SurrogateSpec, x: np.ndarray):
    if spec.family.constant_covariance:
        probe = np.zeros(spec.family.dim) if spec.augmented is None else np.zeros(2 * spec.family.dim)
        return spec.noise_sqrt(probe)
    return None


def sde_sample(spec: SurrogateSpec, x, t0: float, t1: float, rng: np.random.Generator) -> np.ndarray:
    """One stochastic path endpoint; drift via the 4th-order substep, noise Ito."""
    if spec.kind == "ode":
        raise ValueError("sde_sample needs an sde surrogate kind")
    x = np.asarray(x, dtype=float)
    n = _n_substeps(spec, t1 - t0)
    dt = (t1 - t0) / n
    s_const = _constant_noise_sqrt(spec, x)
    t = t0
    for k in range(n):
        xi = rng.standard_normal(x.shape)
        x = _rk4_step(spec.drift, t, x, dt) + np.sqrt(dt) * _diffusion_apply(spec, t, x, xi, s_const)
        t += dt
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, "non-finite surrogate state")
    return x


def sde_endpoint_batch(
    spec: SurrogateSpec, x, t0: float, t1: float, n_paths: int, seed: int = 0
) -> np.ndarray:
    """Endpoints of independent stochastic paths, vectorized over paths."""
    if spec.kind == "ode":
        raise ValueError("sde_endpoint_batch needs an sde surrogate kind")
    x0 = np.asarray(x, dtype=float)
    X = np.broadcast_to(x0, (n_paths,) + x0.shape).copy()
    n = _n_substeps(spec, t1 - t0)
    dt = (t1 - t0) / n
    gen = noise_stream(seed)
    s_const = _constant_noise_sqrt(spec, x0)
    t = t0
    for k in range(n):
        xi = gen.standard_normal(X.shape)
        X = _rk4_step(spec.drift, t, X, dt) + np.sqrt(dt) * _diffusion_apply(spec, t, X, xi, s_const)
        t += dt
        if not np.all(np.isfinite(X)):
            raise DivergenceError(k, "non-finite surrogate state in batch")
    return X


# ---------------------------------------------------------------------------
# Value function and error-expansion densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueFunctionProbe:
    """Where and how to evaluate the value function y_t(x) = g(X_T^t(x))."""

    observable: Observable
    t: float
    x: np.ndarray
    eps_x: float = 1e-4
    eps_t: float = 1e-4
    mc_samples: int = 10_000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if self.eps_x <= 0 or self.eps_t <= 0:
            raise ValueError("finite-difference steps must be positive")


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    standard_error: float = 0.0


def value_function(probe: ValueFunctionProbe, spec: SurrogateSpec) -> ValueEstimate:
    """y_t(x): exact terminal value at t = T, flow endpoint for the ode kind,
    Monte Carlo mean with standard error for sde kinds."""
    T = spec.horizon
    if probe.t > T:
        raise ValueError("probe time beyond the horizon")
    if probe.t == T:
        return ValueEstimate(float(probe.observable(probe.x)), 0.0)
    if spec.kind == "ode":
        end = ode_flow(spec, probe.x, probe.t, T)
        return ValueEstimate(float(probe.observable(end)), 0.0)
    ends = sde_endpoint_batch(spec, probe.x, probe.t, T, probe.mc_samples, probe.seed)
    vals = np.asarray(probe.observable(ends), dtype=float)
    se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return ValueEstimate(float(vals.mean()), se)


def _y_values(spec: SurrogateSpec, g: Observable, t_start: float, xs: np.ndarray) -> np.ndarray:
    ends = ode_flow(spec, xs, t_start, spec.horizon)
    return np.asarray(g(ends), dtype=float)


def _time_stencil(t: float, eps_t: float):
    """Second-order stencils for d/dt and d2/dt2 that stay inside t >= 0."""
    if t - eps_t >= 0.0:
        offsets = np.array([-1.0, 0.0, 1.0])
        w1 = np.array([-0.5, 0.0, 0.5]) / eps_t
        w2 = np.array([1.0, -2.0, 1.0]) / eps_t**2
    else:
        offsets = np.array([0.0, 1.0, 2.0, 3.0])
        w1 = np.array([-1.5, 2.0, -0.5, 0.0]) / eps_t
        w2 = np.array([2.0, -5.0, 4.0, -1.0]) / eps_t**2
    return t + offsets * eps_t, w1, w2


def fk_residual(probe: ValueFunctionProbe, spec: SurrogateSpec) -> float:
    """Transport-equation defect d_t y + grad(y)^T (U_t Hbar) at the probe.

    Zero for the exact value function; finite differences leave an
    O(eps_x^2 + eps_t^2) remainder.
    """
    if spec.kind != "ode":
        raise ValueError("the transport residual is defined for the ode surrogate")
    x, t = probe.x, probe.t
    d = x.shape[0]
    times, w1, _ = _time_stencil(t, probe.eps_t)

    dty = 0.0
    for tt, w in zip(times, w1):
        if w != 0.0:
            dty += w * _y_values(spec, probe.observable, tt, x)

    shifts = np.zeros((2 * d, d))
    for j in range(d):
        shifts[2 * j, j] = probe.eps_x
        shifts[2 * j + 1, j] = -probe.eps_x
    ys = _y_values(spec, probe.observable, t, x + shifts)
    grad = (ys[0::2] - ys[1::2]) / (2.0 * probe.eps_x)

    v = spec.base_drift(t, x)
    return float(dty + grad @ v)


def _phi_parts(probe: ValueFunctionProbe, spec: SurrogateSpec):
    """y, grad, Hessian and the time-derivative pieces at the probe point."""
    g, x, t = probe.observable, probe.x, probe.t
    d = x.shape[0]
    ex = probe.eps_x
    times, w1, w2 = _time_stencil(t, probe.eps_t)
    center = int(np.argmin(np.abs(times - t)))

    # On-axis stencil (x and x +- eps e_j) evaluated at every stencil time.
    axis_points = [x]
    for j in range(d):
        e = np.zeros(d)
        e[j] = ex
        axis_points += [x + e, x - e]
    axis_points = np.stack(axis_points)

    y_axis = np.stack([_y_values(spec, g, tt, axis_points) for tt in times])
    y0 = y_axis[center, 0]
    grads = (y_axis[:, 1::2] - y_axis[:, 2::2]) / (2.0 * ex)

    dty = float(w1 @ y_axis[:, 0])
    dtt = float(w2 @ y_axis[:, 0])
    dtgrad = w1 @ grads

    hess = np.empty((d, d))
    for j in range(d):
        hess[j, j] = (y_axis[center, 1 + 2 * j] - 2.0 * y0 + y_axis[center, 2 + 2 * j]) / ex**2
    if d > 1:
        pairs = []
        for i in range(d):
            for j in range(i + 1, d):
                ei = np.zeros(d)
                ej = np.zeros(d)
                ei[i] = ex
                ej[j] = ex
                pairs += [x + ei + ej, x + ei - ej, x - ei + ej, x - ei - ej]
        y_pairs = _y_values(spec, g, times[center], np.stack(pairs))
        k = 0
        for i in range(d):
            for j in range(i + 1, d):
                val = (y_pairs[k] - y_pairs[k + 1] - y_pairs[k + 2] + y_pairs[k + 3]) / (4.0 * ex**2)
                hess[i, j] = hess[j, i] = val
                k += 4
    return y0, grads[center], hess, dty, dtt, dtgrad


def phi_density(probe: ValueFunctionProbe, spec: SurrogateSpec) -> float:
    """Deterministic part of the error-expansion integrand at (t, x):

        1/2 tr[grad^2 y vv^T] + d_t grad(y)^T v + 1/2 d_t^2 y,  v = U_t Hbar.
    """
    if spec.kind != "ode":
        raise ValueError("phi is assembled on the ode surrogate")
    _, _, hess, _, dtt, dtgrad = _phi_parts(probe, spec)
    v = spec.base_drift(probe.t, probe.x)
    return float(0.5 * v @ hess @ v + dtgrad @ v + 0.5 * dtt)


def capital_phi_density(probe: ValueFunctionProbe, spec: SurrogateSpec) -> float:
    """phi plus the noise trace term 1/2 tr[grad^2 y U_t U_t Sigma]."""
    if spec.kind != "ode":
        raise ValueError("Phi is assembled on the ode surrogate")
    _, _, hess, _, dtt, dtgrad = _phi_parts(probe, spec)
    v = spec.base_drift(probe.t, probe.x)
    phi = 0.5 * v @ hess @ v + dtgrad @ v + 0.5 * dtt
    u = spec.rate_diagonal(probe.t)
    sigma = spec.noise_covariance(probe.x)
    trace_term = 0.5 * np.trace(hess @ (np.diag(u * u) @ sigma))
    return float(phi + trace_term)


def capital_phi_profile(
    spec: SurrogateSpec,
    observable: Observable,
    x0,
    times: np.ndarray,
    eps_x: float = 1e-4,
    eps_t: float = 1e-4,
) -> np.ndarray:
    """Phi_t(X_t) along the deterministic trajectory at the given times."""
    path = ode_path(spec, np.atleast_1d(np.asarray(x0, dtype=float)), times)
    values = np.empty(len(times))
    for k, (tk, xk) in enumerate(zip(times, path)):
        probe = ValueFunctionProbe(observable=observable, t=tk, x=xk, eps_x=eps_x, eps_t=eps_t)
        values[k] = capital_phi_density(probe, spec)
    return values


def leading_error_integral(
    spec: SurrogateSpec,
    observable: Observable,
    x0,
    nodes: int = 101,
    eps_x: float = 1e-4,
    eps_t: float = 1e-4,
) -> float:
    """Simpson quadrature of Phi_t(X_t) along the deterministic trajectory.

    Returns the time integral over [0, horizon]; the leading weak-error term
    is this value scaled by h (the caller multiplies).
    """
    if nodes < 3:
        raise ValueError("need at least 3 quadrature nodes")
    if nodes % 2 == 0:
        nodes += 1
    times = np.linspace(0.0, spec.horizon, nodes)
    values = capital_phi_profile(spec, observable, x0, times, eps_x=eps_x, eps_t=eps_t)
    dt = times[1] - times[0]
    weights = np.ones(nodes)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return float(dt / 3.0 * weights @ values)


def linear_sde_moments(rate: float, noise: float, T: float, x0: float) -> tuple[float, float]:
    """Mean and variance at time T of dX = -rate X dt + noise dW from x0."""
    mean = x0 * np.exp(-rate * T)
    if rate == 0.0:
        return float(mean), float(noise**2 * T)
    var = noise**2 * (1.0 - np.exp(-2.0 * rate * T)) / (2.0 * rate)
    return float(mean), float(var)
