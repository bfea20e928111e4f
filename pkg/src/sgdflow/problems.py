"""Finite gradient families with a sampling law.

A :class:`GradientFamily` is a finite set of drift maps H_i: R^d -> R^d with
sampling probabilities p_i.  It supplies everything the discrete recursions
and the continuous surrogates need:

    mean_drift        Hbar(x)  = sum_i p_i H_i(x)
    covariance        Sigma(x) = sum_i p_i (H_i - Hbar)(H_i - Hbar)^T
    sqrt_covariance   the symmetric principal square root of Sigma(x)
    jacobian_mean_drift   sum_i p_i dH_i/dx

Built-in families (a scalar affine family, a quadratic family with explicit
matrices, and a tanh-saturated nonconvex mixture) all carry analytic
Jacobians and, where meaningful, scalar potentials f_i with H_i = -grad f_i.

Member maps are vectorized: an input of shape (..., d) yields (..., d).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradientFamily",
    "QuadraticFamilySpec",
    "NotPSDError",
    "principal_sqrt",
    "indices_from_uniform",
    "scalar_affine_family",
    "two_member_linear",
    "ou_family",
    "quadratic_family",
    "random_quadratic_family",
    "tanh_family",
]

_PROB_TOL = 1e-12


class NotPSDError(ValueError):
    """A covariance matrix had an eigenvalue below the PSD tolerance."""


def principal_sqrt(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetric principal square root of a symmetric PSD matrix (or stack).

    Eigenvalues in [-tol, 0) are clipped to zero; anything below -tol raises
    :class:`NotPSDError`.  The principal root is continuous in the matrix,
    which a Cholesky factor is not at rank drops.
    """
    mat = np.asarray(mat, dtype=float)
    w, v = np.linalg.eigh(mat)
    if np.any(w < -tol):
        raise NotPSDError(f"matrix has eigenvalue {w.min():.3e} below -{tol:.0e}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def indices_from_uniform(u, probabilities: np.ndarray) -> np.ndarray:
    """Map uniform(0,1) draws to member indices by inverse CDF."""
    cum = np.cumsum(probabilities)
    cum[-1] = 1.0
    return np.searchsorted(cum, u, side="right")


def _check_probabilities(probs: np.ndarray):
    if np.any(probs < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(probs.sum() - 1.0) > _PROB_TOL:
        raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")


@dataclass(frozen=True)
class GradientFamily:
    """Finite family of drift maps with sampling probabilities.

    Attributes:
        dim: state dimension d.
        probabilities: sampling law over the m members, summing to 1.
        members: m callables H_i mapping (..., d) -> (..., d).
        jacobians: optional m callables mapping (d,) -> (d, d).
        potentials: optional m scalar potentials f_i with H_i = -grad f_i,
            mapping (..., d) -> (...).
        growth_constant: declared C with |H_i(x)| <= C * (1 + |x|).
        constant_covariance: True when Sigma(x) does not depend on x,
            letting integrators factor the noise matrix once.
        constant_jacobian: True when every member Jacobian is independent
            of x (affine members), so batched drift corrections can reuse
            a single matrix.
    """

    dim: int
    probabilities: np.ndarray
    members: tuple[Callable, ...]
    jacobians: tuple[Callable, ...] | None = None
    potentials: tuple[Callable, ...] | None = None
    growth_constant: float = 1.0
    constant_covariance: bool = False
    constant_jacobian: bool = False
    name: str = "family"

    def __post_init__(self):
        probs = np.atleast_1d(np.asarray(self.probabilities, dtype=float))
        _check_probabilities(probs)
        if len(self.members) != probs.shape[0]:
            raise ValueError("one probability per member required")
        object.__setattr__(self, "probabilities", probs)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def member_drift(self, index: int, x: np.ndarray) -> np.ndarray:
        """H_index evaluated at x (vectorized over leading axes)."""
        return self.members[index](np.asarray(x, dtype=float))

    def drift_stack(self, x: np.ndarray) -> np.ndarray:
        """All member drifts at x, stacked on a new leading axis (m, ..., d)."""
        x = np.asarray(x, dtype=float)
        return np.stack([H(x) for H in self.members], axis=0)

    def drift_at_indices(self, indices: np.ndarray, x: np.ndarray) -> np.ndarray:
        """H_{indices[k]}(x[k]) for a batch of states with per-row members."""
        stack = self.drift_stack(x)
        return np.take_along_axis(stack, indices[None, :, None], axis=0)[0]

    def mean_drift(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("mean_drift evaluated at non-finite point")
        stack = self.drift_stack(x)
        p = self.probabilities.reshape((-1,) + (1,) * (stack.ndim - 1))
        return np.sum(p * stack, axis=0)

    def covariance(self, x: np.ndarray) -> np.ndarray:
        """Sigma(x), symmetric PSD by construction."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("covariance evaluated at non-finite point")
        stack = self.drift_stack(x)
        p = self.probabilities.reshape((-1,) + (1,) * (stack.ndim - 1))
        mean = np.sum(p * stack, axis=0)
        dev = stack - mean
        return np.einsum("m...i,m...j,m->...ij", dev, dev, self.probabilities)

    def sqrt_covariance(self, x: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        """Symmetric S with S S^T = Sigma(x)."""
        return principal_sqrt(self.covariance(x), tol=tol)

    def jacobian_mean_drift(self, x: np.ndarray) -> np.ndarray:
        """d(Hbar)/dx at x; requires analytic member Jacobians."""
        if self.jacobians is None:
            raise ValueError("family does not provide member Jacobians")
        x = np.asarray(x, dtype=float)
        jacs = np.stack([J(x) for J in self.jacobians], axis=0)
        p = self.probabilities.reshape((-1,) + (1,) * (jacs.ndim - 1))
        return np.sum(p * jacs, axis=0)

    def potential(self, index: int, x: np.ndarray):
        """Scalar potential f_index with H_index = -grad f_index."""
        if self.potentials is None:
            raise ValueError("family does not provide scalar potentials")
        return self.potentials[index](np.asarray(x, dtype=float))

    def sample_index(self, rng: np.random.Generator) -> int:
        """One categorical draw from the sampling law."""
        return int(indices_from_uniform(rng.random(), self.probabilities))


# ---------------------------------------------------------------------------
# Built-in family zoo
# ---------------------------------------------------------------------------


def scalar_affine_family(
    slopes: Sequence[float],
    offsets: Sequence[float] | None = None,
    probs: Sequence[float] | None = None,
    name: str = "scalar-affine",
) -> GradientFamily:
    """1-d family H_i(x) = -a_i x + b_i with potentials a_i x^2/2 - b_i x."""
    slopes = np.asarray(slopes, dtype=float)
    m = slopes.shape[0]
    offsets = np.zeros(m) if offsets is None else np.asarray(offsets, dtype=float)
    probs = np.full(m, 1.0 / m) if probs is None else np.asarray(probs, dtype=float)

    def make_member(a, b):
        return lambda x: -a * x + b

    def make_jac(a):
        return lambda x: np.array([[-a]])

    def make_pot(a, b):
        return lambda x: 0.5 * a * x[..., 0] ** 2 - b * x[..., 0]

    growth = float(np.max(np.abs(slopes) + np.abs(offsets)) + 1e-9)
    return GradientFamily(
        dim=1,
        probabilities=probs,
        members=tuple(make_member(a, b) for a, b in zip(slopes, offsets)),
        jacobians=tuple(make_jac(a) for a in slopes),
        potentials=tuple(make_pot(a, b) for a, b in zip(slopes, offsets)),
        growth_constant=growth,
        constant_covariance=bool(np.allclose(slopes, slopes[0])),
        constant_jacobian=True,
        name=name,
    )


def two_member_linear(
    slopes: Sequence[float] = (1.0, 2.0), probs: Sequence[float] = (0.5, 0.5)
) -> GradientFamily:
    """The scalar benchmark pair H_1(x) = -x, H_2(x) = -2x (by default)."""
    return scalar_affine_family(slopes, probs=probs, name="two-member-linear")


def ou_family(rate: float = 1.0, noise: float = 1.0) -> GradientFamily:
    """Equal mixture of H(x) = -rate*x + noise and -rate*x - noise.

    Mean drift -rate*x with constant covariance noise^2: the discrete chain
    is a random walk whose surrogate is an Ornstein-Uhlenbeck process.
    """
    return scalar_affine_family(
        (rate, rate), offsets=(noise, -noise), probs=(0.5, 0.5), name="ou"
    )


@dataclass(frozen=True)
class QuadraticFamilySpec:
    """Explicit quadratic family: H_i(x) = -A_i (x - c_i), A_i symmetric."""

    matrices: np.ndarray  # (m, d, d)
    centers: np.ndarray  # (m, d)
    probabilities: np.ndarray  # (m,)

    def __post_init__(self):
        A = np.asarray(self.matrices, dtype=float)
        c = np.asarray(self.centers, dtype=float)
        p = np.asarray(self.probabilities, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError("matrices must have shape (m, d, d)")
        if not np.allclose(A, np.swapaxes(A, 1, 2)):
            raise ValueError("quadratic family matrices must be symmetric")
        if c.shape != (A.shape[0], A.shape[1]):
            raise ValueError("centers must have shape (m, d)")
        _check_probabilities(p)
        object.__setattr__(self, "matrices", A)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "probabilities", p)

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_members(self) -> int:
        return self.matrices.shape[0]

    def to_csv(self, path):
        """Write matrices and centers row-major under a ``d,m`` header."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["d", "m"])
            writer.writerow([self.dim, self.n_members])
            for A in self.matrices:
                for row in A:
                    writer.writerow([repr(float(v)) for v in row])
            for c in self.centers:
                writer.writerow([repr(float(v)) for v in c])

    @classmethod
    def from_csv(cls, path, probabilities: Sequence[float]) -> "QuadraticFamilySpec":
        """Read matrices and centers written by :meth:`to_csv`."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if [c.strip() for c in rows[0]] != ["d", "m"]:
            raise ValueError('quadratic CSV must start with a "d,m" header row')
        d, m = (int(v) for v in rows[1])
        body = [[float(v) for v in r] for r in rows[2:]]
        if len(body) != m * d + m:
            raise ValueError(f"expected {m * d + m} data rows, found {len(body)}")
        matrices = np.array(body[: m * d], dtype=float).reshape(m, d, d)
        centers = np.array(body[m * d :], dtype=float).reshape(m, d)
        return cls(matrices=matrices, centers=centers, probabilities=np.asarray(probabilities, dtype=float))


def quadratic_family(spec: QuadraticFamilySpec) -> GradientFamily:
    """Family induced by a :class:`QuadraticFamilySpec`; all derivatives exact."""

    def make_member(A, c):
        return lambda x: -(x - c) @ A.T

    def make_jac(A):
        return lambda x: -A

    def make_pot(A, c):
        return lambda x: 0.5 * np.einsum("...i,ij,...j->...", x - c, A, x - c)

    growth = float(
        max(
            np.linalg.norm(A, 2) * (1.0 + np.linalg.norm(c))
            for A, c in zip(spec.matrices, spec.centers)
        )
        + 1e-9
    )
    return GradientFamily(
        dim=spec.dim,
        probabilities=spec.probabilities,
        members=tuple(make_member(A, c) for A, c in zip(spec.matrices, spec.centers)),
        jacobians=tuple(make_jac(A) for A in spec.matrices),
        potentials=tuple(make_pot(A, c) for A, c in zip(spec.matrices, spec.centers)),
        growth_constant=growth,
        constant_covariance=False,
        constant_jacobian=True,
        name="quadratic",
    )


def random_quadratic_family(
    dim: int,
    n_members: int,
    seed: int = 0,
    eig_range: tuple[float, float] = (0.2, 1.0),
    center_scale: float = 1.0,
) -> GradientFamily:
    """Random SPD quadratic family with eigenvalues drawn from eig_range."""
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(n_members):
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eigs = rng.uniform(*eig_range, size=dim)
        mats.append(q @ np.diag(eigs) @ q.T)
    centers = rng.uniform(-center_scale, center_scale, size=(n_members, dim))
    probs = rng.uniform(0.5, 1.5, size=n_members)
    probs /= probs.sum()
    spec = QuadraticFamilySpec(
        matrices=np.array(mats), centers=centers, probabilities=probs
    )
    return quadratic_family(spec)


def tanh_family(
    scales: Sequence[float],
    centers: Sequence[Sequence[float]],
    probs: Sequence[float] | None = None,
    name: str = "tanh-mixture",
) -> GradientFamily:
    """Saturated nonconvex family H_i(x) = -s_i tanh(x - c_i), elementwise.

    Bounded drift with bounded derivatives of all orders; distinct centers
    give the mean potential multiple stationary points.
    """
    scales = np.asarray(scales, dtype=float)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    m, d = centers.shape
    probs = np.full(m, 1.0 / m) if probs is None else np.asarray(probs, dtype=float)

    def make_member(s, c):
        return lambda x: -s * np.tanh(x - c)

    def make_jac(s, c):
        return lambda x: np.diag(-s / np.cosh(x - c) ** 2)

    def make_pot(s, c):
        return lambda x: s * np.sum(np.log(np.cosh(x - c)), axis=-1)

    growth = float(np.max(np.abs(scales)) * np.sqrt(d) + 1e-9)
    return GradientFamily(
        dim=d,
        probabilities=probs,
        members=tuple(make_member(s, c) for s, c in zip(scales, centers)),
        jacobians=tuple(make_jac(s, c) for s, c in zip(scales, centers)),
        potentials=tuple(make_pot(s, c) for s, c in zip(scales, centers)),
        growth_constant=growth,
        constant_covariance=False,
        name=name,
    )
