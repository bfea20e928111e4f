"""Smooth terminal observables g applied to trajectory endpoints.

The registry keeps observables nameable from config files:

    coordinate   g(x) = x[index]
    quadratic    g(x) = x^T Q x   (Q defaults to the identity)
    bump         g(x) = exp(-|x - center|^2 / (2 width^2))
    constant     g(x) = value     (degenerate check case)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["Observable", "make_observable", "OBSERVABLES"]


@dataclass(frozen=True)
class Observable:
    """Named scalar function of the state, vectorized over leading axes."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray):
        out = self.fn(np.asarray(x, dtype=float))
        return out if np.ndim(out) else float(out)


def _coordinate(index: int = 0) -> Observable:
    return Observable(f"coordinate[{index}]", lambda x: x[..., index])


def _quadratic(matrix=None) -> Observable:
    if matrix is None:
        return Observable("quadratic", lambda x: np.sum(x * x, axis=-1))
    Q = np.asarray(matrix, dtype=float)
    return Observable("quadratic", lambda x: np.einsum("...i,ij,...j->...", x, Q, x))


def _bump(center=0.0, width: float = 1.0) -> Observable:
    c = np.asarray(center, dtype=float)
    return Observable(
        "bump",
        lambda x: np.exp(-np.sum((x - c) ** 2, axis=-1) / (2.0 * width**2)),
    )


def _constant(value: float = 1.0) -> Observable:
    return Observable("constant", lambda x: np.full(x.shape[:-1], float(value)))


OBSERVABLES: dict[str, Callable[..., Observable]] = {
    "coordinate": _coordinate,
    "quadratic": _quadratic,
    "bump": _bump,
    "constant": _constant,
}


def make_observable(name: str, **params) -> Observable:
    """Build a registry observable from its name and parameters."""
    if name not in OBSERVABLES:
        raise ValueError(f"unknown observable {name!r}; expected one of {sorted(OBSERVABLES)}")
    return OBSERVABLES[name](**params)
