"""Uniform empirical measures, the phase-space lift and exact transport distances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import linear_sum_assignment

from .io import read_csv, write_csv

Array = np.ndarray


def _atoms(a, name: str) -> Array:
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"{name} needs at least one atom, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite coordinates")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """``(1/N) sum_i delta_{atoms[i]}`` for ``atoms`` of shape ``(N, n)``."""

    atoms: Array

    def __post_init__(self):
        object.__setattr__(self, "atoms", _atoms(self.atoms, "EmpiricalMeasure"))

    @property
    def N(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> Array:
        return self.atoms.mean(axis=0)

    def integrate(self, fn) -> float:
        """``int fn dmu`` for a callable acting row-wise on ``(N, n)``."""
        return float(np.mean(fn(self.atoms)))

    def replicate(self, times: int) -> "EmpiricalMeasure":
        """Same measure written with every atom repeated ``times`` times."""
        return EmpiricalMeasure(np.repeat(self.atoms, times, axis=0))


@dataclass(frozen=True, eq=False)
class PhaseMeasure:
    """Uniform measure on pairs ``(x_i, r_i)``; ``x`` and ``r`` are ``(N, d)``."""

    x: Array
    r: Array

    def __post_init__(self):
        x = _atoms(self.x, "PhaseMeasure.x")
        r = _atoms(self.r, "PhaseMeasure.r")
        if r.shape != x.shape:
            raise ValueError(f"x and r shapes differ: {x.shape} vs {r.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "r", r)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def atoms(self) -> Array:
        """Atoms stacked as ``(N, 2d)`` rows ``(x_i, r_i)``."""
        return np.hstack([self.x, self.r])

    def support_radius(self) -> float:
        return float(np.sqrt(np.max(np.sum(self.x ** 2, axis=1) + np.sum(self.r ** 2, axis=1))))


def lift(x, p) -> PhaseMeasure:
    """Phase-space lift: atoms ``(x_i, N p_i)`` with weight ``1/N``."""
    x = _atoms(x, "x")
    p = np.asarray(p, dtype=float).reshape(-1, x.shape[1])
    if p.shape[0] != x.shape[0]:
        raise ValueError(f"x has {x.shape[0]} atoms, p has {p.shape[0]}")
    return PhaseMeasure(x, x.shape[0] * p)


def marginal(nu: PhaseMeasure, which: Literal["first", "second"] = "first") -> EmpiricalMeasure:
    if which == "first":
        return EmpiricalMeasure(nu.x)
    if which == "second":
        return EmpiricalMeasure(nu.r)
    raise ValueError(f"which must be 'first' or 'second', got {which!r}")


def _coords(mu) -> Array:
    return mu.atoms if isinstance(mu, (EmpiricalMeasure, PhaseMeasure)) else _atoms(mu, "measure")


def cost_matrix(a: Array, b: Array, p: float) -> Array:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1)) ** p


def wasserstein(mu, nu, p: int = 1, method: str = "auto") -> float:
    """Exact ``W_p`` between two uniform empirical measures with equal atom counts.

    In one dimension both atom lists are sorted and matched in order.  In
    higher dimension the assignment problem on ``|x_i - y_j|^p`` is solved
    exactly by :func:`scipy.optimize.linear_sum_assignment`.
    ``method`` may force ``"sort"`` (1-D only) or ``"assignment"``.

    Raises
    ------
    ValueError
        ``"unequal support sizes unsupported"`` when the atom counts differ.
    """
    a, b = _coords(mu), _coords(nu)
    if a.shape[0] != b.shape[0]:
        raise ValueError("unequal support sizes unsupported")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if p < 1:
        raise ValueError("p must be >= 1")
    n = a.shape[0]
    if method == "auto":
        method = "sort" if a.shape[1] == 1 else "assignment"
    if method == "sort":
        if a.shape[1] != 1:
            raise ValueError("sort formula needs one-dimensional atoms")
        total = np.sum(np.abs(np.sort(a[:, 0]) - np.sort(b[:, 0])) ** p)
    elif method == "assignment":
        C = cost_matrix(a, b, p)
        rows, cols = linear_sum_assignment(C)
        total = np.sum(C[rows, cols])
    else:
        raise ValueError(f"unknown method {method!r}")
    return float((total / n) ** (1.0 / p))


def leader_distance(y, y2) -> float:
    """``sum_k |y_k - y'_k|`` on leader blocks of shape ``(m, d)``."""
    diff = np.asarray(y, dtype=float) - np.asarray(y2, dtype=float)
    return float(np.sum(np.linalg.norm(diff.reshape(diff.shape[0], -1), axis=1))) if diff.size else 0.0


def state_distance(y, mu, y2, mu2) -> float:
    """Product distance ``sum_k |y_k - y'_k| + W_1(mu, mu')`` on leaders and followers."""
    return leader_distance(y, y2) + wasserstein(mu, mu2, p=1)


def write_measure_csv(path, measure, comment: str = "") -> None:
    """One atom per row; columns ``c0, c1, ...`` or ``x0.., r0..`` for phase measures."""
    if isinstance(measure, PhaseMeasure):
        cols = [f"x{i}" for i in range(measure.d)] + [f"r{i}" for i in range(measure.d)]
    else:
        cols = [f"c{i}" for i in range(measure.dim)]
    write_csv(path, cols, measure.atoms, comment)


def read_measure_csv(path) -> EmpiricalMeasure:
    return EmpiricalMeasure(read_csv(path)[1])
