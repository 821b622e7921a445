"""Forward integration of the finite leader-follower system."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import BlowUpError
from .model import ModelSpec, require_valid

Array = np.ndarray

BLOWUP_CAP = 1e6


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_j = j * T / n_steps`` on ``[0, T]``."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not (self.T > 0) or int(self.n_steps) < 1:
            raise ValueError(f"need T > 0 and n_steps >= 1, got T={self.T}, n_steps={self.n_steps}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> Array:
        return np.arange(self.n_steps + 1) * self.dt

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * factor)


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control: ``values[j]`` acts on ``[t_j, t_{j+1})``."""

    grid: TimeGrid
    values: Array

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_steps:
            raise ValueError(f"control has {v.shape[0]} cells, grid has {self.grid.n_steps}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: TimeGrid, D: int) -> "ControlPath":
        return cls(grid, np.zeros((grid.n_steps, D)))

    @classmethod
    def constant(cls, grid: TimeGrid, u) -> "ControlPath":
        u = np.asarray(u, dtype=float).reshape(-1)
        return cls(grid, np.tile(u, (grid.n_steps, 1)))

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def node_values(self) -> Array:
        """Values at every node, the last cell's value repeated at ``t = T``."""
        return np.vstack([self.values, self.values[-1:]])

    def l1_distance(self, other: "ControlPath") -> float:
        """``int_0^T |u(t) - v(t)| dt`` with the Euclidean norm pointwise."""
        diff = np.linalg.norm(self.values - other.values, axis=1)
        return float(self.grid.dt * diff.sum())

    def resample(self, grid: TimeGrid) -> "ControlPath":
        """Sample onto another grid by evaluating at each new cell's left node."""
        idx = np.minimum((grid.times[:-1] / self.grid.dt + 1e-9).astype(int), self.grid.n_steps - 1)
        return ControlPath(grid, self.values[idx])


@dataclass(frozen=True)
class SwarmState:
    """Leaders ``y`` with shape ``(m, d)`` and followers ``x`` with shape ``(N, d)``."""

    y: Array
    x: Array

    @property
    def N(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class SupportBounds:
    """Measured radii of a run.

    ``rho_T`` bounds every agent norm, ``R_T`` every phase-space atom
    ``(x_i, r_i)`` and ``C_T`` the adjoint mass
    ``sum_k |q_k| + (1/N) sum_i |r_i|``.  The last two are ``nan`` until an
    adjoint pass fills them.
    """

    rho_T: float
    R_T: float = math.nan
    C_T: float = math.nan

    def as_dict(self) -> dict:
        return {"rho_T": self.rho_T, "R_T": self.R_T, "C_T": self.C_T}


@dataclass(frozen=True)
class Trajectory:
    """States at every node: ``y`` is ``(n+1, m, d)``, ``x`` is ``(n+1, N, d)``."""

    grid: TimeGrid
    y: Array
    x: Array
    control: ControlPath
    bounds: SupportBounds = field(default_factory=lambda: SupportBounds(math.nan))

    def __len__(self):
        return self.y.shape[0]

    def state(self, j: int) -> SwarmState:
        return SwarmState(self.y[j], self.x[j])

    @property
    def N(self) -> int:
        return self.x.shape[1]


# ----------------------------------------------------------------------------
# right-hand side


def kernel_convolution(spec: ModelSpec, atoms: Array, z: Array) -> Array:
    """Return ``(1/N) sum_j K(z - x_j)`` for a point or a stack of points ``z``."""
    atoms = np.asarray(atoms, dtype=float).reshape(-1, spec.d)
    z = np.asarray(z, dtype=float)
    if atoms.shape[0] == 0:
        return np.zeros_like(z)
    return spec.kernel(z[..., None, :] - atoms).mean(axis=-2)


def _velocity(spec: ModelSpec, y: Array, x: Array, bu: Array) -> tuple[Array, Array]:
    if x.shape[0]:
        dy = spec.kernel(y[:, None, :] - x[None, :, :]).mean(axis=1)
        dx = spec.kernel(x[:, None, :] - x[None, :, :]).mean(axis=1)
        dx += spec.field(y, x)
    else:
        dy = np.zeros_like(y)
        dx = np.zeros_like(x)
    if y.shape[0]:
        dy = dy + spec.drift(y) + bu
    return dy, dx


def _clamp(spec: ModelSpec, u: Array) -> Array:
    u = np.asarray(u, dtype=float).reshape(spec.D)
    clipped = np.clip(u, spec.lower, spec.upper)
    if np.max(np.abs(clipped - u), initial=0.0) > 1e-12:
        warnings.warn("control outside the admissible box was clamped", RuntimeWarning, stacklevel=3)
    return clipped


def rhs_discrete(spec: ModelSpec, state: SwarmState, u) -> SwarmState:
    """Time derivative of ``state`` under control ``u`` (clamped to the box)."""
    y = np.asarray(state.y, dtype=float).reshape(spec.m, spec.d)
    x = np.asarray(state.x, dtype=float).reshape(-1, spec.d)
    dy, dx = _velocity(spec, y, x, spec.control_lift(_clamp(spec, u)))
    if not (np.all(np.isfinite(dy)) and np.all(np.isfinite(dx))):
        raise BlowUpError("right-hand side is non-finite")
    return SwarmState(dy, dx)


def _max_norm(*arrays: Array) -> float:
    out = 0.0
    for a in arrays:
        if a.size:
            out = max(out, float(np.sqrt(np.max(np.sum(a * a, axis=-1)))))
    return out


def integrate_forward(
    spec: ModelSpec,
    y0,
    x0,
    control: ControlPath,
    grid: Optional[TimeGrid] = None,
    cap: float = BLOWUP_CAP,
    soft_bound: Optional[float] = None,
) -> Trajectory:
    """Classical RK4 with the control frozen at its cell value.

    Parameters
    ----------
    soft_bound
        Optional a-priori radius (e.g. :func:`gronwall_support_bound`); a
        warning is issued if the measured support exceeds it.

    Raises
    ------
    BlowUpError
        On non-finite states or agent norms above ``cap``.
    """
    require_valid(spec)
    grid = control.grid if grid is None else grid
    if grid != control.grid:
        raise ValueError("control must be defined on the integration grid")
    y = np.array(y0, dtype=float).reshape(spec.m, spec.d)
    x = np.array(x0, dtype=float).reshape(-1, spec.d)
    n, h = grid.n_steps, grid.dt
    ys = np.empty((n + 1, spec.m, spec.d))
    xs = np.empty((n + 1,) + x.shape)
    ys[0], xs[0] = y, x
    for j, u in enumerate(control.values):
        bu = spec.control_lift(_clamp(spec, u))
        k1y, k1x = _velocity(spec, y, x, bu)
        k2y, k2x = _velocity(spec, y + 0.5 * h * k1y, x + 0.5 * h * k1x, bu)
        k3y, k3x = _velocity(spec, y + 0.5 * h * k2y, x + 0.5 * h * k2x, bu)
        k4y, k4x = _velocity(spec, y + h * k3y, x + h * k3x, bu)
        y = y + (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        x = x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise BlowUpError(f"trajectory blow-up: non-finite state at step {j + 1}", step=j + 1)
        if _max_norm(y, x) > cap:
            raise BlowUpError(f"trajectory blow-up: support radius above {cap:g} at step {j + 1}",
                              step=j + 1)
        ys[j + 1], xs[j + 1] = y, x
    rho = _max_norm(ys.reshape(-1, spec.d), xs.reshape(-1, spec.d))
    if soft_bound is not None and rho > soft_bound:
        warnings.warn(f"support radius {rho:.3g} exceeds the Gronwall estimate {soft_bound:.3g}; "
                      "growth constants are likely underestimated", RuntimeWarning, stacklevel=2)
    return Trajectory(grid, ys, xs, control, SupportBounds(rho))


# ----------------------------------------------------------------------------
# a-priori radii


def growth_constants(C_K: float, F1: float = 0.0, F2: float = 0.0, G1: float = 0.0,
                     G2: float = 0.0, G3: float = 0.0, M1: float = 0.0) -> tuple[float, float]:
    """Return ``(C1, C2)`` for the energy estimate ``a' <= 2 C1 a + 2 C2``.

    ``M1`` bounds ``|B_k u|`` over the control box.  ``G1`` is included in
    ``C1`` since the follower term ``G1 |x|^2`` enters the same estimate.
    These constants come from configuration, so the resulting radius is a
    heuristic monitor rather than a certified bound.
    """
    return 4.0 * C_K + F1 + G1 + G2 + M1, C_K + F2 + G3 + M1


def initial_energy(y0, x0) -> float:
    """``max_{k,i} |y_k|^2 + |x_i|^2`` at time zero."""
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    ny = float(np.max(np.sum(y0 ** 2, axis=-1))) if y0.size else 0.0
    nx = float(np.max(np.sum(x0 ** 2, axis=-1))) if x0.size else 0.0
    return ny + nx


def gronwall_support_bound(T: float, C0: float, C1: float, C2: float) -> float:
    """``rho_T = sqrt(C0 + 2 C2 T) exp(C1 T)``."""
    return math.sqrt(C0 + 2.0 * C2 * T) * math.exp(C1 * T)


def adjoint_mass_bound(L_T: float, d: int, T: float) -> float:
    """``sqrt(d) L_T T (1 + 2 L_T) exp(4 sqrt(d) L_T T)``."""
    sd = math.sqrt(d)
    return sd * L_T * T * (1.0 + 2.0 * L_T) * math.exp(4.0 * sd * L_T * T)


def with_bounds(traj: Trajectory, **kw) -> Trajectory:
    return replace(traj, bounds=replace(traj.bounds, **kw))
