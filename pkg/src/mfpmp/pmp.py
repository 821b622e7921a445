"""
Finite-dimensional Pontryagin system for the N-follower problem.

The Hamiltonian is

    H_N = sum_i p_i . ((1/N) sum_j K(x_i - x_j) + g(y)(x_i))
        + sum_k q_k . ((1/N) sum_j K(y_k - x_j) + f_k(y) + B_k u)
        - L(y, mu_N) - gamma(u).

Follower adjoints are carried internally in the rescaled variable
``r = N p`` so that their magnitude does not decay with ``N``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .dynamics import (
    BLOWUP_CAP,
    ControlPath,
    SupportBounds,
    TimeGrid,
    Trajectory,
    _velocity,
    integrate_forward,
    with_bounds,
)
from .errors import BlowUpError, MfpmpError
from .model import ModelSpec, omega_mean, require_valid, running_cost

Array = np.ndarray

log = logging.getLogger(__name__)


class HamiltonianGradient(NamedTuple):
    """Partial gradients of ``H_N``; each block has the shape of its variable."""

    y: Array
    q: Array
    x: Array
    p: Array


def _as_blocks(spec: ModelSpec, y, q, x, p):
    y = np.asarray(y, dtype=float).reshape(spec.m, spec.d)
    q = np.asarray(q, dtype=float).reshape(spec.m, spec.d)
    x = np.asarray(x, dtype=float).reshape(-1, spec.d)
    p = np.asarray(p, dtype=float).reshape(x.shape)
    return y, q, x, p


def hamiltonian_N(spec: ModelSpec, y, q, x, p, u) -> float:
    """Evaluate the N-agent Hamiltonian at one point of phase space."""
    y, q, x, p = _as_blocks(spec, y, q, x, p)
    u = np.asarray(u, dtype=float).reshape(spec.D)
    dy, dx = _velocity(spec, y, x, spec.control_lift(u))
    return float(np.sum(p * dx) + np.sum(q * dy) - running_cost(spec, y, x) - spec.gamma(u))


class _AdjointOperator:
    """Affine map ``(q, r) -> (grad_y H_N, N grad_x H_N)`` frozen at one state.

    The adjoint equations are linear in ``(q, r)`` once the forward state is
    fixed, so the map is assembled as a dense matrix plus offset.  Every sum
    is differentiated term by term and no symmetry of the kernel is used,
    which keeps this path independent of the merged measure-level formula.
    """

    def __init__(self, spec: ModelSpec, y: Array, x: Array):
        m, d, n = spec.m, spec.d, x.shape[0]
        self.m, self.d, self.n = m, d, n
        P = (m + n) * d
        M = np.zeros((P, P))
        c = np.zeros(P)
        md = m * d
        if m:
            M[:md, :md] = spec.drift_jac(y).transpose(2, 3, 0, 1).reshape(md, md)
        if n:
            s = omega_mean(spec, x)
            nd = n * d
            Mxr = M[md:, md:].reshape(n, d, n, d)
            DKxx = spec.kernel_jac(x[:, None, :] - x[None, :, :])  # [i, j] = DK(x_i - x_j)
            # d/dx_i of (1/N^2) sum_a r_a . K(x_a - x_b) for the two slots, scaled by N
            Mxr -= DKxx.transpose(1, 3, 0, 2) / n
            idx = np.arange(n)
            diag = DKxx.sum(axis=1) / n + spec.field_jac_x(y, x)
            Mxr[idx, :, idx, :] += diag.transpose(0, 2, 1)
            gx0 = -spec.ell_grad_x(y, x, s)
            # the moment (1/N) sum_j omega(x_j) couples every l(., x_j, .) to x_i
            sbar = spec.ell_grad_s(y, x, s).mean(axis=0)
            gx0 -= np.einsum("iab,a->ib", spec.omega_jac(x), sbar)
            c[md:] = gx0.reshape(nd)
            if m:
                DKyx = spec.kernel_jac(y[:, None, :] - x[None, :, :])  # [k, i] = DK(y_k - x_i)
                M[md:, :md] = -DKyx.transpose(1, 3, 0, 2).reshape(nd, md)
                Myq = M[:md, :md].reshape(m, d, m, d)
                kidx = np.arange(m)
                Myq[kidx, :, kidx, :] += (DKyx.sum(axis=1) / n).transpose(0, 2, 1)
                M[:md, md:] = spec.field_jac_y(y, x).transpose(2, 3, 0, 1).reshape(md, nd) / n
                c[:md] = -spec.ell_grad_y(y, x, s).mean(axis=0).reshape(md)
        self.M, self.c = M, c

    def apply_flat(self, z: Array) -> Array:
        return self.M @ z + self.c

    def apply(self, q: Array, r: Array) -> tuple[Array, Array]:
        out = self.apply_flat(np.concatenate([q.reshape(-1), r.reshape(-1)]))
        md = self.m * self.d
        return out[:md].reshape(self.m, self.d), out[md:].reshape(self.n, self.d)


def _adjoint_field(spec: ModelSpec, y: Array, q: Array, x: Array, r: Array) -> tuple[Array, Array]:
    """Return ``(grad_y H_N, N grad_x H_N)`` with follower adjoints given as ``r``."""
    return _AdjointOperator(spec, y, x).apply(q, r)


def grad_hamiltonian(spec: ModelSpec, y, q, x, p, u) -> HamiltonianGradient:
    """All four partial gradients of :func:`hamiltonian_N`."""
    y, q, x, p = _as_blocks(spec, y, q, x, p)
    u = np.asarray(u, dtype=float).reshape(spec.D)
    n = x.shape[0]
    dq, dp = _velocity(spec, y, x, spec.control_lift(u))
    gy, gx_scaled = _adjoint_field(spec, y, q, x, n * p)
    gx = gx_scaled / n if n else gx_scaled
    return HamiltonianGradient(gy, dq, gx, dp)


# ----------------------------------------------------------------------------
# control maximization


def _projected_newton(spec: ModelSpec, z: Array, tol: float = 1e-12, max_iter: int = 100) -> Array:
    """Maximize ``z.u - gamma(u)`` over the box by projected Newton steps."""
    lo, hi = spec.lower, spec.upper
    u = np.clip(np.zeros(spec.D), lo, hi)

    def objective(v):
        return float(z @ v - spec.gamma(v))

    for _ in range(max_iter):
        g = z - spec.gamma_grad(u)  # ascent direction
        at_lo = (u <= lo + 1e-14) & (g < 0)
        at_hi = (u >= hi - 1e-14) & (g > 0)
        free = ~(at_lo | at_hi)
        proj = np.where(free, g, 0.0)
        if np.max(np.abs(proj), initial=0.0) <= tol:
            return u
        step = np.zeros_like(u)
        if free.any():
            H = spec.gamma_hess(u)[np.ix_(free, free)]
            step[free] = np.linalg.solve(H, g[free])
        f0 = objective(u)
        t = 1.0
        while True:
            cand = np.clip(u + t * step, lo, hi)
            if objective(cand) >= f0 + 1e-4 * float(g @ (cand - u)) or t < 1e-12:
                break
            t *= 0.5
        if np.max(np.abs(cand - u)) <= 1e-15:
            return cand
        u = cand
    raise MfpmpError(f"projected Newton did not converge in {max_iter} iterations")


def maximize_hamiltonian_control(spec: ModelSpec, q, method: str = "auto") -> Array:
    """Unique maximizer over the box of ``sum_k q_k . B_k u - gamma(u)``.

    ``method="closed"`` uses the clipped formula available for
    ``gamma = c |u|^2``; ``"newton"`` forces the generic projected Newton
    iteration; ``"auto"`` picks the closed form whenever it applies.
    """
    z = spec.control_pullback(np.asarray(q, dtype=float).reshape(spec.m, spec.d))
    if method == "auto":
        method = "closed" if spec.quadratic_weight is not None else "newton"
    if method == "closed":
        if spec.quadratic_weight is None:
            raise ValueError("closed-form maximizer needs a quadratic control cost")
        return np.clip(z / (2.0 * spec.quadratic_weight), spec.lower, spec.upper)
    if method == "newton":
        return _projected_newton(spec, z)
    raise ValueError(f"unknown method {method!r}")


def maximize_batch(spec: ModelSpec, qs: Array) -> Array:
    """Row-wise :func:`maximize_hamiltonian_control` for a stack ``(n, m, d)``."""
    qs = np.asarray(qs, dtype=float).reshape(-1, spec.m, spec.d)
    if spec.quadratic_weight is not None:
        z = np.einsum("kaj,tka->tj", spec.B, qs)
        return np.clip(z / (2.0 * spec.quadratic_weight), spec.lower, spec.upper)
    return np.array([maximize_hamiltonian_control(spec, q) for q in qs]).reshape(-1, spec.D)


# ----------------------------------------------------------------------------
# adjoint integration


@dataclass(frozen=True)
class AdjointPath:
    """Leader adjoints ``q`` ``(n+1, m, d)`` and follower adjoints ``p``, ``r = N p``."""

    q: Array
    p: Array
    r: Array

    @classmethod
    def from_rescaled(cls, q: Array, r: Array) -> "AdjointPath":
        n = r.shape[1]
        return cls(q, r / n if n else r.copy(), r)

    def cell_mean_q(self) -> Array:
        """Trapezoidal average of ``q`` over each grid cell."""
        return 0.5 * (self.q[:-1] + self.q[1:])


def integrate_backward(spec: ModelSpec, trajectory: Trajectory, cap: float = BLOWUP_CAP) -> AdjointPath:
    """Integrate the adjoint equations from ``(q, p)(T) = 0`` back to ``t = 0``.

    RK4 on the stored forward grid; the forward states at half steps are
    linearly interpolated.  The adjoint right-hand side does not involve the
    control, so only the trajectory is needed.
    """
    ys, xs = trajectory.y, trajectory.x
    n, h = trajectory.grid.n_steps, trajectory.grid.dt
    m, d, nf = spec.m, spec.d, trajectory.N
    md = m * d
    zs = np.zeros((n + 1, (m + nf) * d))
    z = zs[n].copy()
    op1 = _AdjointOperator(spec, ys[n], xs[n])
    for j in range(n - 1, -1, -1):
        opm = _AdjointOperator(spec, 0.5 * (ys[j] + ys[j + 1]), 0.5 * (xs[j] + xs[j + 1]))
        op0 = _AdjointOperator(spec, ys[j], xs[j])
        # z' = -(M z + c); stepping backwards with step -h
        k1 = op1.apply_flat(z)
        k2 = opm.apply_flat(z + 0.5 * h * k1)
        k3 = opm.apply_flat(z + 0.5 * h * k2)
        k4 = op0.apply_flat(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise BlowUpError(f"adjoint blow-up: non-finite value at step {j}", step=j)
        if np.max(np.abs(z), initial=0.0) > cap:
            raise BlowUpError(f"adjoint blow-up: magnitude above {cap:g} at step {j}", step=j)
        zs[j] = z
        op1 = op0
    qs = zs[:, :md].reshape(n + 1, m, d)
    rs = zs[:, md:].reshape(n + 1, nf, d)
    return AdjointPath.from_rescaled(qs, rs)


# ----------------------------------------------------------------------------
# reduced cost


def _running_cost_path(spec: ModelSpec, traj: Trajectory) -> Array:
    return np.array([running_cost(spec, traj.y[j], traj.x[j]) for j in range(len(traj))])


def cost_from_trajectory(spec: ModelSpec, traj: Trajectory) -> float:
    """``F_N``: trapezoidal rule for the state cost, exact for the cell-wise control cost."""
    L = _running_cost_path(spec, traj)
    dt = traj.grid.dt
    state_part = dt * (0.5 * L[0] + L[1:-1].sum() + 0.5 * L[-1])
    control_part = dt * sum(spec.gamma(u) for u in traj.control.values)
    return float(state_part + control_part)


def reduced_gradient(spec: ModelSpec, control: ControlPath, adjoint: AdjointPath) -> Array:
    """Per-cell gradient density ``gamma'(u_j) - sum_k B_k^T qbar_{k,j}``.

    ``qbar`` is the cell average of ``q``; ``dt`` times this value is the
    derivative of ``F_N`` with respect to the control value on cell ``j``.
    """
    qbar = adjoint.cell_mean_q()
    pull = np.einsum("kaj,tka->tj", spec.B, qbar)
    grads = np.array([spec.gamma_grad(u) for u in control.values]).reshape(pull.shape)
    return grads - pull


def reduced_cost_and_gradient(spec: ModelSpec, y0, x0, control: ControlPath):
    """Return ``(F_N(u), gradient)`` with the gradient from one adjoint pass."""
    traj = integrate_forward(spec, y0, x0, control)
    adj = integrate_backward(spec, traj)
    return cost_from_trajectory(spec, traj), reduced_gradient(spec, control, adj)


def projected_gradient(spec: ModelSpec, control: ControlPath, grad: Array, atol: float = 1e-12) -> Array:
    """Zero the components of ``grad`` that point out of the box at active bounds."""
    u = control.values
    at_lo = (u <= spec.lower + atol) & (grad > 0)
    at_hi = (u >= spec.upper - atol) & (grad < 0)
    return np.where(at_lo | at_hi, 0.0, grad)


# ----------------------------------------------------------------------------
# forward-backward sweep


@dataclass(frozen=True)
class SweepParams:
    damping: float = 0.3
    max_iters: int = 200
    tol: float = 1e-8
    hamiltonian_drift_tol: float = 1e-4

    def __post_init__(self):
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iters < 1 or self.tol <= 0:
            raise ValueError("need max_iters >= 1 and tol > 0")


@dataclass(frozen=True)
class ExtremalBundle:
    """Result of a forward-backward sweep."""

    trajectory: Trajectory
    adjoint: AdjointPath
    control: ControlPath
    residuals: Array
    costs: Array
    hamiltonian: Array
    bounds: SupportBounds
    converged: bool
    params: SweepParams = field(default_factory=SweepParams)

    @property
    def grid(self) -> TimeGrid:
        return self.trajectory.grid

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    @property
    def final_residual(self) -> float:
        return float(self.residuals[-1]) if len(self.residuals) else math.nan

    @property
    def cost(self) -> float:
        return float(self.costs[-1])

    @property
    def y(self):
        return self.trajectory.y

    @property
    def x(self):
        return self.trajectory.x

    @property
    def q(self):
        return self.adjoint.q

    @property
    def p(self):
        return self.adjoint.p

    @property
    def r(self):
        return self.adjoint.r

    @property
    def hamiltonian_drift(self) -> float:
        return float(np.ptp(self.hamiltonian))

    def summary(self) -> dict:
        return {
            "final_cost": self.cost,
            "iterations": self.iterations,
            "converged": self.converged,
            "final_residual": self.final_residual,
            "hamiltonian_drift": self.hamiltonian_drift,
            "bounds": self.bounds.as_dict(),
        }


def hamiltonian_series(spec: ModelSpec, traj: Trajectory, adj: AdjointPath) -> Array:
    """Maximized Hamiltonian ``max_u H_N`` at every node."""
    out = np.empty(len(traj))
    for j in range(len(traj)):
        u = maximize_hamiltonian_control(spec, adj.q[j])
        out[j] = hamiltonian_N(spec, traj.y[j], adj.q[j], traj.x[j], adj.p[j], u)
    return out


def _phase_bounds(traj: Trajectory, adj: AdjointPath) -> SupportBounds:
    n = traj.N
    R = 0.0
    if n:
        R = float(np.sqrt(np.max(np.sum(traj.x ** 2, axis=-1) + np.sum(adj.r ** 2, axis=-1))))
    mass = np.linalg.norm(adj.q, axis=-1).sum(axis=-1)
    if n:
        mass = mass + np.linalg.norm(adj.r, axis=-1).mean(axis=-1)
    return SupportBounds(traj.bounds.rho_T, R, float(np.max(mass)))


def forward_backward_sweep(
    spec: ModelSpec,
    y0,
    x0,
    grid: TimeGrid,
    params: SweepParams = SweepParams(),
    u_init: Optional[ControlPath] = None,
) -> ExtremalBundle:
    """Damped fixed-point iteration on the Pontryagin system.

    Each pass integrates the state forward, the adjoint backward, maximizes
    the cell-averaged Hamiltonian in the control and updates
    ``u <- (1 - damping) u + damping u_max``.  Iteration stops when the
    ``L^1``-in-time size of ``u_max - u`` drops below ``params.tol``; the
    returned bundle belongs to the last control tested.  Hitting
    ``max_iters`` emits a warning and returns with ``converged=False``.
    """
    require_valid(spec)
    u = ControlPath.zeros(grid, spec.D) if u_init is None else u_init
    if u.grid != grid:
        raise ValueError("u_init must live on the sweep grid")
    u = ControlPath(grid, np.clip(u.values, spec.lower, spec.upper))
    residuals, costs = [], []
    converged = False
    for it in range(params.max_iters):
        traj = integrate_forward(spec, y0, x0, u, grid)
        adj = integrate_backward(spec, traj)
        costs.append(cost_from_trajectory(spec, traj))
        u_max = ControlPath(grid, maximize_batch(spec, adj.cell_mean_q()))
        res = u.l1_distance(u_max)
        residuals.append(res)
        log.debug("sweep iteration %d: cost %.12g residual %.3e", it + 1, costs[-1], res)
        if res < params.tol:
            converged = True
            break
        lam = params.damping
        u = ControlPath(grid, (1.0 - lam) * u.values + lam * u_max.values)
    if not converged:
        warnings.warn(f"max_iters reached; last residual {residuals[-1]:.3e}", RuntimeWarning,
                      stacklevel=2)
    bounds = _phase_bounds(traj, adj)
    traj = with_bounds(traj, R_T=bounds.R_T, C_T=bounds.C_T)
    return ExtremalBundle(
        trajectory=traj,
        adjoint=adj,
        control=u,
        residuals=np.array(residuals),
        costs=np.array(costs),
        hamiltonian=hamiltonian_series(spec, traj, adj),
        bounds=bounds,
        converged=converged,
        params=params,
    )
