"""
Measure-level Pontryagin system on the phase space of ``(x, r)``.

The mean-field Hamiltonian of a phase measure ``nu`` with first marginal
``mu`` is

    H_c = (1/2) int int (r - r') . K(x - x') dnu dnu' + int r . g(y)(x) dnu
        + sum_k q_k . ((K * mu)(y_k) + f_k(y) + B_k u) - L(y, mu) - gamma(u),

finite on measures supported in the ball of radius ``R_T`` and ``+inf``
elsewhere.  ``nu`` is transported by ``J grad_nu H_c``.  Everything here is
evaluated on empirical measures, which only see their own atoms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import SupportError
from .measures import EmpiricalMeasure, PhaseMeasure, lift
from .model import ModelSpec, omega_mean, running_cost
from .pmp import ExtremalBundle, grad_hamiltonian, hamiltonian_N, maximize_hamiltonian_control

Array = np.ndarray

SUPPORT_MESSAGE = "measure outside R_T ball: H_c = +∞"


def symplectic_matrix(d: int) -> Array:
    """``J = [[0, I], [-I, 0]]`` of size ``2d``."""
    I = np.eye(d)
    Z = np.zeros((d, d))
    return np.block([[Z, I], [-I, Z]])


@dataclass(frozen=True, eq=False)
class MeanFieldPoint:
    """Argument of ``H_c``: leaders ``y``, their adjoints ``q``, ``nu`` and ``u``."""

    y: Array
    q: Array
    nu: PhaseMeasure
    u: Array
    R_T: float = math.inf

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        object.__setattr__(self, "y", y.reshape(-1, self.nu.d) if y.size else y.reshape(0, self.nu.d))
        object.__setattr__(self, "q", np.array(self.q, dtype=float).reshape(self.y.shape))
        object.__setattr__(self, "u", np.array(self.u, dtype=float).reshape(-1))

    def check_support(self) -> None:
        if self.nu.support_radius() > self.R_T:
            raise SupportError(SUPPORT_MESSAGE)


def _point(spec: ModelSpec, y, q, x, r, u, R_T=math.inf) -> MeanFieldPoint:
    y = np.asarray(y, dtype=float).reshape(spec.m, spec.d)
    return MeanFieldPoint(y, q, PhaseMeasure(x, r), u, R_T)


def hamiltonian_mf(spec: ModelSpec, point: MeanFieldPoint) -> float:
    """``H_c`` on an empirical phase measure.

    Raises
    ------
    SupportError
        If an atom of ``nu`` lies outside the ball of radius ``point.R_T``.
    """
    point.check_support()
    x, r = point.nu.x, point.nu.r
    y, q = point.y, point.q
    n = x.shape[0]
    Kxx = spec.kernel(x[:, None, :] - x[None, :, :])
    val = np.sum((r[:, None, :] - r[None, :, :]) * Kxx) / (2.0 * n * n)
    val += np.sum(r * spec.field(y, x)) / n
    if spec.m:
        val += np.sum(q[:, None, :] * spec.kernel(y[:, None, :] - x[None, :, :])) / n
        val += np.sum(q * (spec.drift(y) + spec.control_lift(point.u)))
    return float(val - running_cost(spec, y, x) - spec.gamma(point.u))


def wasserstein_gradient(spec: ModelSpec, point: MeanFieldPoint, at=None) -> Array:
    """``grad_nu H_c`` at phase points ``at`` of shape ``(P, 2d)`` (default: atoms).

    Returns ``(P, 2d)`` rows ``(x-block, r-block)``.  The x-block uses the
    evenness of ``DK`` to merge both kernel slots, and the moment term is
    ``Domega(x)^T`` times the ``nu``-average of ``grad_s l``.
    """
    point.check_support()
    d = spec.d
    x, r = point.nu.x, point.nu.r
    y, q = point.y, point.q
    Z = np.hstack([x, r]) if at is None else np.asarray(at, dtype=float).reshape(-1, 2 * d)
    X, R = Z[:, :d], Z[:, d:]
    n = x.shape[0]

    DK = spec.kernel_jac(X[:, None, :] - x[None, :, :])
    gx = np.einsum("pja,pjal->pl", R[:, None, :] - r[None, :, :], DK) / n
    gx += np.einsum("pa,pal->pl", R, spec.field_jac_x(y, X))
    if spec.m:
        gx -= np.einsum("ka,kpal->pl", q, spec.kernel_jac(y[:, None, :] - X[None, :, :]))
    s = omega_mean(spec, x)
    gx -= spec.ell_grad_x(y, X, s)
    sbar = spec.ell_grad_s(y, x, s).mean(axis=0)
    gx -= np.einsum("pab,a->pb", spec.omega_jac(X), sbar)

    gr = spec.kernel(X[:, None, :] - x[None, :, :]).mean(axis=1) + spec.field(y, X)
    return np.hstack([gx, gr])


def flow_field(spec: ModelSpec, point: MeanFieldPoint, at=None) -> Array:
    """``J grad_nu H_c``: rows ``(r-block, -x-block)``."""
    g = wasserstein_gradient(spec, point, at)
    return g @ symplectic_matrix(spec.d).T


def e_uguale_fields(spec: ModelSpec, y, q, x, p, u) -> tuple[Array, Array]:
    """Both sides of the vector-field identity at every atom, each ``(N, 2d)``.

    The measure side evaluates ``J grad_nu H_c`` on ``lift(x, p)``; the
    particle side is ``(grad_{p_i} H_N, -N grad_{x_i} H_N)`` from the pmp
    module.
    """
    x = np.asarray(x, dtype=float).reshape(-1, spec.d)
    p = np.asarray(p, dtype=float).reshape(x.shape)
    nu = lift(x, p)
    return _e_uguale_pair(spec, y, q, x, p, nu.r, u)


def _e_uguale_pair(spec, y, q, x, p, r, u):
    n = x.shape[0]
    mf = flow_field(spec, _point(spec, y, q, x, r, u))
    g = grad_hamiltonian(spec, y, q, x, p, u)
    fd = np.hstack([g.p, -n * g.x])
    return mf, fd


def check_e_uguale(spec: ModelSpec, y, q, x, p, u, r=None) -> float:
    """Max-abs discrepancy between the measure and particle vector fields.

    ``r`` defaults to ``N p``; passing stored values lets a bundle whose
    ``r`` and ``p`` disagree be detected.
    """
    x = np.asarray(x, dtype=float).reshape(-1, spec.d)
    p = np.asarray(p, dtype=float).reshape(x.shape)
    r = x.shape[0] * p if r is None else np.asarray(r, dtype=float).reshape(x.shape)
    mf, fd = _e_uguale_pair(spec, y, q, x, p, r, u)
    return float(np.max(np.abs(mf - fd)))


# ----------------------------------------------------------------------------
# weak form along a bundle


@dataclass(frozen=True)
class TestFunction:
    """Smooth ``phi`` on ``R^{2d}`` with its gradient, both acting row-wise."""

    name: str
    value: Callable[[Array], Array]
    grad: Callable[[Array], Array]

    __test__ = False  # not a pytest class


def constant_test_function(c: float = 1.0) -> TestFunction:
    return TestFunction("constant", lambda z: np.full(z.shape[0], c), lambda z: np.zeros_like(z))


def linear_test_function(a) -> TestFunction:
    a = np.asarray(a, dtype=float)
    return TestFunction("linear", lambda z: z @ a, lambda z: np.broadcast_to(a, z.shape).copy())


def gaussian_test_function(center, width: float = 1.0) -> TestFunction:
    c = np.asarray(center, dtype=float)
    s2 = float(width) ** 2

    def value(z):
        return np.exp(-np.sum((z - c) ** 2, axis=1) / (2 * s2))

    def grad(z):
        return -(z - c) / s2 * value(z)[:, None]

    return TestFunction("gaussian", value, grad)


def default_test_functions(d: int) -> list[TestFunction]:
    rng = np.random.default_rng(12345)
    return [
        constant_test_function(),
        linear_test_function(rng.normal(size=2 * d)),
        gaussian_test_function(np.zeros(2 * d), 1.0),
    ]


def _node_point(spec, bundle, j, u=None):
    u = np.zeros(spec.D) if u is None else u
    return _point(spec, bundle.y[j], bundle.q[j], bundle.x[j], bundle.r[j], u)


def weak_pde_residual(spec: ModelSpec, bundle: ExtremalBundle, testfn: TestFunction) -> Array:
    """``|d/dt int phi dnu - int grad phi . J grad_nu H_c dnu|`` at every node.

    The time derivative is a centered difference at interior nodes and a
    one-sided second-order stencil at the two ends.
    """
    n_nodes = bundle.x.shape[0]
    lhs_series = np.empty(n_nodes)
    rhs = np.empty(n_nodes)
    for j in range(n_nodes):
        z = np.hstack([bundle.x[j], bundle.r[j]])
        lhs_series[j] = np.mean(testfn.value(z))
        v = flow_field(spec, _node_point(spec, bundle, j))
        rhs[j] = np.mean(np.sum(testfn.grad(z) * v, axis=1))
    lhs = np.gradient(lhs_series, bundle.grid.dt, edge_order=2)
    return np.abs(lhs - rhs)


def terminal_marginal_check(bundle) -> dict:
    """``max_i |r_i(T)|`` and ``sum_k |q_k(T)|`` as stored in ``bundle``."""
    r_T = np.asarray(bundle.r[-1])
    q_T = np.asarray(bundle.q[-1])
    return {
        "max_r_T": float(np.max(np.linalg.norm(r_T, axis=1), initial=0.0)),
        "q_T_norm": float(np.sum(np.linalg.norm(q_T, axis=1))) if q_T.size else 0.0,
    }


# ----------------------------------------------------------------------------
# full report


@dataclass(frozen=True)
class VerifyTolerances:
    e_uguale: float = 1e-10
    lift_gap: float = 1e-12
    weak_residual: float = 1e-2
    support_inflation: float = 1.1


@dataclass
class VerificationReport:
    values: dict
    gates: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.gates.values())

    def as_dict(self) -> dict:
        return {**self.values, "gates": dict(self.gates), "passed": self.passed}


def _measured_radius(bundle) -> float:
    R = getattr(getattr(bundle, "bounds", None), "R_T", math.nan)
    if R is None or not math.isfinite(R):
        R = float(np.sqrt(np.max(np.sum(bundle.x ** 2, axis=-1) + np.sum(bundle.r ** 2, axis=-1))))
    return R


def verify_bundle(
    spec: ModelSpec,
    bundle,
    testfns: Optional[list[TestFunction]] = None,
    tol: VerifyTolerances = VerifyTolerances(),
    stride: int = 1,
    R_T: Optional[float] = None,
) -> VerificationReport:
    """Run every measure-level check on the nodes of ``bundle``.

    ``R_T`` defaults to the bundle's measured phase-space radius inflated by
    ``tol.support_inflation``.  ``stride`` thins the nodes used for the
    pointwise identities; the weak residual always uses every node.
    """
    testfns = default_test_functions(spec.d) if testfns is None else testfns
    R = (_measured_radius(bundle) * tol.support_inflation) if R_T is None else R_T
    n_nodes = bundle.x.shape[0]
    eu, lift_gap, marg_gap = 0.0, 0.0, 0.0
    support_ok = True
    try:
        for j in range(0, n_nodes, stride):
            u = maximize_hamiltonian_control(spec, bundle.q[j])
            y, q, x, p, r = bundle.y[j], bundle.q[j], bundle.x[j], bundle.p[j], bundle.r[j]
            pt = _point(spec, y, q, x, r, u, R)
            pt.check_support()
            eu = max(eu, check_e_uguale(spec, y, q, x, p, u, r=r))
            h_mf = hamiltonian_mf(spec, pt)
            h_n = hamiltonian_N(spec, y, q, x, p, u)
            lift_gap = max(lift_gap, abs(h_mf - h_n) / max(1.0, abs(h_n)))
            first = EmpiricalMeasure(pt.nu.x).atoms
            marg_gap = max(marg_gap, float(np.max(np.abs(first - x))))
    except SupportError:
        support_ok = False
        eu = lift_gap = math.inf
    weak = {}
    if support_ok:
        for tf in testfns:
            res = weak_pde_residual(spec, bundle, tf)
            weak[tf.name] = float(np.max(res[1:-1])) if res.size > 2 else float(np.max(res))
    term = terminal_marginal_check(bundle)
    values = {
        "e_uguale_max": eu,
        "hamiltonian_lift_gap": lift_gap,
        "weak_residual_max_by_testfn": weak,
        "terminal_marginal": term,
        "first_marginal_gap": marg_gap,
        "R_T": R,
    }
    gates = {
        "support": support_ok,
        "e_uguale": eu <= tol.e_uguale,
        "hamiltonian_lift": lift_gap <= tol.lift_gap,
        "weak_residual": support_ok and all(v <= tol.weak_residual for v in weak.values()),
        "terminal_marginal": term["max_r_T"] == 0.0 and term["q_T_norm"] == 0.0,
        "first_marginal": marg_gap == 0.0,
    }
    return VerificationReport(values, gates)
