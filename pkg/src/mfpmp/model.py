"""
Problem instances for leader-follower mean-field control.

A :class:`ModelSpec` bundles every ingredient of the controlled system

    y_k' = (K * mu)(y_k) + f_k(y) + B_k u,
    x_i' = (K * mu)(x_i) + g(y)(x_i),

together with the running cost ``L(y, mu) = int l(y, x, int omega dmu) dmu(x)``
and the control cost ``gamma`` over a box of admissible controls.

All callables are vectorized.  Shapes, with ``N`` followers:

==================  ==========================  =====================
callable            arguments                   result
==================  ==========================  =====================
``kernel``          z ``(..., d)``              ``(..., d)``
``kernel_jac``      z ``(..., d)``              ``(..., d, d)``
``drift``           y ``(m, d)``                ``(m, d)``
``drift_jac``       y                           ``(m, d, m, d)``
``field``           y, x ``(N, d)``             ``(N, d)``
``field_jac_x``     y, x                        ``(N, d, d)``
``field_jac_y``     y, x                        ``(N, d, m, d)``
``ell``             y, x, s ``(d,)``            ``(N,)``
``ell_grad_y``      y, x, s                     ``(N, m, d)``
``ell_grad_x``      y, x, s                     ``(N, d)``
``ell_grad_s``      y, x, s                     ``(N, d)``
``omega``           x ``(N, d)``                ``(N, d)``
``omega_jac``       x                           ``(N, d, d)``
``gamma``           u ``(D,)``                  float
``gamma_grad``      u                           ``(D,)``
``gamma_hess``      u                           ``(D, D)``
==================  ==========================  =====================

Jacobians follow the convention ``J[..., a, b] = d out_a / d in_b``.
Derivatives left as ``None`` are replaced by central finite differences and
listed in :attr:`ModelSpec.fd_fallback`.
"""

from __future__ import annotations

import warnings
import weakref
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import ModelError

Array = np.ndarray

_FD_STEP = 6e-6  # ~ eps**(1/3) for central differences


# ----------------------------------------------------------------------------
# finite-difference helpers


def _pointwise_jac(fn: Callable[[Array], Array], z: Array) -> Array:
    """Jacobian of a map acting independently on the last axis of ``z``."""
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    cols = []
    for b in range(d):
        h = _FD_STEP * (1.0 + np.abs(z[..., b]))
        zp = z.copy()
        zm = z.copy()
        zp[..., b] += h
        zm[..., b] -= h
        cols.append((fn(zp) - fn(zm)) / (2.0 * h[..., None]))
    return np.stack(cols, axis=-1)


def _full_jac(fn: Callable[[Array], Array], a: Array) -> Array:
    """Jacobian of ``fn`` with respect to every entry of ``a``."""
    a = np.asarray(a, dtype=float)
    base = np.asarray(fn(a))
    out = np.empty(base.shape + a.shape)
    for idx in np.ndindex(*a.shape):
        h = _FD_STEP * (1.0 + abs(a[idx]))
        ap = a.copy()
        am = a.copy()
        ap[idx] += h
        am[idx] -= h
        out[(Ellipsis,) + idx] = (np.asarray(fn(ap)) - np.asarray(fn(am))) / (2.0 * h)
    return out


def _fd_pointwise_batch(fn: Callable[[Array], Array], x: Array) -> Array:
    """Gradient of a scalar-per-row map ``(N, d) -> (N,)``."""
    return _pointwise_jac(lambda z: fn(z)[..., None], x)[..., 0, :]


# ----------------------------------------------------------------------------
# model container


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Immutable problem instance; see the module docstring for shapes."""

    d: int
    D: int
    m: int
    kernel: Callable
    drift: Callable
    field: Callable
    B: Array
    ell: Callable
    omega: Callable
    gamma: Callable
    lower: Array
    upper: Array
    kernel_jac: Optional[Callable] = None
    drift_jac: Optional[Callable] = None
    field_jac_x: Optional[Callable] = None
    field_jac_y: Optional[Callable] = None
    ell_grad_y: Optional[Callable] = None
    ell_grad_x: Optional[Callable] = None
    ell_grad_s: Optional[Callable] = None
    omega_jac: Optional[Callable] = None
    gamma_grad: Optional[Callable] = None
    gamma_hess: Optional[Callable] = None
    quadratic_weight: Optional[float] = None
    kernel_growth: float = 1.0
    name: str = "custom"
    params: dict = dc_field(default_factory=dict)
    fd_fallback: tuple = ()

    def __post_init__(self):
        if self.d < 1 or self.m < 0 or self.D < 0:
            raise ModelError(f"bad dimensions d={self.d}, D={self.D}, m={self.m}")
        B = np.asarray(self.B, dtype=float).reshape(self.m, self.d, self.D)
        lo = np.asarray(self.lower, dtype=float).reshape(self.D)
        hi = np.asarray(self.upper, dtype=float).reshape(self.D)
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ModelError("control box must be finite with lower <= upper")
        B.setflags(write=False)
        lo.setflags(write=False)
        hi.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "B", B)
        set_(self, "lower", lo)
        set_(self, "upper", hi)

        fallback = []

        def fill(name, builder):
            if getattr(self, name) is None:
                set_(self, name, builder())
                fallback.append(name)

        fill("kernel_jac", lambda: lambda z: _pointwise_jac(self.kernel, z))
        fill("drift_jac", lambda: lambda y: _full_jac(self.drift, y))
        fill("field_jac_x", lambda: lambda y, x: _pointwise_jac(lambda z: self.field(y, z), x))
        fill("field_jac_y", lambda: lambda y, x: _full_jac(lambda a: self.field(a, x), y))
        fill("ell_grad_y",
             lambda: lambda y, x, s: _full_jac(lambda a: self.ell(a, x, s), y))
        fill("ell_grad_x",
             lambda: lambda y, x, s: _fd_pointwise_batch(lambda z: self.ell(y, z, s), x))
        fill("ell_grad_s",
             lambda: lambda y, x, s: _full_jac(lambda a: self.ell(y, x, a), s))
        fill("omega_jac", lambda: lambda x: _pointwise_jac(self.omega, x))
        fill("gamma_grad", lambda: lambda u: _full_jac(lambda a: np.array(self.gamma(a)), u))
        fill("gamma_hess", lambda: lambda u: _full_jac(self.gamma_grad, u))
        set_(self, "fd_fallback", tuple(fallback))

    @property
    def box(self) -> tuple[Array, Array]:
        return self.lower, self.upper

    def control_lift(self, u: Array) -> Array:
        """Return ``B_k u`` for every leader, shape ``(m, d)``."""
        return np.einsum("kaj,j->ka", self.B, np.asarray(u, dtype=float))

    def control_pullback(self, q: Array) -> Array:
        """Return ``sum_k B_k^T q_k``, shape ``(D,)``."""
        return np.einsum("kaj,ka->j", self.B, np.asarray(q, dtype=float))


# ----------------------------------------------------------------------------
# running cost


def _atoms(mu) -> Array:
    return np.asarray(getattr(mu, "atoms", mu), dtype=float)


def omega_mean(spec: ModelSpec, x: Array) -> Array:
    """Moment ``(1/N) sum_j omega(x_j)``; zero when there are no followers."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        return np.zeros(spec.d)
    return spec.omega(x).mean(axis=0)


def running_cost(spec: ModelSpec, y: Array, mu) -> float:
    """Evaluate ``L(y, mu) = (1/N) sum_i l(y, x_i, (1/N) sum_j omega(x_j))``.

    ``mu`` is either an ``(N, d)`` atom array or an empirical measure with an
    ``atoms`` attribute.  The empty measure integrates to zero.
    """
    x = _atoms(mu).reshape(-1, spec.d)
    if x.shape[0] == 0:
        return 0.0
    bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
    if bad.size:
        raise ModelError(f"running cost is non-finite at follower atom {int(bad[0])}")
    vals = spec.ell(np.asarray(y, dtype=float), x, omega_mean(spec, x))
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise ModelError(f"running cost is non-finite at follower atom {int(bad[0])}")
    return float(np.mean(vals))


# ----------------------------------------------------------------------------
# validation


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_model`, one :class:`Check` per invariant."""

    checks: list
    fd_fallback: tuple = ()

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def raise_if_failed(self):
        if not self.passed:
            msg = "; ".join(f"{c.name}: {c.detail}" for c in self.failures())
            raise ModelError(f"model failed validation: {msg}")


def _probe_points(n: int, dim: int, radius: float, seed: int) -> Array:
    if dim == 0:
        return np.zeros((n, 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # Sobol balance warning for n != 2**k
        pts = qmc.Sobol(dim, scramble=True, seed=seed).random(n)
    return radius * (2.0 * pts - 1.0)


def _finite(value, where: str):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"model evaluates to non-finite value at {where}")
    return arr


def _rel_err(a: Array, b: Array) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def validate_model(
    spec: ModelSpec,
    probe_radius: float = 10.0,
    samples: int = 16,
    seed: int = 0,
    jac_tol: float = 1e-5,
    convexity_margin: float = 1e-6,
) -> ValidationReport:
    """Probe the structural hypotheses of ``spec`` on a fixed quasi-random set.

    Checks kernel oddness, sublinearity with constant ``spec.kernel_growth``,
    evenness of the kernel Jacobian, strict convexity of the control cost and
    agreement of every supplied derivative with central differences.

    Raises
    ------
    ModelError
        If any model function returns a non-finite value at a probe point.
    """
    if probe_radius <= 0 or samples < 1:
        raise ValueError("probe_radius must be positive and samples >= 1")
    d, m, D = spec.d, spec.m, spec.D
    checks = []

    z = np.vstack([np.zeros((1, d)), _probe_points(samples, d, probe_radius, seed)])
    for zi in z:
        _finite(spec.kernel(zi), f"kernel(z={zi.tolist()})")
    Kz = spec.kernel(z)
    Kmz = spec.kernel(-z)
    odd_gap = np.linalg.norm(Kz + Kmz, axis=-1) / (1.0 + np.linalg.norm(Kz, axis=-1))
    worst = int(np.argmax(odd_gap))
    checks.append(Check("kernel_odd", bool(odd_gap.max() <= 1e-12),
                        f"max relative |K(z)+K(-z)| = {odd_gap.max():.3e} at z={z[worst].tolist()}"))

    growth = np.linalg.norm(Kz, axis=-1) - spec.kernel_growth * (1.0 + np.linalg.norm(z, axis=-1))
    checks.append(Check("kernel_sublinear", bool(growth.max() <= 1e-12),
                        f"max |K(z)| - C_K(1+|z|) = {growth.max():.3e}"))

    DKz = _finite(spec.kernel_jac(z), "kernel_jac")
    DKmz = spec.kernel_jac(-z)
    even_gap = _rel_err(DKz, DKmz)
    checks.append(Check("kernel_jac_even", even_gap <= 1e-10, f"max |DK(z)-DK(-z)| = {even_gap:.3e}"))
    checks.append(Check("kernel_jac_fd", _rel_err(DKz, _pointwise_jac(spec.kernel, z)) <= jac_tol))

    rng = np.random.default_rng(seed)
    n_fd = min(samples, 4)
    y_pts = [probe_radius * rng.uniform(-1, 1, size=(m, d)) for _ in range(n_fd)]
    x_pts = [probe_radius * rng.uniform(-1, 1, size=(3, d)) for _ in range(n_fd)]
    errs = {k: 0.0 for k in ("drift_jac", "field_jac_x", "field_jac_y", "ell_grad_y",
                              "ell_grad_x", "ell_grad_s", "omega_jac")}
    for y, x in zip(y_pts, x_pts):
        _finite(spec.drift(y), f"drift(y={y.tolist()})")
        _finite(spec.field(y, x), f"field(y={y.tolist()}, x={x.tolist()})")
        s = _finite(omega_mean(spec, x), f"omega(x={x.tolist()})")
        _finite(spec.ell(y, x, s), f"ell(y={y.tolist()}, x={x.tolist()})")
        if m:
            errs["drift_jac"] = max(errs["drift_jac"],
                                    _rel_err(spec.drift_jac(y), _full_jac(spec.drift, y)))
            errs["field_jac_y"] = max(errs["field_jac_y"], _rel_err(
                spec.field_jac_y(y, x), _full_jac(lambda a: spec.field(a, x), y)))
            errs["ell_grad_y"] = max(errs["ell_grad_y"], _rel_err(
                spec.ell_grad_y(y, x, s), _full_jac(lambda a: spec.ell(a, x, s), y)))
        errs["field_jac_x"] = max(errs["field_jac_x"], _rel_err(
            spec.field_jac_x(y, x), _pointwise_jac(lambda a: spec.field(y, a), x)))
        errs["ell_grad_x"] = max(errs["ell_grad_x"], _rel_err(
            spec.ell_grad_x(y, x, s), _fd_pointwise_batch(lambda a: spec.ell(y, a, s), x)))
        errs["ell_grad_s"] = max(errs["ell_grad_s"], _rel_err(
            spec.ell_grad_s(y, x, s), _full_jac(lambda a: spec.ell(y, x, a), s)))
        errs["omega_jac"] = max(errs["omega_jac"], _rel_err(
            spec.omega_jac(x), _pointwise_jac(spec.omega, x)))
    for name, err in errs.items():
        checks.append(Check(f"{name}_fd", err <= jac_tol, f"relative error {err:.3e}"))

    if D:
        lo, hi = spec.lower, spec.upper
        u0 = lo + (hi - lo) * rng.uniform(size=(samples, D))
        u1 = lo + (hi - lo) * rng.uniform(size=(samples, D))
        svals = rng.uniform(0.05, 0.95, size=samples)
        worst_gap = np.inf
        g_err = 0.0
        for a, b, t in zip(u0, u1, svals):
            ga = float(_finite(spec.gamma(a), f"gamma(u={a.tolist()})"))
            gb = float(spec.gamma(b))
            mid = float(spec.gamma(t * a + (1 - t) * b))
            rhs = t * ga + (1 - t) * gb - convexity_margin * t * (1 - t) * float(np.sum((a - b) ** 2))
            worst_gap = min(worst_gap, rhs - mid)
            g_err = max(g_err, _rel_err(spec.gamma_grad(a),
                                        _full_jac(lambda v: np.array(spec.gamma(v)), a)))
        checks.append(Check("gamma_strictly_convex", worst_gap > 0,
                            f"smallest convexity gap {worst_gap:.3e}"))
        checks.append(Check("gamma_grad_fd", g_err <= jac_tol, f"relative error {g_err:.3e}"))
    return ValidationReport(checks, spec.fd_fallback)


_VALIDATED: "weakref.WeakKeyDictionary[ModelSpec, ValidationReport]" = weakref.WeakKeyDictionary()


def require_valid(spec: ModelSpec) -> ValidationReport:
    """Validate ``spec`` once (cached) and raise if any check fails."""
    report = _VALIDATED.get(spec)
    if report is None:
        radius = float(spec.params.get("probe_radius", 10.0))
        report = validate_model(spec, probe_radius=radius)
        _VALIDATED[spec] = report
    report.raise_if_failed()
    return report


# ----------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class CuckerSmaleParams:
    """Communication weight ``phi(r) = amp / (sigma**2 + r**2) ** beta``."""

    sigma: float = 1.0
    beta: float = 0.5
    amp: float = 1.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.beta >= 0 and self.amp > 0):
            raise ModelError("need sigma > 0, beta >= 0, amp > 0")

    def phi(self, pos: Array) -> Array:
        r2 = np.sum(pos * pos, axis=-1)
        return self.amp * (self.sigma ** 2 + r2) ** (-self.beta)

    def phi_grad(self, pos: Array) -> Array:
        r2 = np.sum(pos * pos, axis=-1)
        c = -2.0 * self.beta * self.amp * (self.sigma ** 2 + r2) ** (-self.beta - 1.0)
        return c[..., None] * pos

    @property
    def phi_max(self) -> float:
        return self.amp * self.sigma ** (-2.0 * self.beta)


def cucker_smale_model(
    params: CuckerSmaleParams,
    m: int,
    d_space: int = 1,
    cost: str = "variance",
    target_velocity=None,
    bound: float = 1.0,
) -> ModelSpec:
    """Leader-follower Cucker-Smale flocking with velocity forcing on leaders.

    Each agent state is ``(position, velocity)`` so the agent dimension is
    ``2 * d_space``.  ``cost="variance"`` penalizes four times the variance of
    the pooled velocity distribution (leaders and followers weighted one half
    each); ``cost="target"`` penalizes the squared distance of every velocity
    to ``target_velocity``.  Controls live in ``[-bound, bound]^(d_space*m)``
    with ``gamma(u) = |u|^2``.

    ``m = 0`` is accepted and yields follower-only dynamics.
    """
    if m < 0 or d_space < 1:
        raise ModelError("need m >= 0 and d_space >= 1")
    if cost not in ("variance", "target"):
        raise ModelError(f"unknown Cucker-Smale cost {cost!r}")
    s = d_space
    d = 2 * s
    D = s * m
    P = params
    vbar = np.zeros(s) if target_velocity is None else np.asarray(target_velocity, float).reshape(s)
    eye = np.eye(s)

    def split(z):
        return z[..., :s], z[..., s:]

    def kernel(z):
        pos, vel = split(np.asarray(z, dtype=float))
        return np.concatenate([np.zeros_like(vel), -P.phi(pos)[..., None] * vel], axis=-1)

    def kernel_jac(z):
        pos, vel = split(np.asarray(z, dtype=float))
        J = np.zeros(z.shape[:-1] + (d, d))
        J[..., s:, :s] = -vel[..., :, None] * P.phi_grad(pos)[..., None, :]
        J[..., s:, s:] = -P.phi(pos)[..., None, None] * eye
        return J

    def drift(y):
        pos, w = split(np.asarray(y, dtype=float))
        out = np.zeros((m, d))
        if m == 0:
            return out
        diff = pos[:, None, :] - pos[None, :, :]
        phi = P.phi(diff)
        out[:, :s] = w
        out[:, s:] = (phi[:, :, None] * (w[None, :, :] - w[:, None, :])).sum(axis=1) / m
        return out

    def drift_jac(y):
        pos, w = split(np.asarray(y, dtype=float))
        J = np.zeros((m, d, m, d))
        if m == 0:
            return J
        idx = np.arange(m)
        J[idx, :s, idx, s:] = eye
        diff = pos[:, None, :] - pos[None, :, :]
        phi = P.phi(diff)
        dphi = P.phi_grad(diff)
        dw = w[None, :, :] - w[:, None, :]
        # outer[k, j] = (w_j - w_k) (x) grad phi(pos_k - pos_j)
        outer = dw[:, :, :, None] * dphi[:, :, None, :] / m
        J[idx, s:, idx, :s] += outer.sum(axis=1)
        J[:, s:, :, :s] -= outer.transpose(0, 2, 1, 3)
        J[:, s:, :, s:] += (phi / m)[:, None, :, None] * eye[None, :, None, :]
        J[idx, s:, idx, s:] -= (phi.sum(axis=1) / m)[:, None, None] * eye
        return J

    def field(y, x):
        x = np.asarray(x, dtype=float)
        pos, vel = split(x)
        out = np.zeros_like(x)
        out[:, :s] = vel
        if m:
            ypos, w = split(np.asarray(y, dtype=float))
            phi = P.phi(pos[:, None, :] - ypos[None, :, :])
            out[:, s:] = (phi[:, :, None] * (w[None, :, :] - vel[:, None, :])).sum(axis=1) / m
        return out

    def field_jac_x(y, x):
        x = np.asarray(x, dtype=float)
        pos, vel = split(x)
        J = np.zeros((x.shape[0], d, d))
        J[:, :s, s:] = eye
        if m:
            ypos, w = split(np.asarray(y, dtype=float))
            diff = pos[:, None, :] - ypos[None, :, :]
            phi = P.phi(diff)
            dphi = P.phi_grad(diff)
            dw = w[None, :, :] - vel[:, None, :]
            J[:, s:, :s] = np.einsum("nja,njb->nab", dw, dphi) / m
            J[:, s:, s:] = -(phi.sum(axis=1) / m)[:, None, None] * eye
        return J

    def field_jac_y(y, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        J = np.zeros((n, d, m, d))
        if m == 0:
            return J
        pos, vel = split(x)
        ypos, w = split(np.asarray(y, dtype=float))
        diff = pos[:, None, :] - ypos[None, :, :]
        phi = P.phi(diff)
        dphi = P.phi_grad(diff)
        dw = w[None, :, :] - vel[:, None, :]
        J[:, s:, :, :s] = -np.einsum("nja,njb->najb", dw, dphi) / m
        J[:, s:, :, s:] = (phi / m)[:, None, :, None] * eye[None, :, None, :]
        return J

    B = np.zeros((m, d, D))
    for k in range(m):
        B[k, s:, k * s:(k + 1) * s] = eye

    def omega(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., s:] = x[..., s:]
        return out

    def omega_jac(x):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape + (d,))
        J[..., s:, s:] = eye
        return J

    def leader_mean(y):
        w = np.asarray(y, dtype=float)[:, s:]
        return w.mean(axis=0) if m else np.zeros(s)

    if cost == "variance":

        def ell(y, x, sig):
            w = np.asarray(y, dtype=float)[:, s:]
            vel = np.asarray(x, dtype=float)[:, s:]
            wb = leader_mean(y)
            lead = 2.0 / m * np.sum(w * w) if m else 0.0
            return lead + 2.0 * np.sum(vel * vel, axis=-1) - (vel + wb) @ (wb + np.asarray(sig)[s:])

        def ell_grad_y(y, x, sig):
            w = np.asarray(y, dtype=float)[:, s:]
            vel = np.asarray(x, dtype=float)[:, s:]
            out = np.zeros((vel.shape[0], m, d))
            if m:
                wb = leader_mean(y)
                cross = (vel + wb) + (wb + np.asarray(sig)[s:])
                out[:, :, s:] = 4.0 / m * w[None] - cross[:, None, :] / m
            return out

        def ell_grad_x(y, x, sig):
            vel = np.asarray(x, dtype=float)[:, s:]
            out = np.zeros((vel.shape[0], d))
            out[:, s:] = 4.0 * vel - (leader_mean(y) + np.asarray(sig)[s:])
            return out

        def ell_grad_s(y, x, sig):
            vel = np.asarray(x, dtype=float)[:, s:]
            out = np.zeros((vel.shape[0], d))
            out[:, s:] = -(vel + leader_mean(y))
            return out

    else:

        def ell(y, x, sig):
            w = np.asarray(y, dtype=float)[:, s:]
            vel = np.asarray(x, dtype=float)[:, s:]
            lead = 0.5 / m * np.sum((w - vbar) ** 2) if m else 0.0
            return lead + 0.5 * np.sum((vel - vbar) ** 2, axis=-1)

        def ell_grad_y(y, x, sig):
            w = np.asarray(y, dtype=float)[:, s:]
            out = np.zeros((np.asarray(x).shape[0], m, d))
            if m:
                out[:, :, s:] = (w - vbar)[None] / m
            return out

        def ell_grad_x(y, x, sig):
            vel = np.asarray(x, dtype=float)[:, s:]
            out = np.zeros((vel.shape[0], d))
            out[:, s:] = vel - vbar
            return out

        def ell_grad_s(y, x, sig):
            return np.zeros((np.asarray(x).shape[0], d))

    return ModelSpec(
        d=d, D=D, m=m,
        kernel=kernel, kernel_jac=kernel_jac,
        drift=drift, drift_jac=drift_jac,
        field=field, field_jac_x=field_jac_x, field_jac_y=field_jac_y,
        B=B,
        ell=ell, ell_grad_y=ell_grad_y, ell_grad_x=ell_grad_x, ell_grad_s=ell_grad_s,
        omega=omega, omega_jac=omega_jac,
        gamma=lambda u: float(np.sum(np.asarray(u) ** 2)),
        gamma_grad=lambda u: 2.0 * np.asarray(u, dtype=float),
        gamma_hess=lambda u: 2.0 * np.eye(D),
        quadratic_weight=1.0,
        lower=-bound * np.ones(D), upper=bound * np.ones(D),
        kernel_growth=P.phi_max * (1.0 + 1e-12),
        name="cucker_smale",
        params={"sigma": P.sigma, "beta": P.beta, "amp": P.amp, "m": m,
                "d_space": s, "cost": cost, "bound": bound},
    )


def cucker_smale_momentum(y, x, d_space: int) -> Array:
    """Pooled velocity ``(1/m) sum_k w_k + (1/N) sum_i v_i``, conserved when ``u = 0``.

    Leader-leader and follower-follower exchanges cancel in each sum and the
    leader-follower exchange cancels between the two with these weights.
    """
    s = d_space
    y = np.asarray(y, dtype=float).reshape(-1, 2 * s)
    x = np.asarray(x, dtype=float).reshape(-1, 2 * s)
    out = np.zeros(s)
    if y.shape[0]:
        out += y[:, s:].mean(axis=0)
    if x.shape[0]:
        out += x[:, s:].mean(axis=0)
    return out


def identity_debug_model(
    d: int = 1,
    m: int = 1,
    kernel_gain: float = 0.0,
    leader_weight: float = 0.0,
    follower_weight: float = 0.0,
    control_weight: float = 1.0,
    bound: float = 5.0,
) -> ModelSpec:
    """Linear debugging instance.

    ``K(z) = kernel_gain * z``, no drift, no leader-to-follower field, each
    leader driven by its own block of ``u`` through the identity, running cost
    ``leader_weight * |y|^2 + follower_weight * |x|^2`` and control cost
    ``control_weight * |u|^2`` on ``[-bound, bound]^(d*m)``.

    With the defaults the dynamics reduce to ``y' = u``, ``x' = 0``.  With
    ``d=1, m=1, leader_weight=1`` and one inert follower it is the scalar
    linear-quadratic regulator ``min int y^2 + u^2, y' = u``.
    """
    if control_weight <= 0:
        raise ModelError("control_weight must be positive")
    D = d * m
    a = float(kernel_gain)
    B = np.zeros((m, d, D))
    for k in range(m):
        B[k, :, k * d:(k + 1) * d] = np.eye(d)

    def ell(y, x, s):
        x = np.asarray(x, dtype=float)
        return leader_weight * np.sum(np.asarray(y) ** 2) + follower_weight * np.sum(x * x, axis=-1)

    return ModelSpec(
        d=d, D=D, m=m,
        kernel=lambda z: a * np.asarray(z, dtype=float),
        kernel_jac=lambda z: a * np.broadcast_to(np.eye(d), np.shape(z) + (d,)).copy(),
        drift=lambda y: np.zeros((m, d)),
        drift_jac=lambda y: np.zeros((m, d, m, d)),
        field=lambda y, x: np.zeros_like(np.asarray(x, dtype=float)),
        field_jac_x=lambda y, x: np.zeros((np.shape(x)[0], d, d)),
        field_jac_y=lambda y, x: np.zeros((np.shape(x)[0], d, m, d)),
        B=B,
        ell=ell,
        ell_grad_y=lambda y, x, s: np.broadcast_to(
            2.0 * leader_weight * np.asarray(y, dtype=float), (np.shape(x)[0], m, d)).copy(),
        ell_grad_x=lambda y, x, s: 2.0 * follower_weight * np.asarray(x, dtype=float),
        ell_grad_s=lambda y, x, s: np.zeros((np.shape(x)[0], d)),
        omega=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        omega_jac=lambda x: np.zeros(np.shape(x) + (d,)),
        gamma=lambda u: control_weight * float(np.sum(np.asarray(u) ** 2)),
        gamma_grad=lambda u: 2.0 * control_weight * np.asarray(u, dtype=float),
        gamma_hess=lambda u: 2.0 * control_weight * np.eye(D),
        quadratic_weight=float(control_weight),
        lower=-bound * np.ones(D), upper=bound * np.ones(D),
        kernel_growth=max(abs(a), 1e-300),
        name="identity_debug",
        params={"d": d, "m": m, "kernel_gain": a, "leader_weight": leader_weight,
                "follower_weight": follower_weight, "control_weight": control_weight,
                "bound": bound},
    )


PRESETS = {
    "cucker_smale": "cucker_smale",
    "identity_debug": "identity_debug",
}


def build_preset(name: str, params: Optional[dict] = None) -> ModelSpec:
    """Instantiate a named preset from a flat parameter dictionary."""
    params = dict(params or {})
    if name == "cucker_smale":
        cs = CuckerSmaleParams(
            sigma=params.pop("sigma", 1.0),
            beta=params.pop("beta", 0.5),
            amp=params.pop("amp", 1.0),
        )
        m = params.pop("m", 1)
        d_space = params.pop("d_space", 1)
        spec = cucker_smale_model(cs, m, d_space, **params)
    elif name == "identity_debug":
        spec = identity_debug_model(**params)
    else:
        raise ModelError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return spec
