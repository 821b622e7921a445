"""Finite-N experiments: initial sampling, N-sweeps of the optimizer, stability probes."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, qmc

from .dynamics import ControlPath, TimeGrid, integrate_forward
from .errors import ConfigError, MfpmpError
from .measures import EmpiricalMeasure, leader_distance, wasserstein
from .model import ModelSpec
from .pmp import SweepParams, forward_backward_sweep

Array = np.ndarray

MAX_DRAWS = 1_000_000
_BLOCK = 256

KINDS = ("uniform-box", "gaussian-truncated", "atoms-from-file")
SAMPLERS = ("iid", "qmc", "sobol")


@dataclass(frozen=True)
class InitialMeasureSpec:
    """Reference initial distribution of the followers.

    Parameters
    ----------
    kind
        ``"uniform-box"`` (``low``, ``high``), ``"gaussian-truncated"``
        (``mean``, ``std``, ``radius``: normal restricted to the ball of that
        radius around ``mean``) or ``"atoms-from-file"`` (``atoms`` inline or
        ``path`` to a CSV with one atom per row).
    sampler
        ``"iid"`` pseudo-random points, ``"qmc"`` scrambled Sobol points or
        ``"sobol"`` the plain Sobol sequence (deterministic, seed ignored;
        its prefixes of length ``2^k`` are digital nets).  All three produce
        nested samples: the ``N``-atom set is a prefix of any larger one
        drawn with the same seed.
    """

    kind: str
    params: dict = field(default_factory=dict)
    sampler: str = "sobol"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown initial measure kind {self.kind!r}; expected one of {KINDS}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")

    @property
    def dim(self) -> int:
        if self.kind == "uniform-box":
            return len(np.atleast_1d(self.params["low"]))
        if self.kind == "gaussian-truncated":
            return len(np.atleast_1d(self.params["mean"]))
        return self.file_atoms().shape[1]

    def file_atoms(self) -> Array:
        if "atoms" in self.params:
            a = np.asarray(self.params["atoms"], dtype=float)
        elif "path" in self.params:
            a = np.loadtxt(self.params["path"], delimiter=",", comments="#", ndmin=2)
        else:
            raise ConfigError("atoms-from-file needs 'atoms' or 'path'")
        return a.reshape(a.shape[0], -1)

    def in_support(self, pts: Array) -> Array:
        """Mask of points inside ``supp(mu0) + B(0, 1)``."""
        pts = np.atleast_2d(pts)
        if self.kind == "uniform-box":
            lo = np.atleast_1d(self.params["low"]).astype(float)
            hi = np.atleast_1d(self.params["high"]).astype(float)
            gap = pts - np.clip(pts, lo, hi)
            return np.linalg.norm(gap, axis=1) <= 1.0
        if self.kind == "gaussian-truncated":
            c = np.atleast_1d(self.params["mean"]).astype(float)
            return np.linalg.norm(pts - c, axis=1) <= float(self.params["radius"]) + 1.0
        atoms = self.file_atoms()
        dist = np.linalg.norm(pts[:, None, :] - atoms[None, :, :], axis=-1).min(axis=1)
        return dist <= 1.0


class _Stream:
    """Uniform ``[0, 1)^d`` points in a fixed order for a given seed."""

    def __init__(self, sampler: str, d: int, seed: int):
        self.d = d
        if sampler in ("qmc", "sobol"):
            self._sobol = qmc.Sobol(d, scramble=sampler == "qmc", seed=seed if sampler == "qmc" else None)
        else:
            self._rng = np.random.default_rng(seed)
            self._sobol = None

    def take(self, n: int) -> Array:
        if self._sobol is None:
            return self._rng.random((n, self.d))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # balance warning for non powers of 2
            return self._sobol.random(n)


def sample_initial_measure(spec: InitialMeasureSpec, N: int, seed: int = 0) -> EmpiricalMeasure:
    """Draw ``N`` atoms, deterministically in ``seed``, with the prefix property.

    Raises
    ------
    ConfigError
        If rejection sampling needs more than ``1e6`` draws, or a file holds
        fewer than ``N`` atoms.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if spec.kind == "atoms-from-file":
        atoms = spec.file_atoms()
        if atoms.shape[0] < N:
            raise ConfigError(f"atom file lists {atoms.shape[0]} atoms, {N} requested")
        return EmpiricalMeasure(atoms[:N])
    d = spec.dim
    stream = _Stream(spec.sampler, d, seed)
    if spec.kind == "uniform-box":
        lo = np.atleast_1d(spec.params["low"]).astype(float)
        hi = np.atleast_1d(spec.params["high"]).astype(float)
        if np.any(hi < lo):
            raise ConfigError("uniform-box needs high >= low")
        return EmpiricalMeasure(lo + (hi - lo) * stream.take(N))
    mean = np.atleast_1d(spec.params["mean"]).astype(float)
    std = float(spec.params.get("std", 1.0))
    radius = float(spec.params["radius"])
    if std <= 0 or radius <= 0:
        raise ConfigError("gaussian-truncated needs std > 0 and radius > 0")
    # fixed-size blocks keep the accepted sequence independent of N
    out, drawn = [], 0
    have = 0
    while have < N:
        if drawn >= MAX_DRAWS:
            raise ConfigError(f"rejection sampling accepted {have} of {N} atoms in {MAX_DRAWS} draws")
        u = stream.take(_BLOCK)
        drawn += _BLOCK
        z = mean + std * norm.ppf(np.clip(u, 1e-300, 1 - 1e-16))
        z = z[np.linalg.norm(z - mean, axis=1) <= radius]
        out.append(z)
        have += z.shape[0]
    return EmpiricalMeasure(np.vstack(out)[:N])


def follower_positions(measure: EmpiricalMeasure, d: int) -> Array:
    """Atoms as a follower block ``(N, d)``, zero-padding missing coordinates."""
    a = measure.atoms
    if a.shape[1] > d:
        raise ConfigError(f"initial measure has dimension {a.shape[1]}, state has {d}")
    return np.hstack([a, np.zeros((a.shape[0], d - a.shape[1]))])


def duplicate_followers(x: Array, times: int = 2) -> Array:
    """Each follower repeated ``times`` times consecutively."""
    return np.repeat(np.asarray(x, dtype=float), times, axis=0)


def w1_between(x_a: Array, x_b: Array) -> float:
    """``W_1`` between uniform measures on ``x_a`` and ``x_b``, replicated to a common size."""
    na, nb = x_a.shape[0], x_b.shape[0]
    L = math.lcm(na, nb)
    return wasserstein(duplicate_followers(x_a, L // na), duplicate_followers(x_b, L // nb), p=1)


# ----------------------------------------------------------------------------
# convergence study


@dataclass
class ConvergenceRow:
    N: int
    cost: float = math.nan
    iterations: int = 0
    converged: bool = False
    w1_next: float = math.nan
    cost_gap_next: float = math.nan
    control_l1_gap: float = math.nan
    dup_cost_gap: float = math.nan
    dup_control_gap: float = math.nan
    dup_r_gap: float = math.nan
    error: str = ""

    COLUMNS = ("N", "cost", "iterations", "converged", "w1_next", "cost_gap_next", "control_l1_gap",
               "dup_cost_gap", "dup_control_gap", "dup_r_gap", "error")

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in self.COLUMNS}


@dataclass
class ConvergenceReport:
    """Per-N rows sorted by ``N``.

    ``control_l1_gap`` is the ``L^1``-in-time distance of each optimal
    control to the one at the largest ``N``: a proxy for weak ``L^1``
    convergence, not a test of it.
    """

    rows: list
    seed: int
    meta: dict = field(default_factory=dict)

    def costs(self) -> Array:
        return np.array([r.cost for r in self.rows])

    def cost_gaps(self) -> Array:
        """``|F_N - F_next|`` for consecutive rows."""
        return np.array([r.cost_gap_next for r in self.rows[:-1]])

    def w1_gaps(self) -> Array:
        return np.array([r.w1_next for r in self.rows[:-1]])

    def cost_gaps_nonincreasing(self) -> bool:
        g = self.cost_gaps()
        return bool(np.all(np.isfinite(g)) and np.all(np.diff(g) <= 0))

    def w1_decreasing(self) -> bool:
        g = self.w1_gaps()
        return bool(np.all(np.isfinite(g)) and np.all(np.diff(g) < 0))

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            **self.meta,
            "rows": [r.as_dict() for r in self.rows],
            "cost_gaps_nonincreasing": self.cost_gaps_nonincreasing(),
            "w1_decreasing": self.w1_decreasing(),
        }


def convergence_study(
    spec: ModelSpec,
    y0,
    mu0: InitialMeasureSpec,
    Ns: Sequence[int],
    grid: TimeGrid,
    params: SweepParams = SweepParams(),
    seed: int = 0,
    duplicate_check: str = "first",
) -> ConvergenceReport:
    """Solve the ``N``-follower problem for every ``N`` on prefix-coupled samples.

    ``duplicate_check`` (``"first"``, ``"all"`` or ``"none"``) selects the
    rows where the problem is re-solved with every follower duplicated; the
    row then records the cost gap, the control gap and the largest
    difference of the rescaled adjoints ``r``, all of which vanish up to
    rounding.  Sweep failures are recorded in the row's ``error`` field.
    """
    Ns = [int(n) for n in Ns]
    if len(Ns) < 2 or any(b <= a for a, b in zip(Ns, Ns[1:])) or Ns[0] < 1:
        raise ConfigError(f"Ns must be strictly increasing positive integers, at least two: {Ns}")
    if duplicate_check not in ("first", "all", "none"):
        raise ConfigError(f"duplicate_check must be first|all|none, got {duplicate_check!r}")
    full = follower_positions(sample_initial_measure(mu0, Ns[-1], seed), spec.d)
    rows, bundles = [], []
    for idx, n in enumerate(Ns):
        row = ConvergenceRow(n)
        x0 = full[:n]
        bundle = None
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                bundle = forward_backward_sweep(spec, y0, x0, grid, params)
            row.cost, row.iterations, row.converged = bundle.cost, bundle.iterations, bundle.converged
            if duplicate_check == "all" or (duplicate_check == "first" and idx == 0):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    dup = forward_backward_sweep(spec, y0, duplicate_followers(x0), grid, params)
                row.dup_cost_gap = abs(dup.cost - bundle.cost)
                row.dup_control_gap = float(np.max(np.abs(dup.control.values - bundle.control.values)))
                row.dup_r_gap = float(np.max(np.abs(dup.r[:, ::2] - bundle.r)))
        except MfpmpError as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            bundle = None
        rows.append(row)
        bundles.append(bundle)
    ref = bundles[-1]
    for row, b, b_next in zip(rows, bundles, bundles[1:] + [None]):
        if b is None:
            continue
        if ref is not None:
            row.control_l1_gap = b.control.l1_distance(ref.control)
        if b_next is not None:
            row.w1_next = w1_between(b.x[-1], b_next.x[-1])
            row.cost_gap_next = abs(b.cost - b_next.cost)
    meta = {"Ns": Ns, "T": grid.T, "n_steps": grid.n_steps, "sampler": mu0.sampler, "kind": mu0.kind}
    return ConvergenceReport(rows, seed, meta)


# ----------------------------------------------------------------------------
# stability


@dataclass
class StabilityRow:
    epsilon: float
    initial_gap: float
    final_gap: float

    @property
    def ratio(self) -> float:
        return self.final_gap / self.epsilon if self.epsilon > 0 else math.nan


def probe_direction(spec: ModelSpec, N: int, seed: int = 0) -> tuple[Array, Array]:
    """Random ``(dy, dx)`` with ``sum_k |dy_k| + (1/N) sum_i |dx_i| = 1``."""
    rng = np.random.default_rng(seed)
    dy = rng.normal(size=(spec.m, spec.d))
    dx = rng.normal(size=(N, spec.d))
    size = leader_distance(dy, np.zeros_like(dy)) + float(np.mean(np.linalg.norm(dx, axis=1)))
    return dy / size, dx / size


def stability_probe(
    spec: ModelSpec,
    y0,
    x0,
    grid: TimeGrid,
    control: ControlPath,
    epsilons: Sequence[float],
    seed: int = 0,
    direction: Optional[tuple[Array, Array]] = None,
) -> list[StabilityRow]:
    """Perturb the initial data by ``epsilon`` along a fixed direction and compare at ``T``.

    Distances use ``sum_k |y_k - y'_k| + W_1(mu, mu')``.  The direction is
    normalized so that, while the identity matching is optimal, the initial
    distance equals ``epsilon``; ``final_gap / epsilon`` then estimates the
    Lipschitz constant of the flow.
    """
    y0 = np.asarray(y0, dtype=float).reshape(spec.m, spec.d)
    x0 = np.asarray(x0, dtype=float).reshape(-1, spec.d)
    eps = [float(e) for e in epsilons]
    if any(e < 0 for e in eps):
        raise ValueError("epsilons must be nonnegative")
    dy, dx = probe_direction(spec, x0.shape[0], seed) if direction is None else direction
    base = integrate_forward(spec, y0, x0, control, grid)
    yT, xT = base.y[-1], base.x[-1]
    rows = []
    for e in eps:
        y1, x1 = y0 + e * dy, x0 + e * dx
        pert = integrate_forward(spec, y1, x1, control, grid)
        gap0 = leader_distance(y1, y0) + wasserstein(x1, x0, p=1)
        gapT = leader_distance(pert.y[-1], yT) + wasserstein(pert.x[-1], xT, p=1)
        rows.append(StabilityRow(e, gap0, gapT))
    return rows


def ratio_spread(rows: Sequence[StabilityRow]) -> float:
    """``(max - min) / min`` of the positive-epsilon ratios."""
    r = np.array([row.ratio for row in rows if row.epsilon > 0])
    return float((r.max() - r.min()) / r.min())
