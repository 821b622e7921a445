"""Acceptance criteria 1-14, one PASS/FAIL line each.

Run under pytest (lines are printed even with output capture on) or directly
with ``python tests/test_acceptance.py``.
"""

import itertools
import json
import math
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import solve_ivp

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import demo_bundle, demo_initial, demo_mu0, demo_spec, load_config, lq_spec, random_cs_instance  # noqa: E402
from mfpmp.cli import cmd_optimize  # noqa: E402
from mfpmp.dynamics import ControlPath, TimeGrid, integrate_forward  # noqa: E402
from mfpmp.limits import convergence_study, duplicate_followers, ratio_spread, stability_probe  # noqa: E402
from mfpmp.measures import PhaseMeasure, cost_matrix, lift, marginal, wasserstein  # noqa: E402
from mfpmp.meanfield import (  # noqa: E402
    MeanFieldPoint,
    check_e_uguale,
    gaussian_test_function,
    hamiltonian_mf,
    weak_pde_residual,
)
from mfpmp.model import CuckerSmaleParams, cucker_smale_model, cucker_smale_momentum  # noqa: E402
from mfpmp.pmp import (  # noqa: E402
    SweepParams,
    cost_from_trajectory,
    forward_backward_sweep,
    grad_hamiltonian,
    hamiltonian_N,
    projected_gradient,
    reduced_cost_and_gradient,
)


def _quiet_sweep(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return forward_backward_sweep(*args, **kwargs)


def _fd(f, a, rel=1e-6):
    out = np.zeros_like(a)
    h = rel * (1.0 + np.linalg.norm(a))
    for idx in np.ndindex(a.shape):
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        out[idx] = (f(ap) - f(am)) / (2 * h)
    return out


def _instances(n, seed):
    rng = np.random.default_rng(seed)
    return [random_cs_instance(rng) for _ in range(n)]


def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    for spec, y, q, x, p, u in _instances(20, 1):
        g = grad_hamiltonian(spec, y, q, x, p, u)
        args = {"y": y, "q": q, "x": x, "p": p}
        for name in args:
            fd = _fd(lambda a, name=name: hamiltonian_N(spec, **{**args, name: a}, u=u), args[name])
            worst = max(worst, np.max(np.abs(getattr(g, name) - fd)) / max(1.0, np.max(np.abs(fd))))
    dt = time.perf_counter() - t0
    return worst <= 1e-6 and dt < 10, f"max rel err {worst:.2e}, {dt:.1f}s"


def criterion_2():
    t0 = time.perf_counter()
    worst = 0.0
    for spec, y, q, x, p, u in _instances(50, 2):
        R = 1.1 * float(np.max(np.linalg.norm(np.hstack([x, x.shape[0] * p]), axis=1)))
        MeanFieldPoint(y, q, PhaseMeasure(x, x.shape[0] * p), u, R).check_support()
        worst = max(worst, check_e_uguale(spec, y, q, x, p, u))
    dt = time.perf_counter() - t0
    return worst <= 1e-10 and dt < 10, f"max discrepancy {worst:.2e}, {dt:.1f}s"


def criterion_3():
    worst = 0.0
    for spec, y, q, x, p, u in _instances(50, 2):
        hn = hamiltonian_N(spec, y, q, x, p, u)
        nu = lift(x, p)
        hm = hamiltonian_mf(spec, MeanFieldPoint(y, q, nu, u))
        worst = max(worst, abs(hm - hn) / max(1.0, abs(hn)))
    return worst <= 1e-12, f"max gap {worst:.2e}"


def criterion_4():
    sol = solve_ivp(lambda t, P: P ** 2 - 1.0, (1.0, 0.0), [0.0], rtol=1e-12, atol=1e-14)
    oracle = float(sol.y[0, -1])
    b = forward_backward_sweep(lq_spec(), [[1.0]], [[0.0]], TimeGrid(1.0, 1000), SweepParams(damping=0.5, tol=1e-8))
    err = abs(b.cost - oracle)
    return err <= 1e-6 and b.converged and b.iterations < 50, f"|F - riccati| {err:.2e}, {b.iterations} iters"


def _fd_control_check(spec, y0, x0, u, nodes, h=1e-6):
    _, G = reduced_cost_and_gradient(spec, y0, x0, u)
    worst = 0.0
    for j in nodes:
        vp, vm = u.values.copy(), u.values.copy()
        vp[j, 0] += h
        vm[j, 0] -= h
        Fp = cost_from_trajectory(spec, integrate_forward(spec, y0, x0, ControlPath(u.grid, vp)))
        Fm = cost_from_trajectory(spec, integrate_forward(spec, y0, x0, ControlPath(u.grid, vm)))
        fd = (Fp - Fm) / (2 * h)
        worst = max(worst, abs(fd - u.grid.dt * G[j, 0]) / abs(fd))
    return worst


def criterion_5():
    spec = lq_spec()
    b = forward_backward_sweep(spec, [[1.0]], [[0.0]], TimeGrid(1.0, 1000), SweepParams(damping=0.5, tol=1e-8))
    _, G = reduced_cost_and_gradient(spec, [[1.0]], [[0.0]], b.control)
    kkt = math.sqrt(b.grid.dt * np.sum(projected_gradient(spec, b.control, G) ** 2))
    g = TimeGrid(1.0, 1000)
    u = ControlPath(g, np.random.default_rng(5).uniform(-1, 1, (1000, 1)))
    fd_lq = _fd_control_check(spec, [[1.0]], [[0.0]], u, (0, 333, 999))
    y0, x0 = demo_initial(32)
    gc = TimeGrid(2.0, 1000)
    fd_cs = _fd_control_check(demo_spec(), y0, x0, ControlPath.constant(gc, [0.3]), (0, 500, 999))
    ok = b.converged and kkt <= 1e-7 and fd_lq <= 1e-4 and fd_cs <= 1e-4
    return ok, f"KKT L2 {kkt:.2e}, FD rel LQ {fd_lq:.2e} CS {fd_cs:.2e}"


def criterion_6():
    spec = demo_spec()
    y0, x0 = demo_initial(32)
    coarse = demo_bundle(200, 32)
    fine = TimeGrid(2.0, 2000)
    b = _quiet_sweep(spec, y0, x0, fine, SweepParams(damping=0.5, tol=1e-8), coarse.control.resample(fine))
    gate = 1e-4 * (1.0 + abs(b.hamiltonian[0]))
    return b.converged and b.hamiltonian_drift <= gate, f"drift {b.hamiltonian_drift:.2e} vs gate {gate:.3e}"


def criterion_7():
    spec = cucker_smale_model(CuckerSmaleParams(), 1, 1)
    y0, x0 = demo_initial(32)
    traj = integrate_forward(spec, y0, x0, ControlPath.zeros(TimeGrid(1.0, 1000), 1))
    mom = np.array([cucker_smale_momentum(traj.y[j], traj.x[j], 1) for j in range(len(traj))])
    drift = float(np.max(np.abs(mom - mom[0])))
    # phi == 1, no leaders, v = (1, -1): v_1(t) = e^{-t}
    unit = cucker_smale_model(CuckerSmaleParams(beta=0.0), 0, 1)
    xs = np.array([[0.5, 1.0], [-0.2, -1.0]])
    v1 = math.exp(-1.0)
    exact = np.array([[0.5 + 1 - v1, v1], [-0.2 - (1 - v1), -v1]])
    errs = []
    for n in (10, 20, 40):
        tr = integrate_forward(unit, np.zeros((0, 2)), xs, ControlPath.zeros(TimeGrid(1.0, n), 0))
        errs.append(np.max(np.abs(tr.x[-1] - exact)))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    ok = drift <= 1e-10 and all(8 <= r <= 32 for r in ratios)
    return ok, f"momentum drift {drift:.2e}, RK4 ratios {ratios[0]:.2f} {ratios[1]:.2f}"


def criterion_8():
    spec = demo_spec()
    y0, x0 = demo_initial(32)
    g = TimeGrid(2.0, 200)
    params = SweepParams(damping=0.5, tol=1e-8)
    a = demo_bundle(200, 32)
    b = _quiet_sweep(spec, y0, duplicate_followers(x0), g, params)
    r_gap = max(np.max(np.abs(b.r[:, ::2] - a.r)), np.max(np.abs(b.r[:, 1::2] - a.r)))
    u_gap = float(np.max(np.abs(b.control.values - a.control.values)))
    p_gap = float(np.max(np.abs(2 * b.p[:, ::2] - a.p)))
    ok = r_gap <= 1e-10 and u_gap <= 1e-10 and p_gap <= 1e-10
    return ok, f"r gap {r_gap:.2e}, u gap {u_gap:.2e}, 2p' - p gap {p_gap:.2e}"


def criterion_9():
    rng = np.random.default_rng(9)
    exact = True
    for n in range(1, 8):
        for p in (1, 2):
            a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
            C = cost_matrix(a, b, p)
            best = min(np.sum(C[np.arange(n), list(s)]) for s in itertools.permutations(range(n)))
            exact &= wasserstein(a, b, p, method="assignment") == (best / n) ** (1.0 / p)
    worst = 0.0
    for n in range(1, 65):
        for p in (1, 2):
            a, b = rng.normal(size=(n, 1)), rng.normal(size=(n, 1))
            worst = max(worst, abs(wasserstein(a, b, p, method="assignment") - wasserstein(a, b, p, method="sort")))
    return bool(exact) and worst <= 1e-12, f"brute force exact: {bool(exact)}, sort gap {worst:.2e}"


def criterion_10():
    b = demo_bundle(200, 32)
    q_T = float(np.max(np.abs(b.q[-1])))
    r_T = float(np.max(np.linalg.norm(b.r[-1], axis=1)))
    marg = all(np.array_equal(marginal(lift(b.x[j], b.p[j]), "first").atoms, b.x[j]) for j in range(len(b.x)))
    return q_T == 0.0 and r_T == 0.0 and marg, f"|q(T)| {q_T}, max|r(T)| {r_T}, first marginal exact: {marg}"


def criterion_11():
    t0 = time.perf_counter()
    rep = convergence_study(demo_spec(), [[0.0, 1.0]], demo_mu0(), [16, 32, 64, 128], TimeGrid(2.0, 100),
                            SweepParams(damping=0.5, tol=1e-8), seed=0)
    dt = time.perf_counter() - t0
    gaps, w1 = rep.cost_gaps(), rep.w1_gaps()
    ok = rep.cost_gaps_nonincreasing() and rep.w1_decreasing() and dt < 300
    return ok, (f"cost gaps {np.array2string(gaps, precision=3)}, W1 {np.array2string(w1, precision=3)}, "
                f"{dt:.0f}s")


def criterion_12():
    tf = gaussian_test_function(np.zeros(4), 1.0)
    errs = [float(np.max(weak_pde_residual(demo_spec(), demo_bundle(n, 32), tf)[1:-1])) for n in (100, 200)]
    ratio = errs[0] / errs[1]
    return 2.0 <= ratio <= 8.0, f"residuals {errs[0]:.2e} -> {errs[1]:.2e}, ratio {ratio:.2f}"


def criterion_13():
    b = demo_bundle(200, 32)
    y0, x0 = demo_initial(32)
    rows = stability_probe(demo_spec(), y0, x0, b.grid, b.control, [1e-2, 5e-3, 2.5e-3])
    spread = ratio_spread(rows)
    return spread < 0.2, f"ratios {[round(r.ratio, 5) for r in rows]}, spread {spread:.2e}"


def criterion_14():
    config = load_config("cs_demo.json")
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp, "a"), Path(tmp, "b")
        codes = (cmd_optimize(json.loads(json.dumps(config)), a), cmd_optimize(json.loads(json.dumps(config)), b))
        names = sorted(p.name for p in a.iterdir())
        same = names == sorted(p.name for p in b.iterdir()) and all(
            (a / n).read_bytes() == (b / n).read_bytes() for n in names)
    return same and codes == (0, 0), f"{len(names)} artifacts identical: {same}"


CRITERIA = [globals()[f"criterion_{i}"] for i in range(1, 15)]


@pytest.mark.parametrize("idx", range(1, 15))
def test_criterion(idx, capsys):
    ok, detail = CRITERIA[idx - 1]()
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {idx}: {detail}")
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for i, fn in enumerate(CRITERIA, 1):
        ok, detail = fn()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} criterion {i}: {detail}", flush=True)
    sys.exit(1 if failed else 0)
