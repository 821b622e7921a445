import json
import warnings
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from mfpmp.dynamics import TimeGrid
from mfpmp.limits import InitialMeasureSpec, follower_positions, sample_initial_measure
from mfpmp.model import CuckerSmaleParams, cucker_smale_model, identity_debug_model
from mfpmp.pmp import SweepParams, forward_backward_sweep

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def load_config(name: str) -> dict:
    return json.loads((CONFIGS / name).read_text())


def demo_spec():
    return cucker_smale_model(CuckerSmaleParams(), m=1, d_space=1)


def demo_mu0() -> InitialMeasureSpec:
    return InitialMeasureSpec("uniform-box", {"low": [-1.0, -1.0], "high": [1.0, 1.0]}, "sobol")


def demo_initial(N: int = 32):
    """Leader at rest position 0 with unit velocity; followers on a Sobol box sample."""
    x0 = follower_positions(sample_initial_measure(demo_mu0(), N, 0), 2)
    return np.array([[0.0, 1.0]]), x0


def lq_spec():
    """Scalar regulator ``min int y^2 + u^2``, ``y' = u``, with one inert follower."""
    return identity_debug_model(d=1, m=1, leader_weight=1.0)


def random_cs_instance(rng, m=None, s=None, N=None):
    m = int(rng.integers(1, 4)) if m is None else m
    s = int(rng.integers(1, 3)) if s is None else s
    N = int(rng.integers(1, 33)) if N is None else N
    params = CuckerSmaleParams(sigma=rng.uniform(0.5, 1.5), beta=rng.uniform(0.2, 1.0),
                               amp=rng.uniform(0.5, 2.0))
    spec = cucker_smale_model(params, m=m, d_space=s)
    d = spec.d
    y, q = rng.normal(size=(2, m, d))
    x = rng.normal(size=(N, d))
    p = rng.normal(size=(N, d)) / N
    u = rng.uniform(-1, 1, spec.D)
    return spec, y, q, x, p, u


@lru_cache(maxsize=None)
def demo_bundle(n_steps: int = 200, N: int = 32):
    spec = demo_spec()
    y0, x0 = demo_initial(N)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return forward_backward_sweep(spec, y0, x0, TimeGrid(2.0, n_steps), SweepParams(damping=0.5, tol=1e-8))


@lru_cache(maxsize=None)
def lq_bundle(n_steps: int = 1000):
    return forward_backward_sweep(lq_spec(), [[1.0]], [[0.0]], TimeGrid(1.0, n_steps),
                                  SweepParams(damping=0.5, tol=1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
