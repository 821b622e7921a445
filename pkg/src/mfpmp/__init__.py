"""Pontryagin optimality systems for leader-follower swarms and their mean-field lift."""

__version__ = "0.1.0"

from .dynamics import ControlPath, SwarmState, TimeGrid, Trajectory, integrate_forward
from .errors import BlowUpError, ConfigError, MfpmpError, ModelError, SupportError
from .measures import EmpiricalMeasure, PhaseMeasure, lift, marginal, wasserstein
from .meanfield import check_e_uguale, hamiltonian_mf, verify_bundle, wasserstein_gradient
from .model import ModelSpec, build_preset, cucker_smale_model, identity_debug_model, validate_model
from .pmp import (
    ExtremalBundle,
    SweepParams,
    forward_backward_sweep,
    grad_hamiltonian,
    hamiltonian_N,
    reduced_cost_and_gradient,
)

__all__ = [
    "BlowUpError", "ConfigError", "ControlPath", "EmpiricalMeasure", "ExtremalBundle", "MfpmpError",
    "ModelError", "ModelSpec", "PhaseMeasure", "SupportError", "SwarmState", "SweepParams", "TimeGrid",
    "Trajectory", "build_preset", "check_e_uguale", "cucker_smale_model", "forward_backward_sweep",
    "grad_hamiltonian", "hamiltonian_N", "hamiltonian_mf", "identity_debug_model", "integrate_forward",
    "lift", "marginal", "reduced_cost_and_gradient", "validate_model", "verify_bundle",
    "wasserstein", "wasserstein_gradient",
]
