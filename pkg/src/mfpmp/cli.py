"""Command-line front end: ``mfpmp {simulate,optimize,verify,converge} --config run.json``.

Exit codes: 0 success, 1 configuration error, 2 numeric blow-up,
3 non-convergence (or failed verification gates).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_NONCONVERGED = 0, 1, 2, 3

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_MATRIX = {"type": "array", "items": {"type": "array", "items": _NUM}}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "initial", "grid"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["preset"],
            "properties": {
                "preset": {"enum": ["cucker_smale", "identity_debug"]},
                "params": {"type": "object"},
            },
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "required": ["y0"],
            "properties": {
                "y0": _MATRIX,
                "x0": _MATRIX,
                "N": {"type": "integer", "minimum": 1},
                "mu0": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["uniform-box", "gaussian-truncated", "atoms-from-file"]},
                        "params": {"type": "object"},
                        "sampler": {"enum": ["iid", "qmc", "sobol"]},
                    },
                },
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["T", "n_steps"],
            "properties": {"T": {"type": "number", "exclusiveMinimum": 0},
                           "n_steps": {"type": "integer", "minimum": 1}},
        },
        "control": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"constant": {"type": "array", "items": _NUM}},
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "hamiltonian_drift_tol": {"type": "number", "exclusiveMinimum": 0},
                "u_init": {"type": "array", "items": _NUM},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bundle": {"type": "string"},
                "test_functions": {"type": "array", "items": {"enum": ["constant", "linear", "gaussian"]}},
                "stride": {"type": "integer", "minimum": 1},
                "e_uguale_tol": {"type": "number", "exclusiveMinimum": 0},
                "lift_gap_tol": {"type": "number", "exclusiveMinimum": 0},
                "weak_residual_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "converge": {
            "type": "object",
            "additionalProperties": False,
            "required": ["Ns"],
            "properties": {
                "Ns": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "duplicate_check": {"enum": ["first", "all", "none"]},
            },
        },
        "seed": _INT,
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}


class _ConfigProblem(Exception):
    pass


def _version() -> str:
    from . import __version__

    return __version__


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _ConfigProblem(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise _ConfigProblem(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``KEY=VALUE`` items; ``KEY`` is a dotted path, ``VALUE`` JSON or a bare string."""
    config = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise _ConfigProblem(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise _ConfigProblem(f"--set {key}: {part!r} is not an object")
        node[parts[-1]] = value
    return config


def validate_config(config: dict) -> None:
    import jsonschema

    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise _ConfigProblem(f"config field {where}: {err.message}")


# ----------------------------------------------------------------------------
# building blocks


def _build(config: dict):
    import numpy as np

    from .dynamics import TimeGrid
    from .errors import ConfigError, ModelError
    from .limits import InitialMeasureSpec, follower_positions, sample_initial_measure
    from .model import build_preset, require_valid
    from .pmp import SweepParams

    try:
        spec = build_preset(config["model"]["preset"], config["model"].get("params"))
        require_valid(spec).raise_if_failed()
        grid = TimeGrid(config["grid"]["T"], config["grid"]["n_steps"])
        y0 = np.array(config["initial"]["y0"], dtype=float).reshape(spec.m, spec.d)
        init = config["initial"]
        mu0 = None
        if "mu0" in init:
            m0 = init["mu0"]
            mu0 = InitialMeasureSpec(m0["kind"], m0.get("params", {}), m0.get("sampler", "sobol"))
        if "x0" in init:
            x0 = np.array(init["x0"], dtype=float).reshape(-1, spec.d)
        elif mu0 is not None and "N" in init:
            x0 = follower_positions(sample_initial_measure(mu0, init["N"], config.get("seed", 0)), spec.d)
        elif mu0 is None:
            raise ConfigError("initial needs x0, or mu0 together with N")
        else:
            x0 = None
        sweep = {k: v for k, v in config.get("sweep", {}).items() if k != "u_init"}
        params = SweepParams(**sweep)
    except (ModelError, ConfigError, ValueError, KeyError, TypeError) as exc:
        raise _ConfigProblem(str(exc)) from exc
    return spec, grid, y0, x0, mu0, params


def _header(config: dict, kind: str) -> str:
    from .io import config_hash

    return f"mfpmp {kind} config_hash={config_hash(config)} version={_version()} seed={config.get('seed', 0)}"


def _meta(config: dict) -> dict:
    from .io import config_hash

    return {"config_hash": config_hash(config), "version": _version(), "seed": config.get("seed", 0)}


def _node_columns(m: int, N: int, d: int, D: int, adjoint: bool) -> list[str]:
    cols = ["t"]
    cols += [f"y{k}_{a}" for k in range(m) for a in range(d)]
    cols += [f"x{i}_{a}" for i in range(N) for a in range(d)]
    if adjoint:
        cols += [f"q{k}_{a}" for k in range(m) for a in range(d)]
        cols += [f"p{i}_{a}" for i in range(N) for a in range(d)]
        cols += [f"r{i}_{a}" for i in range(N) for a in range(d)]
    cols += [f"u{j}" for j in range(D)]
    return cols


def write_trajectory_csv(path, config, traj) -> None:
    import numpy as np

    from .io import write_csv

    n1, m, d = traj.y.shape
    N = traj.x.shape[1]
    u = traj.control.node_values()
    cols = _node_columns(m, N, d, u.shape[1], adjoint=False)
    data = np.hstack([traj.grid.times[:, None], traj.y.reshape(n1, -1), traj.x.reshape(n1, -1), u])
    write_csv(path, cols, data, _header(config, "trajectory"))


def write_bundle_csv(path, config, bundle) -> None:
    import numpy as np

    from .io import write_csv

    n1, m, d = bundle.y.shape
    N = bundle.x.shape[1]
    u = bundle.control.node_values()
    cols = _node_columns(m, N, d, u.shape[1], adjoint=True)
    data = np.hstack([bundle.grid.times[:, None], bundle.y.reshape(n1, -1), bundle.x.reshape(n1, -1),
                      bundle.q.reshape(n1, -1), bundle.p.reshape(n1, -1), bundle.r.reshape(n1, -1), u])
    write_csv(path, cols, data, _header(config, "bundle"))


class StoredBundle:
    """Node data read back from a bundle CSV; enough for every measure-level check."""

    def __init__(self, path, d: int):
        import numpy as np

        from .dynamics import SupportBounds, TimeGrid
        from .io import read_csv

        cols, data, _ = read_csv(path)

        def block(prefix):
            idx = [i for i, c in enumerate(cols) if c.startswith(prefix) and c[len(prefix):len(prefix) + 1].isdigit()]
            return data[:, idx].reshape(data.shape[0], -1, d) if idx else np.zeros((data.shape[0], 0, d))

        t = data[:, 0]
        self.grid = TimeGrid(t[-1], len(t) - 1)
        self.y, self.x = block("y"), block("x")
        self.q, self.p, self.r = block("q"), block("p"), block("r")
        self.bounds = SupportBounds(float("nan"))


def _atomic_json(path, obj):
    from .io import write_json

    write_json(path, obj)


# ----------------------------------------------------------------------------
# subcommands


def cmd_simulate(config: dict, out: Path) -> int:
    import numpy as np

    from .dynamics import ControlPath, integrate_forward
    from .model import cucker_smale_momentum

    spec, grid, y0, x0, _, _ = _build(config)
    if x0 is None:
        raise _ConfigProblem("simulate needs initial.x0 or initial.N")
    u = config.get("control", {}).get("constant", [0.0] * spec.D)
    if len(u) != spec.D:
        raise _ConfigProblem(f"config field control.constant: expected {spec.D} entries")
    traj = integrate_forward(spec, y0, x0, ControlPath.constant(grid, u))
    write_trajectory_csv(out / "trajectory.csv", config, traj)
    summary = {**_meta(config), "rho_T": traj.bounds.rho_T, "N": traj.N}
    if spec.name == "cucker_smale":
        mom = np.array([cucker_smale_momentum(traj.y[j], traj.x[j], spec.d // 2) for j in range(len(traj))])
        summary["momentum_drift"] = float(np.max(np.abs(mom - mom[0])))
    _atomic_json(out / "summary.json", summary)
    return EXIT_OK


def _run_optimize(config: dict):
    import numpy as np

    from .dynamics import ControlPath
    from .pmp import forward_backward_sweep

    spec, grid, y0, x0, _, params = _build(config)
    if x0 is None:
        raise _ConfigProblem("optimize needs initial.x0 or initial.N")
    u_init = None
    if "u_init" in config.get("sweep", {}):
        u0 = np.array(config["sweep"]["u_init"], dtype=float)
        if u0.size != spec.D:
            raise _ConfigProblem(f"config field sweep.u_init: expected {spec.D} entries")
        u_init = ControlPath.constant(grid, u0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bundle = forward_backward_sweep(spec, y0, x0, grid, params, u_init)
    return spec, bundle


def cmd_optimize(config: dict, out: Path) -> int:
    from .io import write_csv

    _, bundle = _run_optimize(config)
    write_bundle_csv(out / "bundle.csv", config, bundle)
    write_csv(out / "sweep_history.csv", ["iteration", "cost", "residual"],
              [(i + 1, c, r) for i, (c, r) in enumerate(zip(bundle.costs, bundle.residuals))],
              _header(config, "sweep_history"))
    _atomic_json(out / "summary.json", {**_meta(config), **bundle.summary()})
    return EXIT_OK if bundle.converged else EXIT_NONCONVERGED


def cmd_verify(config: dict, out: Path) -> int:
    from .meanfield import VerifyTolerances, default_test_functions, verify_bundle

    vcfg = config.get("verify", {})
    if "bundle" in vcfg:
        spec, *_ = _build(config)
        try:
            bundle = StoredBundle(vcfg["bundle"], spec.d)
        except (OSError, ValueError) as exc:
            raise _ConfigProblem(f"config field verify.bundle: {exc}") from exc
    else:
        spec, bundle = _run_optimize(config)
    names = vcfg.get("test_functions", ["constant", "linear", "gaussian"])
    testfns = [tf for tf in default_test_functions(spec.d) if tf.name in names]
    tol = VerifyTolerances(
        e_uguale=vcfg.get("e_uguale_tol", 1e-10),
        lift_gap=vcfg.get("lift_gap_tol", 1e-12),
        weak_residual=vcfg.get("weak_residual_tol", 1e-2),
    )
    report = verify_bundle(spec, bundle, testfns, tol, stride=vcfg.get("stride", 1))
    _atomic_json(out / "verification.json", {**_meta(config), **report.as_dict()})
    return EXIT_OK if report.passed else EXIT_NONCONVERGED


def cmd_converge(config: dict, out: Path) -> int:
    from .io import format_float, write_csv
    from .limits import ConvergenceRow, convergence_study

    spec, grid, y0, _, mu0, params = _build(config)
    if mu0 is None or "converge" not in config:
        raise _ConfigProblem("converge needs initial.mu0 and a converge block")
    c = config["converge"]
    try:
        report = convergence_study(spec, y0, mu0, c["Ns"], grid, params, config.get("seed", 0),
                                   c.get("duplicate_check", "first"))
    except ValueError as exc:
        raise _ConfigProblem(str(exc)) from exc
    rows = []
    for row in report.rows:
        d = row.as_dict()
        rows.append([d[k] if isinstance(d[k], str) else
                     (str(int(d[k])) if isinstance(d[k], (bool, int)) else format_float(d[k]))
                     for k in ConvergenceRow.COLUMNS])
    write_csv(out / "convergence.csv", list(ConvergenceRow.COLUMNS), rows, _header(config, "convergence"))
    _atomic_json(out / "convergence.json", {**_meta(config), **report.as_dict()})
    return EXIT_OK if all(r.converged for r in report.rows) else EXIT_NONCONVERGED


COMMANDS = {"simulate": cmd_simulate, "optimize": cmd_optimize, "verify": cmd_verify, "converge": cmd_converge}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfpmp", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path (repeatable)")
    parser.add_argument("--out", help="output directory (default: output.dir or .)")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--threads", type=int, help="thread count for the linear-algebra backend")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        # only effective before the numerical libraries are first imported
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        config = apply_overrides(load_config(args.config), args.set)
        if args.seed is not None:
            config["seed"] = args.seed
        validate_config(config)
        out = Path(args.out or config.get("output", {}).get("dir", "."))
        return COMMANDS[args.command](config, out)
    except _ConfigProblem as exc:
        print(f"mfpmp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"mfpmp: numeric blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP


if __name__ == "__main__":
    sys.exit(main())
