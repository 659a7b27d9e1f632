"""Run configuration: a plain-text key/value document with sections, or the
same schema as JSON.

Sections and keys::

    [problem]
    L, R, epsilon, n_nodes, delta, charge_convention, excess, radii,
    monitor, mesh_update, voltage | voltage_range, q0 | q0_range
    [solver]
    tolerance, max_iterations, continuation_q_steps, continuation_v_steps,
    n_outer
    [output]
    directory, reference

Ranges use ``lo:hi:count`` or ``lo:hi:count:spacing`` with spacing one of
linear, log, hybrid.  Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path

from .fem import SolverControls
from .model import ValidationError
from .scan import AxisSpec, ProblemTemplate

_PROBLEM_KEYS = {
    "l", "r", "epsilon", "n_nodes", "delta", "charge_convention", "excess",
    "radii", "monitor", "mesh_update", "voltage", "voltage_range", "q0", "q0_range",
}
_SOLVER_KEYS = {
    "tolerance", "max_iterations", "continuation_q_steps",
    "continuation_v_steps", "n_outer",
}
_OUTPUT_KEYS = {"directory", "reference"}


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration for one CLI invocation."""

    template: ProblemTemplate
    q0: object           # float or AxisSpec
    voltage: object      # float or AxisSpec
    output_dir: Path = Path("out")
    reference: bool = True

    @property
    def q0_is_range(self) -> bool:
        return isinstance(self.q0, AxisSpec)

    @property
    def voltage_is_range(self) -> bool:
        return isinstance(self.voltage, AxisSpec)


def _parse_range(text: str, name: str) -> AxisSpec:
    parts = [p.strip() for p in str(text).split(":")]
    if len(parts) not in (3, 4):
        raise ConfigError(f"{name}: expected lo:hi:count[:spacing], got {text!r}")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    spacing = parts[3] if len(parts) == 4 else "linear"
    try:
        return AxisSpec(lo=lo, hi=hi, count=count, spacing=spacing)
    except ValidationError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _parse_radii(text) -> tuple:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).replace(",", " ").split()]
    if len(vals) != 2:
        raise ConfigError(f"radii: expected two values, got {vals}")
    return tuple(vals)


def _as_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    val = str(text).strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _load_sections(path: Path) -> dict:
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("top-level JSON value must be an object")
        return {str(k).lower(): {str(kk).lower(): vv for kk, vv in v.items()}
                for k, v in data.items()}
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return {s.lower(): {k.lower(): v for k, v in parser.items(s)} for s in parser.sections()}


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a configuration file, applying CLI overrides."""
    sections = _load_sections(Path(path))
    unknown_sections = set(sections) - {"problem", "solver", "output"}
    if unknown_sections:
        raise ConfigError(f"unknown sections: {sorted(unknown_sections)}")
    problem = dict(sections.get("problem", {}))
    solver = dict(sections.get("solver", {}))
    output = dict(sections.get("output", {}))
    for name, block, allowed in (
        ("problem", problem, _PROBLEM_KEYS),
        ("solver", solver, _SOLVER_KEYS),
        ("output", output, _OUTPUT_KEYS),
    ):
        bad = set(block) - allowed
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
    if overrides:
        problem.update({k: v for k, v in overrides.items() if k in _PROBLEM_KEYS and v is not None})
        output.update({k: v for k, v in overrides.items() if k in _OUTPUT_KEYS and v is not None})

    if "q0" in problem and "q0_range" in problem:
        raise ConfigError("give q0 or q0_range, not both")
    if "voltage" in problem and "voltage_range" in problem:
        raise ConfigError("give voltage or voltage_range, not both")

    try:
        controls = SolverControls(
            tolerance=float(solver.get("tolerance", 1e-10)),
            max_iterations=int(solver.get("max_iterations", 100)),
            continuation_q_steps=int(solver.get("continuation_q_steps", 8)),
            continuation_v_steps=int(solver.get("continuation_v_steps", 8)),
        )
        template = ProblemTemplate(
            L=float(problem.get("l", 0.008)),
            R=float(problem.get("r", 0.001)),
            epsilon=float(problem.get("epsilon", 1e-5)),
            n_nodes=int(problem.get("n_nodes", 301)),
            delta=float(problem.get("delta", 1.0 / 800.0)),
            charge_convention=str(problem.get("charge_convention", "unit-plateau")),
            excess=str(problem.get("excess", "ideal")),
            radii=_parse_radii(problem.get("radii", (0.0, 0.0))),
            monitor_variant=str(problem.get("monitor", "boundary")),
            mesh_update=str(problem.get("mesh_update", "direct")),
            n_outer=int(solver.get("n_outer", 5)),
            controls=controls,
        )
        # touch the validating constructors early so bad values fail here
        template.problem(0.0, 0.0)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    if "q0_range" in problem:
        q0 = _parse_range(problem["q0_range"], "q0_range")
    else:
        q0 = float(problem.get("q0", 0.0))
        if q0 < 0:
            raise ConfigError("q0 must be >= 0")
    if "voltage_range" in problem:
        voltage = _parse_range(problem["voltage_range"], "voltage_range")
    else:
        voltage = float(problem.get("voltage", 0.0))

    return RunConfig(
        template=template,
        q0=q0,
        voltage=voltage,
        output_dir=Path(output.get("directory", "out")),
        reference=_as_bool(output.get("reference", True)),
    )
