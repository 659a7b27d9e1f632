"""Command-line front end: solve | sweep | diagram | asymptotics.

All numeric output uses 16 significant digits so emitted files re-parse to
the printed precision.  Exit codes: 0 success, 1 validation error, 2 solver
failure, 3 partial sweep failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .asymptotics import (
    DegenerateInputError,
    GeometryMoments,
    beta1_root,
    flux_ratio,
    gamma_threshold,
    large_q_critical_voltages,
    large_q_expansion,
    lambda2_large_q_limit,
    small_q_critical_voltages,
    small_q_expansion,
)
from .config import ConfigError, RunConfig, load_config
from .fem import SolveError, compute_fluxes, electrochemical_profile
from .model import ValidationError
from .scan import (
    GridSpec,
    build_surface,
    classify_regions,
    detect_saddle_nodes,
    sweep_q,
    sweep_v,
    trace_unity_contours,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_PARTIAL = 3


def _fmt(value: float) -> str:
    return f"{value:.16g}"


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_solve(config: RunConfig, out_dir: Path) -> int:
    if config.q0_is_range or config.voltage_is_range:
        print("solve needs scalar q0 and voltage", file=sys.stderr)
        return EXIT_VALIDATION
    template = config.template
    try:
        result = template.solve(config.q0, config.voltage)
    except SolveError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    problem = template.problem(config.q0, config.voltage)
    mu = electrochemical_profile(problem, result.solution)
    x = result.mesh.nodes
    conc = result.solution.concentrations
    _write_csv(
        out_dir / "profiles.csv",
        ["x", "phi", "c_1", "c_2", "mu_1", "mu_2"],
        zip(x.tolist(), result.solution.phi.tolist(),
            conc[0].tolist(), conc[1].tolist(), mu[0].tolist(), mu[1].tolist()),
    )
    fx = result.fluxes
    _write_csv(
        out_dir / "fluxes.csv",
        ["x_left", "x_right", "J_1", "J_2"],
        zip(fx.element_left.tolist(), fx.element_right.tolist(),
            fx.per_element[0].tolist(), fx.per_element[1].tolist()),
    )
    print(f"J_1 = {_fmt(fx.averages[0])}")
    print(f"J_2 = {_fmt(fx.averages[1])}")
    print(f"I = {_fmt(fx.current)}")
    print(f"flux nonuniformity = {_fmt(float(fx.nonuniformity.max()))}")
    print(f"outer iterations = {len(result.history)}")
    if config.reference and config.q0 > 0:
        try:
            ref = template.solve(0.0, config.voltage)
            lam1 = flux_ratio(fx.averages[0], ref.fluxes.averages[0])
            lam2 = flux_ratio(fx.averages[1], ref.fluxes.averages[1])
            print(f"lambda_1 = {_fmt(lam1)}")
            print(f"lambda_2 = {_fmt(lam2)}")
        except (SolveError, DegenerateInputError) as exc:
            print(f"reference unavailable: {exc}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(config: RunConfig, out_dir: Path) -> int:
    template = config.template
    if config.q0_is_range and config.voltage_is_range:
        print("sweep needs exactly one ranged axis", file=sys.stderr)
        return EXIT_VALIDATION
    if config.q0_is_range:
        result = sweep_q(config.voltage, config.q0.values(), template)
    elif config.voltage_is_range:
        result = sweep_v(config.q0, config.voltage.values(), template)
    else:
        if config.q0 > 0:
            result = sweep_q(config.voltage, np.array([config.q0]), template)
        else:
            # a zero-charge point has lambda = 1 by definition
            res = template.solve(0.0, config.voltage)
            J = res.fluxes.averages
            rows = [(0.0, config.voltage, float(J[0]), float(J[1]), 1.0, 1.0, "ok")]
            _write_csv(out_dir / "sweep.csv",
                       ["q0", "V", "J_1", "J_2", "lambda_1", "lambda_2", "status"], rows)
            return EXIT_OK
    rows = []
    for i in range(result.q0.size):
        status = "ok" if result.ok[i] else "failed"
        rows.append((
            float(result.q0[i]), float(result.voltage[i]),
            float(result.J[0, i]), float(result.J[1, i]),
            float(result.lam[0, i]), float(result.lam[1, i]), status,
        ))
    _write_csv(out_dir / "sweep.csv",
               ["q0", "V", "J_1", "J_2", "lambda_1", "lambda_2", "status"], rows)
    return EXIT_OK if result.ok.all() else EXIT_PARTIAL


def cmd_diagram(config: RunConfig, out_dir: Path, workers: int) -> int:
    if not (config.q0_is_range and config.voltage_is_range):
        print("diagram needs both axes ranged", file=sys.stderr)
        return EXIT_VALIDATION
    grid = GridSpec(q0_axis=config.q0, v_axis=config.voltage, template=config.template)
    surface = build_surface(grid, workers=workers)
    labels, anomalies = classify_regions(surface)
    rows = []
    for i, v in enumerate(surface.voltage):
        for j, q0 in enumerate(surface.q0):
            status = "ok" if surface.ok[i, j] else "failed"
            if anomalies[i, j]:
                status = "anomaly"
            rows.append((
                float(q0), float(v),
                float(surface.lam[0, i, j]), float(surface.lam[1, i, j]),
                labels[i, j] or "-", status,
            ))
    _write_csv(out_dir / "surface.csv",
               ["q0", "V", "lambda_1", "lambda_2", "region", "status"], rows)
    contours = trace_unity_contours(surface, template=config.template)
    _write_json(out_dir / "contours.json", [
        {"species": c.species, "points": [[float(q), float(v)] for q, v in c.points]}
        for c in contours.curves
    ])
    saddles = detect_saddle_nodes(contours)
    _write_json(out_dir / "bifurcations.json", [
        {"species": p.species, "q0": float(p.q0), "V": float(p.voltage), "kind": p.kind}
        for p in saddles
    ])
    return EXIT_OK if surface.ok.all() else EXIT_PARTIAL


def cmd_asymptotics(config: RunConfig, out_dir: Path) -> int:
    template = config.template
    L, R = template.L, template.R
    moments = GeometryMoments.from_geometry()
    V = config.voltage if not config.voltage_is_range else 0.0
    try:
        small = small_q_expansion(V, L, R, moments)
        V1, V2 = small_q_critical_voltages(L, R, moments)
    except DegenerateInputError as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    t = L / R
    report = {
        "H1": moments.H1,
        "alpha": moments.alpha,
        "beta": moments.beta,
        "A": small.A,
        "B": small.B,
        "V1_0": V1,
        "V2_0": V2,
        "gamma_t": gamma_threshold(t),
        "small_q": {"J10": small.J10, "J11": small.J11,
                    "J20": small.J20, "J21": small.J21, "V": V},
    }
    try:
        report["beta_1"] = beta1_root(t, moments.alpha)
    except DegenerateInputError:
        report["beta_1"] = None
    try:
        big = large_q_expansion(V, L, R, moments)
        report["large_q"] = {"J10_inf": big.J10_inf, "J11_inf": big.J11_inf,
                             "J20_inf": big.J20_inf, "J21_inf": big.J21_inf, "V": V}
    except DegenerateInputError as exc:
        report["large_q"] = {"error": str(exc)}
    try:
        Vinf = large_q_critical_voltages(L, R, moments)
        report["V1_inf"], report["V2_inf"] = Vinf
        report["lambda2_inf_at_V"] = lambda2_large_q_limit(V, t, moments.alpha, moments.beta) \
            if V != math.log(t) else None
    except DegenerateInputError as exc:
        report["V1_inf"] = report["V2_inf"] = None
        report["large_q_roots_error"] = str(exc)
    _write_json(out_dir / "asymptotics.json", report)
    for key in ("H1", "alpha", "beta", "A", "B", "V1_0", "V2_0", "beta_1", "V1_inf", "V2_inf"):
        if report.get(key) is not None:
            print(f"{key} = {_fmt(report[key])}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnpflux",
        description="Steady PNP ion-channel solver and flux-ratio diagrams",
    )
    parser.add_argument("command", choices=["solve", "sweep", "diagram", "asymptotics"])
    parser.add_argument("--config", required=True, help="configuration file (INI-style or JSON)")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--workers", type=int, default=1, help="parallel rows for diagram")
    parser.add_argument("--monitor", choices=["optimal", "boundary"], default=None)
    parser.add_argument("--charge-convention", choices=["paper", "unit-plateau"], default=None)
    parser.add_argument("--excess", choices=["ideal", "hard-sphere"], default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "monitor": args.monitor,
        "charge_convention": args.charge_convention,
        "excess": args.excess,
        "directory": args.out,
    }
    try:
        config = load_config(args.config, overrides)
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "solve":
            return cmd_solve(config, out_dir)
        if args.command == "sweep":
            return cmd_sweep(config, out_dir)
        if args.command == "diagram":
            return cmd_diagram(config, out_dir, max(1, args.workers))
        return cmd_asymptotics(config, out_dir)
    except SolveError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValidationError, ConfigError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
