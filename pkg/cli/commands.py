"""Subcommand implementations; each returns a process exit code."""

import json
import logging
import os
import platform
import sys

import numpy as np
import pandas as pd
import scipy
import shapely

from core.anisotropy import (
    AnisotropyDensity,
    EnergyMatrixParams,
    StabilizerTable,
    k_min_table,
    margin_search,
)
from core.curve import manifold_distance
from core.errors import NonexistentStabilizer, ShortSeriesError
from core.harness import ConvergenceStudy, audit_structure, decay_rate_estimate, run_study
from core.solver import FlowSpec, SolverOptions, run_evolution
from utils.curve_io import read_curve, write_curve
from utils.shapes import GENERATORS, generate_initial, is_simple_shape

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PINCH_OFF = 2
EXIT_NEWTON = 3
EXIT_DEGENERATE = 4

STOP_EXIT_CODES = {
    "completed": EXIT_OK,
    "pinch_off": EXIT_PINCH_OFF,
    "newton_diverged": EXIT_NEWTON,
    "singular": EXIT_NEWTON,
    "degenerate": EXIT_DEGENERATE,
}

MANIFEST_VERSION = 1


def _versions():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "shapely": shapely.__version__,
    }


def _write_json(data, path):
    with open(path, "w") as f:
        json.dump(data, f, indent=4, default=_json_default)
    return path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def build_params(config, density):
    """Energy-matrix parameters for the configured stabilizer mode.

    The minimal table is computed whenever it exists so that a constant or
    file stabilizer below it gets flagged.
    """
    alpha = config.alpha
    stabilizer = config.stabilizer
    try:
        k_min = k_min_table(density, alpha)
    except NonexistentStabilizer as exc:
        if stabilizer["mode"] == "minimal":
            raise
        logger.warning("No minimal stabilizer to compare against: %s", exc)
        k_min = None

    if stabilizer["mode"] == "minimal":
        return EnergyMatrixParams(alpha, k_min, k_min=k_min)
    if stabilizer["mode"] == "constant":
        return EnergyMatrixParams(alpha, stabilizer["value"], k_min=k_min)
    return EnergyMatrixParams(alpha, StabilizerTable.from_csv(stabilizer["path"], alpha=alpha),
                              k_min=k_min)


def build_curve(config):
    curve_cfg = config.curve
    if curve_cfg["file"] is not None:
        return read_curve(curve_cfg["file"]), True
    curve = generate_initial(curve_cfg["shape"], curve_cfg["params"], curve_cfg["n"])
    return curve, is_simple_shape(curve_cfg["shape"])


def run_from_config(config, progress=True):
    """Run one evolution and write diagnostics.csv, snap_<step>.csv,
    audit.json and manifest.json into the output directory.

    Returns:
        (exit code, dict of written files)
    """
    density = AnisotropyDensity.from_spec(config.density)
    margin, critical_angle = margin_search(density)
    logger.info("Stability margin c = %.6g at theta = %.6f", margin, critical_angle)
    params = build_params(config, density)
    curve, simple = build_curve(config)
    flow = FlowSpec.from_dict(config.flow)
    opts = SolverOptions(config.newton["tol"], config.newton["max_iters"],
                         config.newton["linear_solver"])

    allow = config.allow_self_intersecting
    if not simple and allow:
        logger.info("%s is self-intersecting; pinch-off detection is off", config.curve["shape"])

    result = run_evolution(
        curve,
        flow,
        density,
        params,
        config.time_step,
        config.T,
        opts=opts,
        snapshot_every=config.snapshots["every"],
        snapshot_times=config.snapshots["times"],
        stop_on_pinch_off=config.stop_on_pinch_off,
        allow_self_intersecting=allow,
        progress=progress,
    )

    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    files = {"diagnostics": os.path.join(out, "diagnostics.csv")}
    result.diagnostics.to_csv(files["diagnostics"], index=False, float_format="%.17g")
    files["snapshots"] = [
        write_curve(c, os.path.join(out, f"snap_{step}.csv"))
        for step, c in sorted(result.snapshots.items())
    ]
    if params.k_min is not None:
        files["kmin"] = os.path.join(out, "kmin.csv")
        params.k_min.to_csv(files["kmin"])

    audit = audit_structure(result, flow, expect_energy_decay=not params.below_minimal)
    summary = dict(audit.summary)
    try:
        summary["decay_rate"] = decay_rate_estimate(result)
    except ShortSeriesError as exc:
        logger.debug("No decay rate: %s", exc)
        summary["decay_rate"] = None
    files["audit"] = _write_json(summary, os.path.join(out, "audit.json"))

    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "config": config.to_dict(),
        "density": density.to_spec(),
        "stability_margin": margin,
        "critical_angle": critical_angle,
        "energy_matrix": params.to_dict(),
        "generator_note": GENERATORS[config.curve["shape"]].note
        if config.curve["file"] is None else None,
        "stop_reason": result.stop_reason,
        "error": None if result.error is None else str(result.error),
        "final_time": result.final.t,
        "steps": len(result.reports),
        "mean_newton_iterations": result.mean_newton_iterations,
        "versions": _versions(),
    }
    files["manifest"] = _write_json(manifest, os.path.join(out, "manifest.json"))
    logger.info("Wrote %d snapshots and diagnostics to %s", len(files["snapshots"]), out)
    return STOP_EXIT_CODES[result.stop_reason], files


def study_from_config(config):
    reference = config.reference
    return ConvergenceStudy(
        flow=config.flow,
        density=config.density,
        alphas=config.alphas,
        curve=config.curve,
        base_n=config.base_n,
        levels=config.levels,
        times=config.times,
        reference_n=reference.get("n"),
        exact_circle=reference.get("exact_circle"),
        newton=SolverOptions(config.newton["tol"], config.newton["max_iters"],
                             config.newton["linear_solver"]),
        workers=config.workers,
    )


def sweep(config, progress=True):
    """Run a convergence study and write errors.csv, audit.csv and decay.csv"""
    result = run_study(study_from_config(config), progress=progress)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    files = {
        "errors": os.path.join(out, "errors.csv"),
        "audit": os.path.join(out, "audit.csv"),
        "decay": os.path.join(out, "decay.csv"),
    }
    result.errors.to_csv(files["errors"], index=False)
    result.audits.to_csv(files["audit"], index=False)
    result.decay_rates().to_csv(files["decay"], index=False)
    _write_json({"manifest_version": MANIFEST_VERSION, "study": config.to_dict(),
                 "versions": _versions()}, os.path.join(out, "manifest.json"))
    failed = result.errors["status"] != "ok"
    if failed.any():
        logger.warning("%d of %d error cells failed", int(failed.sum()), len(failed))
    return EXIT_OK, files


def kmin(density_spec, alpha, output=None):
    """Print (or write) the 21-node minimal stabilizer table"""
    density = AnisotropyDensity.from_spec(density_spec)
    table = k_min_table(density, alpha)
    if output:
        table.to_csv(output)
    else:
        table.to_frame().to_csv(sys.stdout, index=False, float_format="%.17g")
    return EXIT_OK


def distance(path_a, path_b):
    value = manifold_distance(read_curve(path_a), read_curve(path_b))
    sys.stdout.write(f"{value:.17g}\n")
    return EXIT_OK


def generate(shape, n, params, output):
    curve = generate_initial(shape, params, n)
    write_curve(curve, output)
    logger.info("Wrote %s with %d vertices to %s", shape, n, output)
    return EXIT_OK
