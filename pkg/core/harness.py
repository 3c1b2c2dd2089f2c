"""Convergence studies and structure audits over evolution output."""

import logging
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.anisotropy import AnisotropyDensity, EnergyMatrixParams
from core.curve import PolygonalCurve, manifold_distance
from core.errors import ShortSeriesError, SpPfemError
from core.solver import FlowLaw, FlowSpec, SolverOptions, run_evolution
from utils.shapes import circle, generate_initial

logger = logging.getLogger(__name__)

IDENTITY_TOLERANCE = 1e-11
CONSERVATION_TOLERANCE = 1e-12
ENERGY_TOLERANCE = 1e-12
EXACT_CIRCLE_VERTICES = 8192

ERROR_COLUMNS = ["alpha", "level", "n", "h", "tau", "t", "error", "order", "status"]
AUDIT_COLUMNS = [
    "passed",
    "max_identity_residual",
    "max_area_change",
    "max_normalized_area_loss",
    "energy_monotone",
    "mean_newton_iterations",
]


class ConvergenceStudy:
    """Levels use h = 1/N with N = base_n * 2^level and tau = h^2.

    The reference is either a finer run (`reference_n`) or the exact
    shrinking circle of radius sqrt(R0^2 - 2t) (`exact_circle=R0`, isotropic
    curvature flow only).
    """

    def __init__(self, flow, density, alphas, curve, base_n, levels, times,
                 reference_n=None, exact_circle=None, newton=None, workers=1):
        self.flow = flow if isinstance(flow, FlowSpec) else FlowSpec.from_dict(flow)
        self.density = density if isinstance(density, str) else density.to_spec()
        self.alphas = [float(a) for a in alphas]
        self.curve = dict(curve)
        self.base_n = int(base_n)
        self.levels = int(levels)
        self.times = sorted(float(t) for t in times)
        self.reference_n = reference_n
        self.exact_circle = exact_circle
        self.newton = newton or SolverOptions()
        self.workers = int(workers)

        if (reference_n is None) == (exact_circle is None):
            raise ValueError("Give exactly one of reference_n and exact_circle")
        if reference_n is not None and reference_n <= self.level_n(self.levels - 1):
            raise ValueError(
                f"Reference N={reference_n} must be finer than the finest level "
                f"N={self.level_n(self.levels - 1)}"
            )
        if not self.times:
            raise ValueError("A convergence study needs at least one evaluation time")

    def level_n(self, level):
        return self.base_n * 2**level

    def level_tau(self, level):
        return 1.0 / self.level_n(level) ** 2

    @property
    def final_time(self):
        return self.times[-1]


class ErrorRecord:
    def __init__(self, alpha, level, n, t, error, order=math.nan, status="ok"):
        self.alpha = alpha
        self.level = level
        self.n = n
        self.h = 1.0 / n
        self.tau = self.h**2
        self.t = t
        self.error = error
        self.order = order
        self.status = status

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "level": self.level,
            "n": self.n,
            "h": self.h,
            "tau": self.tau,
            "t": self.t,
            "error": self.error,
            "order": self.order,
            "status": self.status,
        }


def _run_cell(job):
    """Run one evolution for a study cell; top level so worker processes can pickle it"""
    tau = 1.0 / job["n"] ** 2
    opts = SolverOptions(**job["newton"])
    flow = FlowSpec.from_dict(job["flow"])
    try:
        density = AnisotropyDensity.from_spec(job["density"])
        params = EnergyMatrixParams.minimal(density, job["alpha"])
        curve = generate_initial(job["shape"], job["params"], job["n"])
        result = run_evolution(
            curve,
            flow,
            density,
            params,
            tau,
            job["T"],
            opts=opts,
            sample_times=job["times"],
            progress=False,
        )
    except SpPfemError as exc:
        return {"samples": {}, "stop_reason": "rejected", "error": str(exc), "audit": None,
                "decay_rate": math.nan}
    try:
        decay_rate = decay_rate_estimate(result)
    except ShortSeriesError:
        decay_rate = math.nan
    return {
        "audit": audit_structure(result, flow).summary,
        "decay_rate": decay_rate,
        "samples": {t: c.vertices for t, c in result.samples.items()},
        "stop_reason": result.stop_reason,
        "error": None if result.error is None else str(result.error),
    }


def _cell_job(study, alpha, n):
    return {
        "density": study.density,
        "alpha": alpha,
        "shape": study.curve.get("shape", "ellipse"),
        "params": study.curve.get("params", {}),
        "n": n,
        "flow": study.flow.to_dict(),
        "T": study.final_time,
        "times": study.times,
        "newton": {
            "newton_tol": study.newton.newton_tol,
            "max_newton_iters": study.newton.max_newton_iters,
            "linear_solver": study.newton.linear_solver,
        },
    }


def _map_jobs(jobs, workers, progress):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(_run_cell, jobs), total=len(jobs), disable=not progress))
    return [_run_cell(job) for job in tqdm(jobs, disable=not progress)]


def _exact_circle(radius0, t):
    radius_sq = radius0**2 - 2.0 * t
    if radius_sq <= 0:
        return None
    return PolygonalCurve(circle(EXACT_CIRCLE_VERTICES, r=math.sqrt(radius_sq)))


def convergence_orders(table):
    """Fill the order column from adjacent levels with positive finite errors"""
    table = table.sort_values(["alpha", "t", "level"]).reset_index(drop=True)
    orders = np.full(len(table), np.nan)
    for _, group in table.groupby(["alpha", "t"], sort=False):
        index = group.index.to_numpy()
        for prev, cur in zip(index[:-1], index[1:]):
            e_prev, e_cur = table.at[prev, "error"], table.at[cur, "error"]
            if e_prev > 0 and e_cur > 0 and np.isfinite(e_prev) and np.isfinite(e_cur):
                orders[cur] = math.log2(e_prev / e_cur) / math.log2(
                    table.at[prev, "h"] / table.at[cur, "h"]
                )
    table["order"] = orders
    return table


class StudyResult:
    """Error table plus one audit row per evolution (references included)"""

    def __init__(self, errors, audits):
        self.errors = errors
        self.audits = audits

    def decay_rates(self):
        return self.audits[["alpha", "role", "n", "decay_rate"]]


def _audit_row(alpha, role, level, n, outcome):
    row = {
        "alpha": alpha,
        "role": role,
        "level": level,
        "n": n,
        "stop_reason": outcome["stop_reason"],
        "error": outcome["error"],
        "decay_rate": outcome["decay_rate"],
    }
    summary = outcome["audit"] or {}
    for key in AUDIT_COLUMNS:
        row[key] = summary.get(key)
    return row


def run_study(study, progress=True):
    """Run every cell of a study, then score each level against the reference"""
    jobs, keys = [], []
    for alpha in study.alphas:
        if study.reference_n is not None:
            jobs.append(_cell_job(study, alpha, study.reference_n))
            keys.append((alpha, "reference"))
        for level in range(study.levels):
            jobs.append(_cell_job(study, alpha, study.level_n(level)))
            keys.append((alpha, level))

    logger.info("Running %d study cells on %d worker(s)", len(jobs), study.workers)
    outcomes = dict(zip(keys, _map_jobs(jobs, study.workers, progress)))

    records, audits = [], []
    for alpha in study.alphas:
        reference = outcomes.get((alpha, "reference"))
        if reference is not None:
            audits.append(_audit_row(alpha, "reference", None, study.reference_n, reference))
        for level in range(study.levels):
            n = study.level_n(level)
            outcome = outcomes[(alpha, level)]
            audits.append(_audit_row(alpha, "level", level, n, outcome))
            for t in study.times:
                status = outcome["stop_reason"]
                error = math.nan
                if t not in outcome["samples"]:
                    status = status if status != "completed" else "missing_sample"
                else:
                    if study.exact_circle is not None:
                        target = _exact_circle(study.exact_circle, t)
                    elif t in reference["samples"]:
                        target = PolygonalCurve(reference["samples"][t])
                    else:
                        target = None
                    if target is None:
                        status = "reference_failed"
                    else:
                        try:
                            error = manifold_distance(PolygonalCurve(outcome["samples"][t]), target)
                            status = "ok"
                        except SpPfemError as exc:
                            status = f"distance_failed: {exc}"
                records.append(ErrorRecord(alpha, level, n, t, error, status=status).to_dict())

    errors = convergence_orders(pd.DataFrame(records, columns=ERROR_COLUMNS))
    return StudyResult(errors, pd.DataFrame(audits))


def run_convergence(study, progress=True):
    """Manifold-distance errors of every (alpha, level, time) cell against the
    reference, with orders between adjacent levels.

    Failed cells are reported in the status column with NaN errors.
    """
    return run_study(study, progress).errors


class AreaDecayAudit:
    """Per-step identity residuals and the normalized area loss of one run,
    with the pass/fail summary"""

    def __init__(self, identity_residuals, area_loss, energy_increase, summary):
        self.identity_residuals = identity_residuals
        self.area_loss = area_loss
        self.energy_increase = energy_increase
        self.summary = summary

    @property
    def passed(self):
        return self.summary["passed"]


def _diagnostics(series):
    frame = getattr(series, "diagnostics", series)
    if not isinstance(frame, pd.DataFrame):
        raise TypeError(f"Expected an evolution result or diagnostics table, got {type(series)!r}")
    return frame


def audit_structure(series, flow, expect_energy_decay=True):
    """Check the exact area identity (or conservation) and energy monotonicity
    on every step of a run; never raises on a violation"""
    frame = _diagnostics(series)
    steps = frame.iloc[1:]
    area0 = float(frame["area"].iloc[0]) if len(frame) else 0.0
    energy0 = float(frame["energy"].iloc[0]) if len(frame) else 0.0

    if steps.empty:
        summary = {
            "steps": 0,
            "identity_ok": True,
            "conservation_ok": True,
            "energy_monotone": True,
            "passed": True,
        }
        return AreaDecayAudit(pd.Series(dtype=float), pd.Series(dtype=float),
                              pd.Series(dtype=float), summary)

    tau = float(np.min(np.diff(frame["t"].to_numpy())))
    residuals = steps["area_residual"].abs()
    area_changes = frame["area"].diff().iloc[1:].abs()
    energy_increase = steps["energy_delta"]
    scale = max(abs(area0), 1e-300)

    if flow.law is FlowLaw.CURVATURE:
        tolerance = IDENTITY_TOLERANCE * max(1.0, abs(area0) / tau)
        identity_ok = bool(residuals.max() <= tolerance)
        conservation_ok = None
    else:
        tolerance = CONSERVATION_TOLERANCE * scale
        identity_ok = bool((residuals * tau).max() <= tolerance)
        conservation_ok = bool(area_changes.max() <= tolerance)

    energy_monotone = bool(energy_increase.max() <= ENERGY_TOLERANCE * energy0)
    passed = identity_ok and conservation_ok is not False
    if expect_energy_decay:
        passed = passed and energy_monotone

    summary = {
        "steps": int(len(steps)),
        "law": flow.law.value,
        "max_identity_residual": float(residuals.max()),
        "identity_tolerance": float(tolerance),
        "identity_ok": identity_ok,
        "max_area_change": float(area_changes.max()),
        "max_normalized_area_loss": float(steps["area_loss"].abs().max()),
        "conservation_ok": conservation_ok,
        "max_energy_increase": float(energy_increase.max()),
        "energy_monotone": energy_monotone,
        "final_energy_ratio": float(steps["energy_ratio"].iloc[-1]),
        "mean_newton_iterations": float(steps["newton_iters"].mean()),
        "passed": bool(passed),
    }
    if not passed:
        logger.warning("Structure audit failed: %s", summary)
    return AreaDecayAudit(residuals, steps["area_loss"], energy_increase, summary)


def decay_rate_estimate(series, window=0.5):
    """Least-squares slope of A(t) over the trailing `window` fraction of the run"""
    frame = _diagnostics(series)
    if len(frame) < 4:
        raise ShortSeriesError(f"Need at least 4 rows to fit a decay rate, got {len(frame)}")
    start = int(len(frame) * (1.0 - window))
    tail = frame.iloc[min(start, len(frame) - 2):]
    slope, _ = np.polyfit(tail["t"].to_numpy(), tail["area"].to_numpy(), 1)
    return float(slope)
