"""Semi-implicit structure-preserving time stepping for anisotropic curve flows.

Unknowns of one step are packed as z = [x_0..x_{N-1}, y_0..y_{N-1},
mu_0..mu_{N-1}, (eta_0..eta_{N-1})] and the residual rows in the same
block order: velocity rows, the two curvature-row components, and the
Helmholtz rows of the intermediate flow. Everything that depends on the
geometry (lumped weights, energy matrices, |h_j|) is frozen on the old
curve, so the residual is quadratic in z and Newton uses its exact
Jacobian.
"""

import logging
import warnings
from enum import Enum

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, splu, spsolve
from tqdm import tqdm

from core.anisotropy import energy_matrix
from core.curve import (
    PolygonalCurve,
    edge_geometry,
    enclosed_area,
    interface_energy,
    interpolate_curves,
    nodal_weights,
    self_intersection_check,
    weighted_mesh_ratio,
)
from core.errors import (
    DegenerateCurve,
    DegenerateEdge,
    NewtonDiverged,
    SelfIntersecting,
    SingularSystem,
    SizeMismatch,
)

logger = logging.getLogger(__name__)

# rot(v) = -v^perp = (v_y, -v_x)
ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])
DEGENERATE_RATIO = 1e-14
SLOW_NEWTON = 10
LINEAR_SOLVERS = ("splu", "spsolve")

DIAGNOSTIC_COLUMNS = [
    "step",
    "t",
    "area",
    "energy",
    "mesh_ratio",
    "newton_iters",
    "area_residual",
    "energy_delta",
    "area_loss",
    "energy_ratio",
]


class FlowLaw(Enum):
    CURVATURE = "curvature"
    AREA_CONSERVED = "area_conserved"
    SURFACE_DIFFUSION = "surface_diffusion"
    INTERMEDIATE = "intermediate"


class FlowSpec:
    """Normal velocity law driving a step; `xi` and `nu` only for the
    intermediate flow"""

    def __init__(self, law, xi=None, nu=None):
        self.law = FlowLaw(law)
        if self.law is FlowLaw.INTERMEDIATE:
            if xi is None or nu is None or xi <= 0 or nu <= 0:
                raise ValueError(f"Intermediate flow needs xi > 0 and nu > 0, got xi={xi}, nu={nu}")
            self.xi = float(xi)
            self.nu = float(nu)
        else:
            self.xi = None
            self.nu = None

    @property
    def has_eta(self):
        return self.law is FlowLaw.INTERMEDIATE

    @property
    def conserves_area(self):
        return self.law is not FlowLaw.CURVATURE

    def to_dict(self):
        data = {"law": self.law.value}
        if self.has_eta:
            data.update(xi=self.xi, nu=self.nu)
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(data["law"], xi=data.get("xi"), nu=data.get("nu"))

    def __eq__(self, other):
        return isinstance(other, FlowSpec) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"FlowSpec({self.to_dict()})"


class FlowState:
    def __init__(self, curve, mu, t=0.0, step=0, eta=None):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (curve.n,):
            raise SizeMismatch(f"mu has shape {mu.shape} for a curve with {curve.n} vertices")
        self.curve = curve
        self.mu = mu
        self.t = float(t)
        self.step = int(step)
        self.eta = None if eta is None else np.asarray(eta, dtype=float)

    def __repr__(self):
        return f"FlowState(step={self.step}, t={self.t:.6g}, N={self.curve.n})"


class StepReport:
    def __init__(self, newton_iterations, final_residual_norm, area_decay_residual,
                 energy_delta, area, energy):
        self.newton_iterations = newton_iterations
        self.final_residual_norm = final_residual_norm
        self.area_decay_residual = area_decay_residual
        self.energy_delta = energy_delta
        self.area = area
        self.energy = energy

    def __repr__(self):
        return (
            f"StepReport(iters={self.newton_iterations}, "
            f"residual={self.final_residual_norm:.2e}, "
            f"area_residual={self.area_decay_residual:.2e})"
        )


class SolverOptions:
    def __init__(self, newton_tol=1e-11, max_newton_iters=50, linear_solver="splu"):
        if newton_tol <= 0:
            raise ValueError(f"newton_tol must be positive, got {newton_tol}")
        if max_newton_iters < 1:
            raise ValueError(f"max_newton_iters must be at least 1, got {max_newton_iters}")
        if linear_solver not in LINEAR_SOLVERS:
            raise ValueError(
                f"linear_solver must be one of {', '.join(LINEAR_SOLVERS)}, got {linear_solver!r}"
            )
        self.newton_tol = float(newton_tol)
        self.max_newton_iters = int(max_newton_iters)
        self.linear_solver = linear_solver

    def to_dict(self):
        return {
            "tol": self.newton_tol,
            "max_iters": self.max_newton_iters,
            "linear_solver": self.linear_solver,
        }


class StepOperators:
    """Old-curve quantities shared by every Newton iteration of one step"""

    def __init__(self, curve, density, params):
        geom = edge_geometry(curve)
        self.n = curve.n
        self.old_vertices = curve.vertices
        self.old_edges = geom.edges
        self.lengths = geom.lengths
        self.total_length = float(np.sum(geom.lengths))
        self.weights = nodal_weights(curve)
        self.matrices = energy_matrix(density, geom.angles, params)
        self.stiffness = stiffness_matrix(geom.lengths)


def stiffness_matrix(lengths):
    """Periodic (d_s u, d_s v)^h matrix for edge lengths |h_j|"""
    n = len(lengths)
    inv = 1.0 / lengths
    inv_next = np.roll(inv, -1)
    idx = np.arange(n)
    rows = np.concatenate([idx, idx, idx])
    cols = np.concatenate([idx, (idx - 1) % n, (idx + 1) % n])
    vals = np.concatenate([inv + inv_next, -inv, -inv_next])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _check_trial(ops, trial, flow):
    vertices, mu, eta = _unpack_trial(trial)
    if vertices.shape != (ops.n, 2) or mu.shape != (ops.n,):
        raise SizeMismatch(
            f"Trial shapes {vertices.shape}, {mu.shape} do not match N={ops.n}"
        )
    if flow.has_eta:
        if eta is None:
            raise SizeMismatch("Intermediate flow needs an eta block in the trial")
        if eta.shape != (ops.n,):
            raise SizeMismatch(f"eta has shape {eta.shape}, expected ({ops.n},)")
    return vertices, mu, eta


def _unpack_trial(trial):
    vertices, mu = trial[0], trial[1]
    eta = trial[2] if len(trial) > 2 else None
    vertices = np.asarray(vertices, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if eta is not None:
        eta = np.asarray(eta, dtype=float)
    return vertices, mu, eta


def pack_unknowns(vertices, mu, eta=None):
    parts = [vertices[:, 0], vertices[:, 1], mu]
    if eta is not None:
        parts.append(eta)
    return np.concatenate(parts)


def unpack_unknowns(z, n, has_eta):
    vertices = np.stack([z[:n], z[n:2 * n]], axis=1)
    mu = z[2 * n:3 * n]
    eta = z[3 * n:4 * n] if has_eta else None
    return vertices, mu, eta


def half_step_normal(old_curve, new_vertices):
    """n_j^{m+1/2} = -(h_j^m + h_j^{m+1})^perp / (2|h_j^m|); not unit in general"""
    new_vertices = np.asarray(new_vertices, dtype=float)
    if new_vertices.shape != old_curve.vertices.shape:
        raise SizeMismatch(
            f"New vertices {new_vertices.shape} do not match the old curve {old_curve.vertices.shape}"
        )
    geom = edge_geometry(old_curve)
    new_edges = new_vertices - np.roll(new_vertices, 1, axis=0)
    return (geom.edges + new_edges) @ ROT.T / (2.0 * geom.lengths[:, None])


def _half_step_loads(ops, vertices):
    """b_i = (|h_i|/2) n_i^{m+1/2} + (|h_{i+1}|/2) n_{i+1}^{m+1/2}"""
    new_edges = vertices - np.roll(vertices, 1, axis=0)
    rotated = (ops.old_edges + new_edges) @ ROT.T
    return 0.25 * (rotated + np.roll(rotated, -1, axis=0))


def _flow_term(ops, flow, mu, eta):
    if flow.law is FlowLaw.CURVATURE:
        return ops.weights * mu
    if flow.law is FlowLaw.AREA_CONSERVED:
        lam = float(ops.weights @ mu) / ops.total_length
        return ops.weights * (mu - lam)
    if flow.law is FlowLaw.SURFACE_DIFFUSION:
        return ops.stiffness @ mu
    return ops.stiffness @ eta


def _residual(ops, flow, tau, vertices, mu, eta):
    loads = _half_step_loads(ops, vertices)
    delta = vertices - ops.old_vertices
    velocity = np.sum(loads * delta, axis=1) / tau + _flow_term(ops, flow, mu, eta)

    new_edges = vertices - np.roll(vertices, 1, axis=0)
    flux = np.einsum("jab,jb->ja", ops.matrices, new_edges) / ops.lengths[:, None]
    curvature = mu[:, None] * loads - flux + np.roll(flux, -1, axis=0)

    blocks = [velocity, curvature[:, 0], curvature[:, 1]]
    if flow.has_eta:
        helmholtz = (
            ops.stiffness @ eta / flow.xi + ops.weights * eta / flow.nu - ops.weights * mu
        )
        blocks.append(helmholtz)
    return np.concatenate(blocks)


def _jacobian(ops, flow, tau, vertices, mu, eta):
    n = ops.n
    idx = np.arange(n)
    prev = (idx - 1) % n
    nxt = (idx + 1) % n
    size = (4 if flow.has_eta else 3) * n
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(np.broadcast_to(r, np.shape(v)).ravel())
        cols.append(np.broadcast_to(c, np.shape(v)).ravel())
        vals.append(np.ravel(v))

    loads = _half_step_loads(ops, vertices)
    delta = vertices - ops.old_vertices
    rot_t_delta = delta @ ROT  # R^T delta as row vectors

    # velocity rows against X
    for d in range(2):
        add(idx, d * n + idx, loads[:, d] / tau)
        add(idx, d * n + nxt, rot_t_delta[:, d] / (4.0 * tau))
        add(idx, d * n + prev, -rot_t_delta[:, d] / (4.0 * tau))

    # velocity rows against mu or eta
    if flow.law is FlowLaw.CURVATURE:
        add(idx, 2 * n + idx, ops.weights)
    elif flow.law is FlowLaw.AREA_CONSERVED:
        add(idx, 2 * n + idx, ops.weights)
        outer = -np.outer(ops.weights, ops.weights) / ops.total_length
        add(np.repeat(idx, n), 2 * n + np.tile(idx, n), outer.ravel())
    else:
        coo = ops.stiffness.tocoo()
        offset = 2 * n if flow.law is FlowLaw.SURFACE_DIFFUSION else 3 * n
        add(coo.row, offset + coo.col, coo.data)

    # curvature rows
    scaled = ops.matrices / ops.lengths[:, None, None]
    scaled_next = np.roll(scaled, -1, axis=0)
    mu_rot = 0.25 * mu[:, None, None] * ROT
    neighbours = (
        (prev, -mu_rot + scaled),
        (idx, -scaled - scaled_next),
        (nxt, mu_rot + scaled_next),
    )
    for c in range(2):
        row = (1 + c) * n + idx
        add(row, 2 * n + idx, loads[:, c])
        for nodes, block in neighbours:
            for d in range(2):
                add(row, d * n + nodes, block[:, c, d])

    if flow.has_eta:
        coo = ops.stiffness.tocoo()
        add(3 * n + coo.row, 3 * n + coo.col, coo.data / flow.xi)
        add(3 * n + idx, 3 * n + idx, ops.weights / flow.nu)
        add(3 * n + idx, 2 * n + idx, -ops.weights)

    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    )


def assemble_residual(state, trial, flow, density, params, tau):
    """Residual of one step at trial = (X^{m+1}, mu^{m+1}[, eta^{m+1}])"""
    ops = StepOperators(state.curve, density, params)
    vertices, mu, eta = _check_trial(ops, trial, flow)
    return _residual(ops, flow, tau, vertices, mu, eta)


def assemble_jacobian(state, trial, flow, density, params, tau):
    """Exact sparse Jacobian of assemble_residual with respect to the packed unknowns"""
    ops = StepOperators(state.curve, density, params)
    vertices, mu, eta = _check_trial(ops, trial, flow)
    return _jacobian(ops, flow, tau, vertices, mu, eta)


def lagrange_multiplier(curve, mu_new):
    """lambda = (mu, 1)^h / |curve|"""
    mu_new = np.asarray(mu_new, dtype=float)
    if mu_new.shape != (curve.n,):
        raise SizeMismatch(f"mu has shape {mu_new.shape} for a curve with {curve.n} vertices")
    length = curve.length()
    if length == 0.0:
        raise DegenerateEdge(0, 0.0)
    return float(nodal_weights(curve) @ mu_new) / length


def _factorize(matrix):
    try:
        return splu(matrix.tocsc())
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc


def linear_solve(matrix, rhs, method="splu"):
    """Solve a sparse Newton system with SuperLU factorization or spsolve"""
    if method == "splu":
        return _factorize(matrix).solve(rhs)
    if method != "spsolve":
        raise ValueError(f"unknown linear solver {method!r}")
    with warnings.catch_warnings():
        warnings.simplefilter("error", MatrixRankWarning)
        try:
            solution = spsolve(matrix.tocsc(), rhs)
        except (MatrixRankWarning, RuntimeError) as exc:
            raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(solution)):
        raise SingularSystem("spsolve returned non-finite entries")
    return solution


def helmholtz_solve(curve, f, xi, nu):
    """eta with (1/xi)(d_s eta, d_s psi)^h + (1/nu)(eta, psi)^h = (f, psi)^h"""
    if xi <= 0 or nu <= 0:
        raise ValueError(f"Helmholtz solve needs xi > 0 and nu > 0, got xi={xi}, nu={nu}")
    f = np.asarray(f, dtype=float)
    if f.shape != (curve.n,):
        raise SizeMismatch(f"f has shape {f.shape} for a curve with {curve.n} vertices")
    lengths = edge_geometry(curve).lengths
    weights = nodal_weights(curve)
    system = stiffness_matrix(lengths) / xi + sp.diags(weights / nu)
    eta = _factorize(system).solve(weights * f)
    if not np.all(np.isfinite(eta)):
        raise SingularSystem("Helmholtz solve produced non-finite values")
    return eta


def initial_state(curve, density, params, flow=None, t=0.0):
    """mu^0 from the curvature rows on the initial curve, node-wise least squares"""
    geom = edge_geometry(curve)
    matrices = energy_matrix(density, geom.angles, params)
    flux = np.einsum("jab,jb->ja", matrices, geom.tangents)
    rhs = flux - np.roll(flux, -1, axis=0)
    weighted_normals = 0.5 * geom.lengths[:, None] * geom.normals
    loads = weighted_normals + np.roll(weighted_normals, -1, axis=0)
    mu = np.sum(loads * rhs, axis=1) / np.sum(loads * loads, axis=1)
    eta = None
    if flow is not None and flow.has_eta:
        eta = helmholtz_solve(curve, mu, flow.xi, flow.nu)
    return FlowState(curve, mu, t=t, step=0, eta=eta)


def solve_time_step(state, flow, density, params, tau, opts=None):
    """Advance one step by Newton's method on the quadratic residual.

    Returns:
        (FlowState at t + tau, StepReport)

    Raises:
        NewtonDiverged: tolerance not reached within max_newton_iters
        SingularSystem: a Newton linear system could not be factorized
        DegenerateCurve: some new edge collapsed relative to the mean length
    """
    opts = opts or SolverOptions()
    if tau <= 0:
        raise ValueError(f"Time step must be positive, got {tau}")
    ops = StepOperators(state.curve, density, params)
    n = ops.n
    step = state.step + 1

    eta0 = None
    if flow.has_eta:
        eta0 = state.eta if state.eta is not None else helmholtz_solve(
            state.curve, state.mu, flow.xi, flow.nu
        )
    z = pack_unknowns(state.curve.vertices, state.mu, eta0)

    iterations = 0
    while True:
        vertices, mu, eta = unpack_unknowns(z, n, flow.has_eta)
        residual = _residual(ops, flow, tau, vertices, mu, eta)
        norm = float(np.max(np.abs(residual)))
        logger.debug("step %d newton %d residual %.3e", step, iterations, norm)
        if not np.isfinite(norm):
            raise NewtonDiverged(step, iterations, norm)
        if norm <= opts.newton_tol:
            break
        if iterations >= opts.max_newton_iters:
            raise NewtonDiverged(step, iterations, norm)
        jacobian = _jacobian(ops, flow, tau, vertices, mu, eta)
        z = z - linear_solve(jacobian, residual, opts.linear_solver)
        iterations += 1

    if iterations > SLOW_NEWTON:
        logger.warning("Step %d needed %d Newton iterations", step, iterations)

    new_curve = PolygonalCurve(vertices)
    lengths = new_curve.edge_lengths()
    mean_length = float(np.mean(lengths))
    shortest = int(np.argmin(lengths))
    if lengths[shortest] < DEGENERATE_RATIO * mean_length:
        raise DegenerateCurve(step, shortest, float(lengths[shortest]), mean_length)

    old_area = enclosed_area(state.curve)
    new_area = enclosed_area(new_curve)
    identity = (new_area - old_area) / tau
    if flow.law is FlowLaw.CURVATURE:
        identity += float(ops.weights @ mu)
    old_energy = interface_energy(state.curve, density)
    new_energy = interface_energy(new_curve, density)

    report = StepReport(
        newton_iterations=iterations,
        final_residual_norm=norm,
        area_decay_residual=identity,
        energy_delta=new_energy - old_energy,
        area=new_area,
        energy=new_energy,
    )
    new_state = FlowState(new_curve, mu, t=state.t + tau, step=step, eta=eta)
    return new_state, report


class EvolutionResult:
    """Everything a run produced, including partial output when it stopped early.

    `stop_reason` is one of completed, pinch_off, newton_diverged, singular
    or degenerate; `error` holds the exception for the failure reasons.
    """

    def __init__(self, initial, final, diagnostics, reports, snapshots, samples,
                 stop_reason, error=None, history=None):
        self.initial = initial
        self.final = final
        self.diagnostics = diagnostics
        self.reports = reports
        self.snapshots = snapshots
        self.samples = samples
        self.stop_reason = stop_reason
        self.error = error
        self.history = history

    @property
    def completed(self):
        return self.stop_reason == "completed"

    @property
    def mean_newton_iterations(self):
        if not self.reports:
            return 0.0
        return float(np.mean([r.newton_iterations for r in self.reports]))

    def __repr__(self):
        return (
            f"EvolutionResult(steps={len(self.reports)}, t={self.final.t:.6g}, "
            f"stop_reason={self.stop_reason!r})"
        )


def _diagnostic_row(state, report, density, area0, energy0):
    area = enclosed_area(state.curve) if report is None else report.area
    energy = interface_energy(state.curve, density) if report is None else report.energy
    return {
        "step": state.step,
        "t": state.t,
        "area": area,
        "energy": energy,
        "mesh_ratio": weighted_mesh_ratio(state.curve, density),
        "newton_iters": 0 if report is None else report.newton_iterations,
        "area_residual": 0.0 if report is None else report.area_decay_residual,
        "energy_delta": 0.0 if report is None else report.energy_delta,
        "area_loss": (area - area0) / area0 if area0 else area - area0,
        "energy_ratio": energy / energy0,
    }


def run_evolution(initial, flow, density, params, tau, T, opts=None, snapshot_every=None,
                  snapshot_times=(), sample_times=(), stop_on_pinch_off=None,
                  allow_self_intersecting=False, keep_history=False, progress=True,
                  on_step=None):
    """Repeat solve_time_step from `initial` until t >= T or a stop condition fires.

    Args:
        initial: PolygonalCurve or a prepared FlowState
        snapshot_every: keep the state every k steps (plus the first and last)
        snapshot_times: keep the first state with t_m >= each time
        sample_times: curves at exact times, interpolated between the
            bracketing steps
        stop_on_pinch_off: stop at the first self-intersection; defaults to
            True for surface diffusion only
        allow_self_intersecting: accept a self-intersecting initial curve;
            pinch-off detection is then off
        on_step: optional callable(state, report) after every accepted step

    Returns:
        EvolutionResult; failures of individual steps end the run with a
        stop_reason instead of raising
    """
    if tau <= 0 or T <= 0:
        raise ValueError(f"tau and T must be positive, got tau={tau}, T={T}")
    opts = opts or SolverOptions()

    if isinstance(initial, FlowState):
        state = initial
    else:
        state = initial_state(initial, density, params, flow)

    crossing, pair = self_intersection_check(state.curve)
    if crossing and not allow_self_intersecting:
        raise SelfIntersecting(pair)
    if stop_on_pinch_off is None:
        stop_on_pinch_off = flow.law is FlowLaw.SURFACE_DIFFUSION
    check_pinch = stop_on_pinch_off and not allow_self_intersecting
    first = state

    n_steps = int(np.ceil(T / tau - 1e-9))
    area0 = enclosed_area(state.curve)
    energy0 = interface_energy(state.curve, density)
    rows = [_diagnostic_row(state, None, density, area0, energy0)]
    reports = []
    snapshots = {state.step: state.curve}
    pending_snapshots = sorted(float(t) for t in snapshot_times)
    pending_samples = sorted(float(t) for t in sample_times)
    samples = {}
    history = [state] if keep_history else None
    stop_reason = "completed"
    error = None

    def take_samples(old, new):
        while pending_samples and pending_samples[0] <= new.t:
            t = pending_samples.pop(0)
            lam = min(1.0, max(0.0, (t - old.t) / (new.t - old.t)))
            samples[t] = interpolate_curves(old.curve, new.curve, lam)

    while pending_samples and pending_samples[0] <= state.t:
        samples[pending_samples.pop(0)] = state.curve
    while pending_snapshots and pending_snapshots[0] <= state.t:
        pending_snapshots.pop(0)

    logger.info(
        "Evolving %s, N=%d, tau=%.3e, T=%g (%d steps)",
        flow.law.value, state.curve.n, tau, T, n_steps,
    )
    with tqdm(total=n_steps, desc=flow.law.value, disable=not progress, leave=False) as bar:
        for _ in range(n_steps):
            try:
                new_state, report = solve_time_step(state, flow, density, params, tau, opts)
            except NewtonDiverged as exc:
                stop_reason, error = "newton_diverged", exc
            except SingularSystem as exc:
                stop_reason, error = "singular", exc
            except (DegenerateCurve, DegenerateEdge) as exc:
                stop_reason, error = "degenerate", exc
            if error is not None:
                logger.error("Stopped at t=%.6g: %s", state.t, error)
                break

            take_samples(state, new_state)
            state = new_state
            reports.append(report)
            rows.append(_diagnostic_row(state, report, density, area0, energy0))
            if keep_history:
                history.append(state)
            if snapshot_every and state.step % snapshot_every == 0:
                snapshots[state.step] = state.curve
            while pending_snapshots and pending_snapshots[0] <= state.t + 1e-12 * tau:
                pending_snapshots.pop(0)
                snapshots[state.step] = state.curve
            if on_step is not None:
                on_step(state, report)
            bar.update(1)

            if check_pinch:
                crossing, pair = self_intersection_check(state.curve)
                if crossing:
                    stop_reason = "pinch_off"
                    logger.info("Pinch-off at t=%.6g, edges %s", state.t, pair)
                    break

    snapshots[state.step] = state.curve
    diagnostics = pd.DataFrame(rows, columns=DIAGNOSTIC_COLUMNS)
    logger.info(
        "Finished at t=%.6g after %d steps (%s), mean Newton iterations %.2f",
        state.t,
        len(reports),
        stop_reason,
        np.mean([r.newton_iterations for r in reports]) if reports else 0.0,
    )
    return EvolutionResult(
        initial=first,
        final=state,
        diagnostics=diagnostics,
        reports=reports,
        snapshots=snapshots,
        samples=samples,
        stop_reason=stop_reason,
        error=error,
        history=history,
    )
