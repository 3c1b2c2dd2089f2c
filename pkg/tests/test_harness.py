import math

import numpy as np
import pandas as pd
import pytest

from core.errors import ShortSeriesError
from core.harness import (
    ERROR_COLUMNS,
    ConvergenceStudy,
    audit_structure,
    convergence_orders,
    decay_rate_estimate,
    run_convergence,
    run_study,
)
from core.solver import DIAGNOSTIC_COLUMNS, FlowSpec, run_evolution
from core.anisotropy import EnergyMatrixParams
from tests.helpers import regular_polygon
from utils.shapes import generate_initial


def diagnostics_frame(t, area, energy, area_residual=None):
    t = np.asarray(t, dtype=float)
    area = np.asarray(area, dtype=float)
    energy = np.asarray(energy, dtype=float)
    rows = len(t)
    return pd.DataFrame(
        {
            "step": np.arange(rows),
            "t": t,
            "area": area,
            "energy": energy,
            "mesh_ratio": np.ones(rows),
            "newton_iters": np.r_[0, np.full(rows - 1, 2)],
            "area_residual": np.zeros(rows) if area_residual is None else area_residual,
            "energy_delta": np.r_[0.0, np.diff(energy)],
            "area_loss": (area - area[0]) / area[0],
            "energy_ratio": energy / energy[0],
        },
        columns=DIAGNOSTIC_COLUMNS,
    )


def test_decay_rate_of_linear_series():
    t = np.linspace(0, 1, 11)
    assert decay_rate_estimate(diagnostics_frame(t, 3 - 2 * t, np.ones(11))) == pytest.approx(-2.0)


def test_decay_rate_uses_the_trailing_window():
    t = np.linspace(0, 1, 21)
    area = np.where(t < 0.5, 3 - 10 * t, -2 - 0.5 * (t - 0.5))
    assert decay_rate_estimate(diagnostics_frame(t, area, np.ones(21))) == pytest.approx(-0.5)


def test_decay_rate_needs_enough_rows():
    with pytest.raises(ShortSeriesError):
        decay_rate_estimate(diagnostics_frame([0, 0.1, 0.2], [1, 1, 1], [1, 1, 1]))


def test_audit_of_empty_run_passes():
    audit = audit_structure(diagnostics_frame([0.0], [1.0], [2.0]), FlowSpec("curvature"))
    assert audit.passed
    assert audit.summary["steps"] == 0


def test_audit_flags_area_drift():
    t = np.linspace(0, 0.01, 6)
    area = np.array([1.0, 1.0, 1.0, 1.0 + 1e-9, 1.0 + 1e-9, 1.0 + 1e-9])
    audit = audit_structure(diagnostics_frame(t, area, np.linspace(2, 1.9, 6)),
                            FlowSpec("area_conserved"))
    assert not audit.passed
    assert audit.summary["conservation_ok"] is False
    assert audit.summary["energy_monotone"]


def test_audit_flags_energy_increase_only_when_expected():
    t = np.linspace(0, 0.01, 5)
    frame = diagnostics_frame(t, np.ones(5), [2.0, 1.9, 1.95, 1.8, 1.7])
    assert not audit_structure(frame, FlowSpec("surface_diffusion")).passed
    relaxed = audit_structure(frame, FlowSpec("surface_diffusion"), expect_energy_decay=False)
    assert relaxed.passed
    assert not relaxed.summary["energy_monotone"]


def test_audit_flags_curvature_identity():
    t = np.linspace(0, 0.01, 5)
    residual = np.array([0.0, 1e-12, 1e-3, 0.0, 0.0])
    frame = diagnostics_frame(t, np.linspace(1, 0.9, 5), np.linspace(2, 1.8, 5), residual)
    audit = audit_structure(frame, FlowSpec("curvature"))
    assert not audit.summary["identity_ok"]
    assert audit.identity_residuals.max() == pytest.approx(1e-3)


def test_audit_of_real_run(case_one):
    params = EnergyMatrixParams.minimal(case_one, 0.0)
    result = run_evolution(generate_initial("ellipse", {}, 32), FlowSpec("area_conserved"),
                           case_one, params, 1 / 32**2, 5e-3, progress=False)
    audit = audit_structure(result, FlowSpec("area_conserved"))
    assert audit.passed
    assert audit.summary["max_normalized_area_loss"] <= 1e-12


def test_convergence_orders():
    table = pd.DataFrame(
        [
            {"alpha": 0.0, "level": 0, "n": 8, "h": 1 / 8, "tau": 1 / 64, "t": 0.1,
             "error": 4e-2, "order": math.nan, "status": "ok"},
            {"alpha": 0.0, "level": 1, "n": 16, "h": 1 / 16, "tau": 1 / 256, "t": 0.1,
             "error": 1e-2, "order": math.nan, "status": "ok"},
            {"alpha": 0.0, "level": 2, "n": 32, "h": 1 / 32, "tau": 1 / 1024, "t": 0.1,
             "error": math.nan, "order": math.nan, "status": "newton_diverged"},
        ],
        columns=ERROR_COLUMNS,
    )
    orders = convergence_orders(table)["order"].to_numpy()
    assert math.isnan(orders[0])
    assert orders[1] == pytest.approx(2.0)
    assert math.isnan(orders[2])


def test_study_validation():
    common = dict(flow={"law": "curvature"}, density="iso", alphas=[0.0],
                  curve={"shape": "circle"}, base_n=8, levels=2, times=[0.05])
    with pytest.raises(ValueError):
        ConvergenceStudy(**common)
    with pytest.raises(ValueError):
        ConvergenceStudy(**common, reference_n=16)
    with pytest.raises(ValueError):
        ConvergenceStudy(**common, reference_n=64, exact_circle=1.0)
    study = ConvergenceStudy(**common, reference_n=64)
    assert study.level_n(1) == 16
    assert study.level_tau(1) == pytest.approx(1 / 256)
    assert study.final_time == 0.05


def test_exact_circle_study():
    study = ConvergenceStudy(flow={"law": "curvature"}, density="iso", alphas=[0.0],
                             curve={"shape": "circle"}, base_n=8, levels=2, times=[0.05],
                             exact_circle=1.0)
    errors = run_convergence(study, progress=False)
    assert list(errors.columns) == ERROR_COLUMNS
    assert list(errors["status"]) == ["ok", "ok"]
    assert errors["error"].iloc[0] > errors["error"].iloc[1] > 0
    assert errors["order"].iloc[1] > 1.0


def test_reference_study_reports_audits_and_rates():
    study = ConvergenceStudy(flow={"law": "curvature"}, density="iso", alphas=[0.0, -1.0],
                             curve={"shape": "circle"}, base_n=8, levels=1, times=[0.02, 0.05],
                             reference_n=32)
    result = run_study(study, progress=False)
    assert len(result.errors) == 4
    assert (result.errors["status"] == "ok").all()
    assert set(result.audits["role"]) == {"reference", "level"}
    assert result.audits["passed"].all()
    rates = result.decay_rates()
    # isotropic curvature flow loses area at 2 pi
    assert np.allclose(rates["decay_rate"], -2 * np.pi, rtol=0.1)


def test_regular_polygon_is_stationary_under_area_conserved_flow(isotropic, isotropic_params):
    # the regular N-gon is the discrete Wulff shape of the isotropic energy
    n = 32
    result = run_evolution(regular_polygon(n, radius=1.5), FlowSpec("area_conserved"), isotropic,
                           isotropic_params, 1 / n**2, 0.05, progress=False)
    assert result.completed
    assert abs(decay_rate_estimate(result)) <= 1e-10
    assert np.allclose(result.final.curve.vertices, regular_polygon(n, radius=1.5).vertices,
                       atol=1e-12)
