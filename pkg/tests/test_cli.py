import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cli import commands
from cli.config import RunConfig, StudyConfig, load_run_config, load_study_config
from core.curve import enclosed_area
from core.errors import ConfigError
from main import main
from utils.curve_io import read_curve

DATA = Path(__file__).resolve().parent.parent / "data"

SMALL_RUN = {
    "flow": {"law": "curvature"},
    "density": "mfold:m=3,beta=1/7",
    "alpha": 0.0,
    "curve": {"shape": "ellipse", "n": 24},
    "T": 0.01,
    "snapshots": {"every": 4},
}


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=4))
    return str(path)


def test_run_defaults():
    config = RunConfig.from_dict({"curve": {"n": 32}})
    assert config.flow["law"] == "curvature"
    assert config.density == "iso"
    assert config.stabilizer["mode"] == "minimal"
    assert config.time_step == pytest.approx(1 / 32**2)
    assert config.to_dict()["tau"] == pytest.approx(1 / 32**2)


def test_unknown_key_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n    "density": "iso",\n    "alhpa": 0.5\n}\n')
    with pytest.raises(ConfigError) as info:
        load_run_config(str(path))
    assert info.value.key == "alhpa"
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_nested_key_reports_its_own_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(
        '{\n    "flow": {\n        "law": "curvature"\n    },\n'
        '    "curve": {\n        "shape": "circle",\n        "n": 2\n    }\n}\n'
    )
    with pytest.raises(ConfigError) as info:
        load_run_config(str(path))
    assert info.value.key == "curve.n"
    assert info.value.line == 7


def test_unknown_flow_law():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"flow": {"law": "willmore"}})
    assert info.value.key == "flow.law"
    assert "surface_diffusion" in str(info.value)


def test_intermediate_flow_needs_parameters():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"flow": {"law": "intermediate", "xi": 1.0}})
    assert info.value.key == "flow.nu"


def test_type_and_range_checks():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"T": "long"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"tau": -1e-3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"newton": {"max_iters": 2.5}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"stabilizer": {"mode": "magic"}})
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"stabilizer": {"mode": "file", "path": "missing.csv"}})
    assert info.value.key == "stabilizer.path"
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"newton": {"linear_solver": "cholesky"}})
    assert info.value.key == "newton.linear_solver"


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n    "density": "iso",\n    "alpha": \n}\n')
    with pytest.raises(ConfigError) as info:
        load_run_config(str(path))
    assert info.value.line == 4


def test_missing_file():
    with pytest.raises(ConfigError):
        load_run_config("no/such/config.json")


def test_study_config(tmp_path):
    config = load_study_config(write_config(tmp_path, {
        "density": "iso", "base_n": 8, "levels": 2, "reference": {"exact_circle": 1.0},
    }))
    assert config.reference["n"] is None
    assert config.workers == 1
    with pytest.raises(ConfigError) as info:
        StudyConfig.from_dict({"base_n": 16, "levels": 3, "reference": {"n": 64}})
    assert info.value.key == "reference.n"
    with pytest.raises(ConfigError):
        StudyConfig.from_dict({"alphas": []})


def test_example_configs_load():
    for name in ("case1_ellipse_run", "l4_area_conserved_run", "slit_pinch_off_run"):
        load_run_config(str(DATA / f"{name}.json"))
    for name in ("case1_convergence_study", "circle_convergence_study"):
        load_study_config(str(DATA / f"{name}.json"))


def test_run_writes_outputs(tmp_path):
    config = RunConfig.from_dict(dict(SMALL_RUN, output_dir=str(tmp_path / "out")))
    code, files = commands.run_from_config(config, progress=False)
    assert code == commands.EXIT_OK
    diagnostics = pd.read_csv(files["diagnostics"])
    assert len(diagnostics) == 7
    assert {"area", "energy", "area_residual"} <= set(diagnostics.columns)
    assert (tmp_path / "out" / "snap_0.csv").exists()
    assert (tmp_path / "out" / "snap_4.csv").exists()
    assert (tmp_path / "out" / "kmin.csv").exists()
    audit = json.loads((tmp_path / "out" / "audit.json").read_text())
    assert audit["passed"]
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["stop_reason"] == "completed"
    assert manifest["config"]["tau"] == pytest.approx(1 / 24**2)
    assert manifest["config"]["seed"] == 0
    assert "numpy" in manifest["versions"]


def test_manifest_reproduces_run(tmp_path):
    first = RunConfig.from_dict(dict(SMALL_RUN, output_dir=str(tmp_path / "first")))
    _, files = commands.run_from_config(first, progress=False)
    again = load_run_config(files["manifest"])
    again.data["output_dir"] = str(tmp_path / "second")
    _, again_files = commands.run_from_config(again, progress=False)
    with open(files["diagnostics"]) as a, open(again_files["diagnostics"]) as b:
        assert a.read() == b.read()


def test_main_run_and_exit_codes(tmp_path):
    path = write_config(tmp_path, SMALL_RUN)
    out = tmp_path / "cli_out"
    assert main(["-q", "--no-progress", "run", path, "--output-dir", str(out)]) == 0
    assert (out / "manifest.json").exists()

    bad = write_config(tmp_path, {"alhpa": 1.0}, name="bad.json")
    assert main(["-q", "run", bad]) == commands.EXIT_CONFIG

    stuck = write_config(tmp_path, dict(SMALL_RUN, newton={"tol": 1e-30, "max_iters": 1},
                                        output_dir=str(tmp_path / "stuck")), name="stuck.json")
    assert main(["-q", "--no-progress", "run", stuck]) == commands.EXIT_NEWTON


def test_crossing_initial_curve_is_refused(tmp_path):
    crossing = write_config(tmp_path, {
        "flow": {"law": "surface_diffusion"},
        "curve": {"shape": "lemniscate", "n": 32},
        "T": 1e-3,
        "output_dir": str(tmp_path / "lemniscate"),
    })
    assert main(["-q", "--no-progress", "run", crossing]) == commands.EXIT_CONFIG


def test_kmin_command(capsys):
    assert main(["-q", "kmin", "iso", "--alpha", "0.5"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "theta,value"
    assert len(lines) == 22
    assert all(float(line.split(",")[1]) == pytest.approx(0.5) for line in lines[1:])


def test_kmin_command_without_stabilizer():
    assert main(["-q", "kmin", "mfold:m=3,beta=3/5", "--alpha", "0"]) == commands.EXIT_CONFIG


def test_generate_and_distance(tmp_path, capsys):
    small, large = str(tmp_path / "small.csv"), str(tmp_path / "large.csv")
    assert main(["-q", "generate", "circle", "--n", "64", "--output", small]) == 0
    assert main(["-q", "generate", "circle", "--n", "64", "--params", '{"r": 2.0}',
                 "--output", large]) == 0
    assert read_curve(small).n == 64
    capsys.readouterr()
    assert main(["-q", "distance", small, large]) == 0
    value = float(capsys.readouterr().out)
    expected = enclosed_area(read_curve(large)) - enclosed_area(read_curve(small))
    assert value == pytest.approx(expected)


def test_generate_rejects_bad_input(tmp_path):
    out = str(tmp_path / "x.csv")
    assert main(["-q", "generate", "circle", "--params", "{oops", "--output", out]) == 1
    assert main(["-q", "generate", "hexagon", "--output", out]) == 1


def test_linear_solver_choice_reaches_the_run(tmp_path):
    config = RunConfig.from_dict(dict(SMALL_RUN, newton={"linear_solver": "spsolve"},
                                      output_dir=str(tmp_path / "direct")))
    code, files = commands.run_from_config(config, progress=False)
    assert code == commands.EXIT_OK
    manifest = json.loads(Path(files["manifest"]).read_text())
    assert manifest["config"]["newton"] == {"tol": 1e-11, "max_iters": 50,
                                            "linear_solver": "spsolve"}
    baseline = RunConfig.from_dict(dict(SMALL_RUN, output_dir=str(tmp_path / "lu")))
    _, lu_files = commands.run_from_config(baseline, progress=False)
    direct = pd.read_csv(files["diagnostics"])
    lu = pd.read_csv(lu_files["diagnostics"])
    assert np.all(np.abs(direct["newton_iters"] - lu["newton_iters"]) <= 1)
    assert np.allclose(direct["area"], lu["area"], rtol=0, atol=1e-12)
