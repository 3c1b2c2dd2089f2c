"""Run and study configuration documents (JSON).

Missing keys take the defaults below. Validation errors point at the key
path and, when the document text is known, the line the key sits on.
"""

import copy
import json
import logging
import os
import re

from core.anisotropy import StabilizerTable
from core.errors import ConfigError, StabilizerTableError
from core.solver import LINEAR_SOLVERS, FlowLaw

logger = logging.getLogger(__name__)

STABILIZER_MODES = ("minimal", "constant", "file")

RUN_DEFAULTS = {
    "flow": {"law": "curvature", "xi": None, "nu": None},
    "density": "iso",
    "alpha": 0.0,
    "stabilizer": {"mode": "minimal", "value": None, "path": None},
    "curve": {"shape": "ellipse", "params": {}, "n": 64, "file": None},
    "tau": None,
    "T": 0.1,
    "snapshots": {"every": None, "times": []},
    "output_dir": "output",
    "stop_on_pinch_off": None,
    "allow_self_intersecting": False,
    "newton": {"tol": 1e-11, "max_iters": 50, "linear_solver": "splu"},
    "seed": 0,
}

STUDY_DEFAULTS = {
    "flow": {"law": "curvature", "xi": None, "nu": None},
    "density": "iso",
    "alphas": [0.0],
    "curve": {"shape": "ellipse", "params": {}},
    "base_n": 16,
    "levels": 3,
    "times": [0.1],
    "reference": {"n": 128, "exact_circle": None},
    "output_dir": "study",
    "workers": 1,
    "newton": {"tol": 1e-11, "max_iters": 50, "linear_solver": "splu"},
}


class _Document:
    """Raw JSON text plus a key-path to line lookup"""

    def __init__(self, text=None, source=None):
        self.text = text
        self.source = source

    def line_of(self, path):
        if not self.text:
            return None
        pos = 0
        line = None
        for part in path.split("."):
            match = re.compile(r'"%s"\s*:' % re.escape(part)).search(self.text, pos)
            if match is None:
                return line
            pos = match.start()
            line = self.text.count("\n", 0, pos) + 1
        return line

    def error(self, message, key=None):
        return ConfigError(message, key=key, line=self.line_of(key) if key else None,
                           source=self.source)


def _merge(defaults, data, doc, prefix=""):
    """Recursively fill defaults; unknown keys are errors"""
    if not isinstance(data, dict):
        raise doc.error("expected an object", key=prefix or None)
    merged = copy.deepcopy(defaults)
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in defaults:
            raise doc.error("unknown key", key=path)
        if isinstance(defaults[key], dict) and defaults[key] and key not in ("params",):
            merged[key] = _merge(defaults[key], value, doc, path)
        else:
            merged[key] = value
    return merged


def _number(doc, data, path, positive=False, optional=False, integer=False):
    value = data
    for part in path.split("."):
        value = value[part]
    if value is None and optional:
        return None
    kind = int if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kind):
        raise doc.error(f"expected {'an integer' if integer else 'a number'}, got {value!r}", key=path)
    if positive and value <= 0:
        raise doc.error(f"must be positive, got {value!r}", key=path)
    return value


def _flow(doc, data):
    flow = data["flow"]
    try:
        law = FlowLaw(flow["law"])
    except ValueError:
        choices = ", ".join(law.value for law in FlowLaw)
        raise doc.error(f"unknown flow law {flow['law']!r} (expected one of {choices})",
                        key="flow.law") from None
    if law is FlowLaw.INTERMEDIATE:
        _number(doc, data, "flow.xi", positive=True)
        _number(doc, data, "flow.nu", positive=True)


def _newton(doc, data):
    _number(doc, data, "newton.tol", positive=True)
    _number(doc, data, "newton.max_iters", positive=True, integer=True)
    if data["newton"]["linear_solver"] not in LINEAR_SOLVERS:
        raise doc.error(
            f"unknown linear solver {data['newton']['linear_solver']!r} "
            f"(expected one of {', '.join(LINEAR_SOLVERS)})",
            key="newton.linear_solver",
        )


class RunConfig:
    """Resolved settings of one evolution run.

    `seed` is validated and recorded in the manifest but no part of a run
    draws random numbers; it is carried for reproducibility only.
    """

    def __init__(self, data, source=None):
        self.data = data
        self.source = source

    def __getattr__(self, name):
        data = self.__dict__.get("data")
        if data is not None and name in data:
            return data[name]
        raise AttributeError(name)

    @property
    def n(self):
        return self.data["curve"]["n"]

    @property
    def time_step(self):
        tau = self.data["tau"]
        return tau if tau is not None else 1.0 / self.n**2

    def to_dict(self):
        data = copy.deepcopy(self.data)
        data["tau"] = self.time_step
        return data

    @classmethod
    def from_dict(cls, data, text=None, source=None):
        doc = _Document(text, source)
        data = _merge(RUN_DEFAULTS, data, doc)
        _flow(doc, data)
        if not isinstance(data["density"], str):
            raise doc.error("expected a density spec string", key="density")
        _number(doc, data, "alpha")
        _number(doc, data, "tau", positive=True, optional=True)
        _number(doc, data, "T", positive=True)
        _number(doc, data, "curve.n", integer=True)
        if data["curve"]["n"] < 3:
            raise doc.error(f"needs at least 3 vertices, got {data['curve']['n']}", key="curve.n")
        _newton(doc, data)
        _number(doc, data, "seed", integer=True)
        _number(doc, data, "snapshots.every", positive=True, optional=True, integer=True)
        if not isinstance(data["snapshots"]["times"], list):
            raise doc.error("expected a list of times", key="snapshots.times")

        stabilizer = data["stabilizer"]
        if stabilizer["mode"] not in STABILIZER_MODES:
            raise doc.error(
                f"unknown mode {stabilizer['mode']!r} (expected one of {', '.join(STABILIZER_MODES)})",
                key="stabilizer.mode",
            )
        if stabilizer["mode"] == "constant":
            _number(doc, data, "stabilizer.value")
        if stabilizer["mode"] == "file":
            path = stabilizer["path"]
            if not path or not os.path.exists(path):
                raise doc.error(f"stabilizer file not found: {path!r}", key="stabilizer.path")
            try:
                StabilizerTable.from_csv(path)
            except (StabilizerTableError, ValueError) as exc:
                raise doc.error(str(exc), key="stabilizer.path") from None

        curve_file = data["curve"]["file"]
        if curve_file is not None and not os.path.exists(curve_file):
            raise doc.error(f"curve file not found: {curve_file!r}", key="curve.file")
        return cls(data, source=source)


class StudyConfig:
    def __init__(self, data, source=None):
        self.data = data
        self.source = source

    def __getattr__(self, name):
        data = self.__dict__.get("data")
        if data is not None and name in data:
            return data[name]
        raise AttributeError(name)

    def to_dict(self):
        return copy.deepcopy(self.data)

    @classmethod
    def from_dict(cls, data, text=None, source=None):
        doc = _Document(text, source)
        data = _merge(STUDY_DEFAULTS, data, doc)
        _flow(doc, data)
        if not isinstance(data["alphas"], list) or not data["alphas"]:
            raise doc.error("expected a non-empty list", key="alphas")
        if not isinstance(data["times"], list) or not data["times"]:
            raise doc.error("expected a non-empty list", key="times")
        _number(doc, data, "base_n", positive=True, integer=True)
        _number(doc, data, "levels", positive=True, integer=True)
        _number(doc, data, "workers", positive=True, integer=True)
        _newton(doc, data)
        reference = data["reference"]
        if reference.get("exact_circle") is not None:
            _number(doc, data, "reference.exact_circle", positive=True)
            reference["n"] = None
        else:
            _number(doc, data, "reference.n", positive=True, integer=True)
            finest = data["base_n"] * 2 ** (data["levels"] - 1)
            if reference["n"] <= finest:
                raise doc.error(
                    f"reference N={reference['n']} must be finer than the finest level N={finest}",
                    key="reference.n",
                )
        return cls(data, source=source)


def _read(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc}", source=path) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})",
                          line=exc.lineno, source=path) from None
    return text, data


def load_run_config(path):
    """Load a run config, or the config stored in a run manifest"""
    text, data = _read(path)
    if isinstance(data, dict) and "manifest_version" in data:
        logger.info("Re-running from manifest %s", path)
        return RunConfig.from_dict(data["config"], source=path)
    config = RunConfig.from_dict(data, text=text, source=path)
    logger.info("Loaded run configuration from %s", path)
    return config


def load_study_config(path):
    text, data = _read(path)
    config = StudyConfig.from_dict(data, text=text, source=path)
    logger.info("Loaded study configuration from %s", path)
    return config
