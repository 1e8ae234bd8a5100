"""Flat key=value experiment configuration with dotted keys.

Unknown keys are rejected by name; values are parsed by the declared type.
`#` starts a comment; blank lines are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "problem": ("divacancy", str),
    "S": (None, float),
    "gamma_I": (None, float),
    "gamma_II": (None, float),
    "eam.a": (4.4, float),
    "eam.b": (3.0, float),
    "eam.C": (5.0, float),
    "grac.method": ("l1", str),
    "grac.stabilize": (1, int),
    "grac.kappa": (1.0, float),
    "grac.variant": ("reflect", str),
    "adapt.N_max": (20000, int),
    "adapt.rho_tol": (1e-3, float),
    "adapt.tau1": (0.5, float),
    "adapt.tau2": (math.inf, float),
    "adapt.tau3": (0.7, float),
    "adapt.R_max": (128, int),
    "adapt.K": (3, int),
    "adapt.theta": (0.5, float),
    "adapt.max_steps": (100, int),
    "mesh.R0": (32, int),
    "mesh.Ra0": (0, int),  # 0: problem default (defect core + interface)
    "mesh.grading": (0.5, float),
    "solve.tol": (1e-8, float),
    "solve.maxiter": (20000, int),
    "reference.R_ref": (0, int),  # 0: 4 x R0
    "out.dir": ("out", str),
    "out.snapshots": (0, int),
    "seed": (0, int),
}

_PROBLEM_DEFAULTS = {
    "divacancy": {"S": 0.03, "gamma_I": 0.0, "gamma_II": 0.03, "defects": 2, "Ra0": 5},
    "microcrack": {"S": 0.0, "gamma_I": 0.03, "gamma_II": 0.03, "defects": 11, "Ra0": 9},
    # defect-free configuration, mainly for reference-pipeline checks
    "homogeneous": {"S": 0.03, "gamma_I": 0.0, "gamma_II": 0.03, "defects": 0, "Ra0": 4},
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        if key in self.values:
            return self.values[key]
        default, _ = _SCHEMA[key]
        if default is None:
            prob = self.values.get("problem", _SCHEMA["problem"][0])
            return _PROBLEM_DEFAULTS[prob][key]
        return default

    @property
    def problem(self):
        p = self["problem"]
        if p not in _PROBLEM_DEFAULTS:
            raise ConfigError(f"unknown problem: {p}")
        return p

    @property
    def defect_count(self):
        return _PROBLEM_DEFAULTS[self.problem]["defects"]

    @property
    def R_a0(self):
        v = self["mesh.Ra0"]
        return v if v > 0 else _PROBLEM_DEFAULTS[self.problem]["Ra0"]

    @property
    def R_ref(self):
        v = self["reference.R_ref"]
        return v if v > 0 else 4 * self["mesh.R0"]

    def hash_key(self, keys):
        import hashlib

        parts = [f"{k}={self[k]!r}" for k in sorted(keys)]
        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


def parse_config(text) -> ExperimentConfig:
    values = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"line {ln}: unknown config key: {key}")
        _, typ = _SCHEMA[key]
        try:
            values[key] = typ(val)
        except ValueError as e:
            raise ConfigError(f"line {ln}: bad value for {key}: {val!r} ({e})")
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
