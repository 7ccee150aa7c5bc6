"""
Experiment configuration.

Configs are YAML files with nested sections, validated by pydantic models.
A file only needs to name what it changes: it is merged over the built-in
defaults of its scenario, which already hold the desk-scale experiment
(cage dimensions, alpha = 0.1, the loss coefficients).
"""

from __future__ import annotations

import copy
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from tool_morph.errors import ConfigError

ScenarioName = Literal["Winding", "Flipping", "Pushing", "Reaching"]
AlgorithmName = Literal["Ours", "Baseline-DiffHand", "Simple-Continual"]

SCENARIOS: Tuple[str, ...] = ("Winding", "Flipping", "Pushing", "Reaching")
ALGORITHMS: Tuple[str, ...] = ("Ours", "Baseline-DiffHand", "Simple-Continual")

ENV_OUT_DIR = "TOOL_MORPH_OUT_DIR"
ENV_JOBS = "TOOL_MORPH_JOBS"
ENV_LOG_LEVEL = "TOOL_MORPH_LOG_LEVEL"


# -----------------------------
# Schemas
# -----------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorldSettings(_Strict):
    gravity: Tuple[float, float] = (0.0, -9.81)
    dt: float = Field(1e-3, gt=0.0)
    contact_stiffness: float = Field(1e4, gt=0.0)
    contact_damping: float = Field(1.0, ge=0.0)
    friction_coefficient: float = Field(0.5, ge=0.0)
    tangential_smoothing: float = Field(1e-3, gt=0.0)
    contact_sharpness: float = Field(200.0, gt=0.0)
    joint_stiffness: float = Field(1e4, gt=0.0)
    joint_damping: float = Field(5.0, ge=0.0)
    blowup_limit: float = Field(1e9, gt=0.0)


class PolicySettings(_Strict):
    """Scripted policy. ``segments`` rows are [end_fraction, u_0, u_1, ...]."""

    kind: Literal["CircularWinding", "ZigZagPushing", "OpenLoopFlipping", "ReachingActions"]
    speed: float = Field(1.0, gt=0.0)
    waypoints: List[Tuple[float, float]] = Field(default_factory=list)
    segments: List[List[float]] = Field(default_factory=list)

    @field_validator("segments")
    @classmethod
    def validate_segments(cls, v: List[List[float]]) -> List[List[float]]:
        last = 0.0
        for row in v:
            if len(row) < 2:
                raise ValueError("segment rows need an end fraction and at least one action")
            if not (last < row[0] <= 1.0):
                raise ValueError("segment end fractions must increase within (0, 1]")
            if any(abs(u) > 1.0 for u in row[1:]):
                raise ValueError("policy actions must lie in [-1, 1]")
            last = row[0]
        return v


class ScenarioSettings(_Strict):
    name: ScenarioName
    n_tasks: int = Field(..., ge=1, description="N, training variations per run")
    batch_size: int = Field(5, ge=1, description="M")
    d_prime: int = Field(2, ge=1)
    horizon: int = Field(200, ge=1)
    theta0: List[float]
    lower_bounds: List[float]
    upper_bounds: List[float]
    cage: List[Tuple[float, float]]
    # sparse affine jacobian: [param index, cage vertex, "x" | "y", coefficient]
    jacobian: List[Tuple[int, int, Literal["x", "y"], float]]
    boundary: List[Tuple[float, float]]
    boundary_per_edge: Union[int, List[int]] = 6
    markers: List[int] = Field(default_factory=list)
    loss: Dict[str, float] = Field(default_factory=dict)
    success: Dict[str, float] = Field(default_factory=dict)
    region: Dict[str, float] = Field(default_factory=dict)
    scene: Dict[str, float] = Field(default_factory=dict)
    policy: PolicySettings
    world: WorldSettings = Field(default_factory=WorldSettings)
    rng_seed: int = 0

    @model_validator(mode="after")
    def check_dimensions(self) -> "ScenarioSettings":
        d = len(self.theta0)
        if not (len(self.lower_bounds) == len(self.upper_bounds) == d):
            raise ValueError(f"theta0 has {d} components but bounds have {len(self.lower_bounds)}/{len(self.upper_bounds)}")
        for k, (lo, v, hi) in enumerate(zip(self.lower_bounds, self.theta0, self.upper_bounds)):
            if not (lo <= v <= hi):
                raise ValueError(f"theta0[{k}]={v} outside [{lo}, {hi}]")
        if d > 1 and self.d_prime >= d:
            raise ValueError(f"d_prime must be < d={d}")
        if self.batch_size > self.n_tasks:
            raise ValueError("batch_size (M) must be <= n_tasks (N)")
        for k, j, _, _ in self.jacobian:
            if not (0 <= k < d and 0 <= j < len(self.cage)):
                raise ValueError(f"jacobian entry ({k}, {j}) out of range")
        return self


class OptimizerSettings(_Strict):
    alpha: float = Field(0.1, ge=0.0)
    d_prime: Optional[int] = Field(None, ge=1, description="overrides the scenario's d'")
    step_scale: float = Field(1.0, gt=0.0, description="lr_0, initial inverse-Hessian scale")
    decay: float = Field(math.exp(-1.0), gt=0.0, le=1.0)
    max_inner_iter: int = Field(30, ge=1)
    grad_tol: float = Field(1e-6, ge=0.0)
    armijo_c1: float = Field(1e-4, gt=0.0, lt=1.0)
    backtrack: float = Field(0.5, gt=0.0, lt=1.0)
    max_backtracks: int = Field(30, ge=1)
    distill_seed: int = 0


class LandscapeSettings(_Strict):
    dim_a: int = Field(0, ge=0)
    dim_b: int = Field(1, ge=0)
    range_a: Optional[Tuple[float, float]] = None
    range_b: Optional[Tuple[float, float]] = None
    resolution: int = Field(40, ge=2)
    variation: int = Field(0, ge=0)

    @model_validator(mode="after")
    def distinct_dims(self) -> "LandscapeSettings":
        if self.dim_a == self.dim_b:
            raise ValueError("dim_a and dim_b must differ")
        return self


class ExperimentConfig(_Strict):
    scenario: ScenarioSettings
    algorithms: List[AlgorithmName] = Field(default_factory=lambda: list(ALGORITHMS))
    runs: int = Field(10, ge=1)
    train_seeds: Optional[List[int]] = None
    test_size: int = Field(100, ge=1)
    test_seed: int = 10_000
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    landscape: LandscapeSettings = Field(default_factory=LandscapeSettings)
    out_dir: str = "results"
    jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_seeds(self) -> "ExperimentConfig":
        seeds = self.resolved_train_seeds()
        if len(seeds) != self.runs:
            raise ValueError(f"train_seeds has {len(seeds)} entries for {self.runs} runs")
        if self.test_seed in seeds:
            raise ValueError("test_seed must differ from every train seed")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise ValueError("algorithms must not repeat")
        return self

    def resolved_train_seeds(self) -> List[int]:
        return list(self.train_seeds) if self.train_seeds is not None else list(range(self.runs))


# -----------------------------
# Built-in scenario defaults
# -----------------------------

def _xy(k: int, vertices: List[int], axis: str, coeff: float) -> List[List[Any]]:
    return [[k, j, axis, coeff] for j in vertices]


_WINDING = {
    "name": "Winding",
    "n_tasks": 60,
    "batch_size": 5,
    "d_prime": 2,
    "horizon": 200,
    "theta0": [0.065, 0.065, 0.013, 0.013, 0.052, 0.052, 0.026, 0.026],
    "lower_bounds": [0.02, 0.02, 0.0, 0.0, 0.036, 0.036, 0.015, 0.015],
    "upper_bounds": [0.09, 0.09, 0.022, 0.022, 0.08, 0.08, 0.045, 0.045],
    "cage": [
        [-0.0325, -0.026], [0.0325, -0.026], [0.052, -0.0065], [0.052, 0.0065],
        [0.0325, 0.026], [-0.0325, 0.026], [-0.052, 0.0065], [-0.052, -0.0065],
    ],
    "jacobian": (
        _xy(0, [0], "x", -0.5) + _xy(0, [1], "x", 0.5)
        + _xy(1, [5], "x", -0.5) + _xy(1, [4], "x", 0.5)
        + _xy(2, [2], "y", -1.0) + _xy(2, [3], "y", 1.0)
        + _xy(3, [7], "y", -1.0) + _xy(3, [6], "y", 1.0)
        + _xy(4, [2, 3], "x", 1.0)
        + _xy(5, [6, 7], "x", -1.0)
        + _xy(6, [0, 1], "y", -1.0)
        + _xy(7, [4, 5], "y", 1.0)
    ),
    "boundary": [
        [-0.025, -0.02], [0.025, -0.02], [0.04, -0.005], [0.04, 0.005],
        [0.025, 0.02], [-0.025, 0.02], [-0.04, 0.005], [-0.04, -0.005],
    ],
    "boundary_per_edge": [10, 4, 2, 4, 10, 4, 2, 4],
    "loss": {},
    "success": {"drop_tol": 0.05},
    "region": {"angle_low": 0.0, "angle_high": 2.0 * math.pi},
    "scene": {
        "links": 15,
        "link_length": 0.012,
        "link_mass": 0.05,
        "point_radius": 0.003,
        "drop_height": 0.002,
        "release_speed": 0.6,
        "air_drag": 0.05,
    },
    "policy": {"kind": "CircularWinding", "speed": 3.0},
    "world": {"contact_sharpness": 2000.0, "tangential_smoothing": 0.1, "contact_damping": 2.0},
    "rng_seed": 1,
}

_FLIPPING = {
    "name": "Flipping",
    "n_tasks": 40,
    "batch_size": 5,
    "d_prime": 2,
    "horizon": 200,
    "theta0": [0.01, 0.014, 0.014, 0.012, 0.014, 0.014, 0.0, 0.014, 0.014],
    "lower_bounds": [-0.005, 0.009, 0.009, 0.0, 0.009, 0.009, -0.01, 0.009, 0.009],
    "upper_bounds": [0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 0.01, 0.03, 0.03],
    "cage": [
        [-0.01, 0.0], [0.02, -0.014], [0.05, -0.014], [0.082, -0.014],
        [0.082, 0.014], [0.05, 0.014], [0.02, 0.014],
    ],
    "jacobian": (
        _xy(0, [0], "x", -1.0)
        + _xy(1, [1], "y", -1.0)
        + _xy(2, [2], "y", -1.0)
        + _xy(3, [3, 4], "x", 1.0)
        + _xy(4, [6], "y", 1.0)
        + _xy(5, [5], "y", 1.0)
        + _xy(6, [0], "y", 1.0)
        + _xy(7, [3], "y", -1.0)
        + _xy(8, [4], "y", 1.0)
    ),
    "boundary": [[0.0, 0.0], [0.02, -0.008], [0.07, -0.008], [0.07, 0.008], [0.02, 0.008]],
    "boundary_per_edge": [6, 12, 4, 12, 6],
    "markers": [0],
    "loss": {"c_u": 5.0, "c_flip": 50.0, "c_touch": 1.0},
    "success": {"angle_tol": 0.1},
    "region": {"offset": 2.0, "offset_scale_x": 0.01, "offset_scale_y": 0.005, "yaw": math.pi / 2, "tilt_scale": 0.05},
    "scene": {"box_size": 0.05, "box_mass": 0.2, "finger_x": 0.065, "finger_y": 0.04},
    "policy": {
        "kind": "OpenLoopFlipping",
        "speed": 0.3,
        "segments": [[0.3, -1.0, 0.0], [0.7, -0.6, 0.8], [1.0, -0.2, 1.0]],
    },
    "world": {
        "dt": 2e-3,
        "contact_sharpness": 2000.0,
        "tangential_smoothing": 0.05,
        "contact_damping": 2.0,
    },
    "rng_seed": 2,
}

_PUSHING = {
    "name": "Pushing",
    "n_tasks": 40,
    "batch_size": 5,
    "d_prime": 2,
    "horizon": 100,
    "theta0": [0.065, 0.065, 0.018, 0.018, 0.018, 0.02, 0.018],
    "lower_bounds": [0.05, 0.05, 0.0, 0.0, 0.0, 0.005, 0.012],
    "upper_bounds": [0.09, 0.09, 0.04, 0.04, 0.03, 0.04, 0.03],
    "cage": [
        [-0.065, -0.018], [-0.02, -0.018], [0.02, -0.018], [0.065, -0.018],
        [0.065, 0.018], [0.02, 0.018], [-0.02, 0.018], [-0.065, 0.018],
    ],
    "jacobian": (
        _xy(0, [0, 7], "x", -1.0)
        + _xy(1, [3, 4], "x", 1.0)
        + _xy(2, [7], "y", 1.0)
        + _xy(3, [4], "y", 1.0)
        + _xy(4, [5, 6], "y", 1.0)
        + _xy(5, [2, 5], "x", 1.0) + _xy(5, [1, 6], "x", -1.0)
        + _xy(6, [0, 1, 2, 3], "y", -1.0)
    ),
    "boundary": [[-0.05, -0.01], [0.05, -0.01], [0.05, 0.01], [-0.05, 0.01]],
    "boundary_per_edge": [12, 2, 12, 2],
    "loss": {"x_scoop": 0.005, "y_scoop": 0.07},
    "success": {},
    "region": {"center_x": 0.0, "center_y": 0.01, "half_size": 0.015},
    "scene": {"pea_mass": 0.02, "pea_radius": 0.01, "pea_drag": 0.2, "pusher_mass": 0.5, "kp": 2000.0, "kp_angle": 5.0},
    "policy": {
        "kind": "ZigZagPushing",
        "speed": 1.0,
        "waypoints": [[0.0, -0.045], [0.02, -0.015], [-0.02, 0.02], [0.012, 0.065]],
    },
    "world": {
        "gravity": [0.0, 0.0],
        "dt": 2.5e-3,
        "contact_stiffness": 2000.0,
        "contact_sharpness": 2000.0,
        "tangential_smoothing": 0.1,
    },
    "rng_seed": 3,
}

_REACHING = {
    "name": "Reaching",
    "n_tasks": 10,
    "batch_size": 5,
    "d_prime": 1,
    "horizon": 100,
    "theta0": [0.10, 0.08],
    "lower_bounds": [0.05, 0.03],
    "upper_bounds": [0.15, 0.13],
    "cage": [[-0.01, -0.01], [0.10, -0.01], [0.19, -0.01], [0.19, 0.01], [0.10, 0.01], [-0.01, 0.01]],
    "jacobian": _xy(0, [1, 2, 3, 4], "x", 1.0) + _xy(1, [2, 3], "x", 1.0),
    "boundary": [[0.0, -0.005], [0.10, -0.005], [0.18, 0.0], [0.10, 0.005], [0.0, 0.005]],
    "boundary_per_edge": [10, 8, 8, 10, 1],
    "markers": [10, 18, 26],
    "loss": {"c_u": 0.1, "c_p": 10.0},
    "success": {},
    "region": {"angle": 0.3, "reference_l1": 0.12, "reference_l2": 0.06, "target_chunks": 5},
    "scene": {},
    "policy": {
        "kind": "ReachingActions",
        "speed": 2.0,
        "segments": [[0.25, 0.5, -0.5], [0.5, 0.2, 0.8], [0.75, -0.6, 0.3], [1.0, 0.4, -0.9]],
    },
    "world": {"gravity": [0.0, 0.0], "dt": 1e-2},
    "rng_seed": 4,
}

SCENARIO_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "Winding": _WINDING,
    "Flipping": _FLIPPING,
    "Pushing": _PUSHING,
    "Reaching": _REACHING,
}


def default_scenario(name: str) -> ScenarioSettings:
    if name not in SCENARIO_DEFAULTS:
        raise ConfigError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}", "scenario.name")
    return _validate(ScenarioSettings, copy.deepcopy(SCENARIO_DEFAULTS[name]), prefix="scenario")


# -----------------------------
# Loading
# -----------------------------

def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _validate(model: type, data: Dict[str, Any], prefix: str = "") -> Any:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        if prefix:
            path = f"{prefix}.{path}" if path else prefix
        raise ConfigError(err["msg"], path) from exc


def load_config(
    path: Optional[Union[str, Path]] = None,
    scenario: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """Resolve a config: built-in scenario defaults < YAML file < explicit overrides.

    Environment defaults (TOOL_MORPH_OUT_DIR, TOOL_MORPH_JOBS) apply when
    neither the file nor the overrides set those fields.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "path") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", "path") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a mapping", "")
        data = loaded
    if overrides:
        data = _merge(data, overrides)

    scen = data.get("scenario") or {}
    if not isinstance(scen, dict):
        raise ConfigError("must be a mapping", "scenario")
    name = scenario or scen.get("name")
    if name is None:
        raise ConfigError("no scenario named (use --scenario or scenario.name)", "scenario.name")
    if name not in SCENARIO_DEFAULTS:
        raise ConfigError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}", "scenario.name")
    data["scenario"] = _merge(copy.deepcopy(SCENARIO_DEFAULTS[name]), dict(scen, name=name))

    if "out_dir" not in data and os.getenv(ENV_OUT_DIR):
        data["out_dir"] = os.getenv(ENV_OUT_DIR)
    if "jobs" not in data and os.getenv(ENV_JOBS):
        try:
            data["jobs"] = int(os.getenv(ENV_JOBS, "1"))
        except ValueError as exc:
            raise ConfigError(f"{ENV_JOBS} must be an integer", "jobs") from exc
    return _validate(ExperimentConfig, data)


def dump_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write the resolved config as YAML with sorted keys (byte-stable across runs)."""
    path = Path(path)
    payload = config.model_dump(mode="json")
    path.write_text(yaml.safe_dump(payload, sort_keys=True, default_flow_style=None), encoding="utf-8")
    return path
