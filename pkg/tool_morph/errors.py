"""
Exception hierarchy for tool morphology optimization.

Every error carries a short ``code`` so the CLI can emit a machine-readable
error line, and the harness can record per-run failures as ``failed:<code>``.
"""

from __future__ import annotations

from typing import Optional, Sequence


class ToolMorphError(Exception):
    code = "tool_morph_error"


# -----------------------------
# Geometry
# -----------------------------

class GeometryError(ToolMorphError):
    code = "geometry_error"


class PointOutsideCage(GeometryError):
    code = "point_outside_cage"

    def __init__(self, message: str, index: Optional[int] = None, point: Optional[Sequence[float]] = None):
        if index is not None:
            message = f"{message} (boundary vertex {index})"
        super().__init__(message)
        self.index = index
        self.point = None if point is None else tuple(float(p) for p in point)


class DegenerateCage(GeometryError):
    code = "degenerate_cage"


class ParamsOutOfBounds(GeometryError):
    code = "params_out_of_bounds"


# -----------------------------
# Simulation
# -----------------------------

class SimulationError(ToolMorphError):
    code = "simulation_error"


class DimensionMismatch(SimulationError):
    code = "dimension_mismatch"


class NumericalBlowup(SimulationError):
    code = "numerical_blowup"

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
        self.step = step


class MissingChannel(SimulationError):
    code = "missing_channel"

    def __init__(self, name: str):
        super().__init__(f"trajectory has no channel {name!r}")
        self.name = name


class HorizonMismatch(SimulationError):
    code = "horizon_mismatch"


# -----------------------------
# Optimization / experiment
# -----------------------------

class OptimizationError(ToolMorphError):
    code = "optimization_error"


class EmptyCandidate(OptimizationError):
    code = "empty_candidate"


class ScheduleError(ToolMorphError):
    code = "schedule_error"


class ConfigError(ToolMorphError):
    code = "config_error"

    def __init__(self, message: str, field_path: str = ""):
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)
        self.field_path = field_path


class IoError(ToolMorphError):
    code = "io_error"
