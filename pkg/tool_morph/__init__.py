"""Continual optimization of planar tool morphologies with a differentiable simulator."""

from tool_morph.config import ExperimentConfig, load_config
from tool_morph.continual import run_baseline_diffhand, run_ours, run_simple_continual
from tool_morph.diffsim import DiffScalar, WorldConfig, rollout
from tool_morph.errors import ToolMorphError
from tool_morph.geometry import MorphParams, build_tool_shape, deform
from tool_morph.harness import evaluate_landscape, run_experiment
from tool_morph.scenarios import build_scenario, sample_variations

__version__ = "0.1.0"

__all__ = [
    "DiffScalar",
    "ExperimentConfig",
    "MorphParams",
    "ToolMorphError",
    "WorldConfig",
    "build_scenario",
    "build_tool_shape",
    "deform",
    "evaluate_landscape",
    "load_config",
    "rollout",
    "run_baseline_diffhand",
    "run_experiment",
    "run_ours",
    "run_simple_continual",
    "sample_variations",
]
