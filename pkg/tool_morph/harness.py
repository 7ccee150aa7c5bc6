"""
Experiment harness and command-line interface.

    python tool_morph_eval.py run --scenario Pushing --out results/pushing
    python tool_morph_eval.py landscape --scenario Reaching --resolution 40
    python tool_morph_eval.py rollout --scenario Winding --variation 3 --dump traj.csv
    python tool_morph_eval.py rollout --scenario Pushing --states states.csv
    python tool_morph_eval.py export --scenario Flipping --theta 0.01,0.014,...
    python tool_morph_eval.py summarize --out results/pushing

Every CSV written here is a pure function of the resolved config; wall-clock
times go to timings.csv only, so reruns produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from tool_morph.config import (
    ENV_LOG_LEVEL,
    ENV_OUT_DIR,
    ExperimentConfig,
    LandscapeSettings,
    dump_config,
    load_config,
)
from tool_morph.continual import (
    BASELINE,
    OURS,
    SIMPLE,
    OptimizerRun,
    SimulationPipeline,
    build_schedule,
    run_baseline_diffhand,
    run_ours,
    run_simple_continual,
)
from tool_morph.diffsim import Trajectory, rollout
from tool_morph.errors import ConfigError, IoError, ToolMorphError
from tool_morph.geometry import write_polygon_svg, write_polygon_text
from tool_morph.scenarios import ScenarioSpec, TaskVariation, build_scenario, sample_variations

logger = logging.getLogger("tool_morph.harness")

RUN_FIELDS = ["run", "seed", "algorithm", "status", "test_loss", "test_loss_std", "success_rate", "batches", "restarts"]
REPORT_FIELDS = [
    "algorithm", "runs_ok", "runs_failed",
    "mean_test_loss", "std_test_loss", "mean_success_rate", "std_success_rate",
]
HISTORY_FIELDS = [
    "batch", "algorithm", "status", "train_loss", "grad_norm", "step_scale",
    "active_dims", "restart_count", "inner_iterations",
]
TIMING_FIELDS = ["run", "algorithm", "batch", "wall_time_s"]
STATE_FIELDS = ["step", "body", "x", "y", "angle", "vx", "vy", "omega"]


# -----------------------------
# Report types
# -----------------------------

@dataclass
class RunRecord:
    run: int
    seed: int
    algorithm: str
    status: str
    test_loss: float = float("nan")
    test_loss_std: float = float("nan")
    success_rate: float = float("nan")
    theta: Tuple[float, ...] = ()
    batches: int = 0
    restarts: int = 0
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class AggregateRow:
    algorithm: str
    runs_ok: int
    runs_failed: int
    mean_test_loss: float
    std_test_loss: float
    mean_success_rate: float
    std_success_rate: float


@dataclass
class EvaluationReport:
    scenario: str
    records: List[RunRecord]
    aggregates: List[AggregateRow]
    failed_runs: int = 0
    wall_clock: Dict[str, float] = field(default_factory=dict)

    def aggregate(self, algorithm: str) -> AggregateRow:
        for row in self.aggregates:
            if row.algorithm == algorithm:
                return row
        raise KeyError(algorithm)


PipelineFactory = Callable[[ScenarioSpec, int], SimulationPipeline]


# -----------------------------
# Statistics
# -----------------------------

def population_stats(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation (ddof=0); NaN when empty."""
    if len(values) == 0:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=float)
    return float(np.mean(arr)), float(np.std(arr))


def aggregate_records(records: Sequence[RunRecord], algorithms: Sequence[str]) -> List[AggregateRow]:
    rows: List[AggregateRow] = []
    for alg in algorithms:
        mine = [r for r in records if r.algorithm == alg]
        ok = [r for r in mine if r.ok]
        m_loss, s_loss = population_stats([r.test_loss for r in ok])
        m_succ, s_succ = population_stats([r.success_rate for r in ok])
        rows.append(AggregateRow(alg, len(ok), len(mine) - len(ok), m_loss, s_loss, m_succ, s_succ))
    return rows


# -----------------------------
# CSV helpers
# -----------------------------

def _fmt(v: object) -> object:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return " ".join(str(int(x)) for x in v)
    return v


def _write_csv(path: Path, fields: List[str], rows: Sequence[Dict[str, object]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(row.get(k, "")) for k in fields})
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def _theta_fields(d: int) -> List[str]:
    return [f"theta_{k}" for k in range(d)]


# -----------------------------
# Experiment
# -----------------------------

def _train(algorithm: str, spec: ScenarioSpec, schedule, config: ExperimentConfig, pipeline) -> OptimizerRun:
    if algorithm == OURS:
        return run_ours(spec, schedule, config.optimizer, pipeline)
    if algorithm == SIMPLE:
        return run_simple_continual(spec, schedule, config.optimizer, pipeline)
    if algorithm == BASELINE:
        return run_baseline_diffhand(spec, schedule.batches[0], config.optimizer, pipeline)
    raise ConfigError(f"unknown algorithm {algorithm!r}", "algorithms")


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    pipeline_factory: Optional[PipelineFactory] = None,
) -> EvaluationReport:
    """Train every listed algorithm on every run seed, score on one shared held-out set."""
    if config.scenario.name == "Reaching":
        raise ConfigError("Reaching is only used for landscape slices", "scenario.name")
    out = Path(out_dir or config.out_dir)
    factory = pipeline_factory or (lambda spec, jobs: SimulationPipeline(spec, jobs))
    spec = build_scenario(config.scenario)
    test_set = sample_variations(spec, config.test_size, seed=config.test_seed)
    pipeline = factory(spec, config.jobs)

    try:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(config, out / "config.yaml")
    except OSError as exc:
        raise IoError(f"cannot prepare output directory {out}: {exc}") from exc

    records: List[RunRecord] = []
    timings: List[Dict[str, object]] = []
    started_all = time.perf_counter()
    for run_idx, seed in enumerate(config.resolved_train_seeds()):
        try:
            schedule = build_schedule(spec, seed, forbidden_seeds=[config.test_seed])
        except ToolMorphError as exc:
            logger.warning("run %d (seed %d): schedule failed: %s", run_idx, seed, exc)
            records.extend(RunRecord(run_idx, seed, alg, f"failed:{exc.code}") for alg in config.algorithms)
            continue
        for alg in config.algorithms:
            started = time.perf_counter()
            try:
                result = _train(alg, spec, schedule, config, pipeline)
                scores = pipeline.evaluate(result.theta_final, test_set)
            except ToolMorphError as exc:
                logger.warning("run %d (seed %d) %s failed: %s", run_idx, seed, alg, exc)
                records.append(RunRecord(run_idx, seed, alg, f"failed:{exc.code}"))
                continue
            losses = np.array([s[0] for s in scores])
            succ = np.array([s[1] for s in scores], dtype=float)
            rec = RunRecord(
                run=run_idx,
                seed=seed,
                algorithm=alg,
                status="ok",
                test_loss=float(np.mean(losses)),
                test_loss_std=float(np.std(losses)),
                success_rate=float(np.mean(succ)),
                theta=tuple(float(v) for v in result.theta_final),
                batches=len(result.history),
                restarts=int(result.metadata.get("restart_count", 0)),
                wall_time=time.perf_counter() - started,
            )
            records.append(rec)
            timings.extend({"run": run_idx, "algorithm": alg, "batch": h.batch, "wall_time_s": h.wall_time} for h in result.history)
            timings.append({"run": run_idx, "algorithm": alg, "batch": "total", "wall_time_s": rec.wall_time})
            _write_history(out / "history" / f"{alg}_run{run_idx}.csv", result, spec.d)
            export_geometry(result.theta_final, spec, out / "geometry" / f"{alg}_run{run_idx}")
            print(f"✅ run {run_idx} {alg}: test loss {rec.test_loss:.6g}, success {rec.success_rate:.2f}")

    aggregates = aggregate_records(records, config.algorithms)
    failed = sum(1 for r in records if not r.ok)
    if failed:
        print(f"⚠️  {failed} (run, algorithm) records failed and are excluded from the statistics")
    report = EvaluationReport(
        scenario=spec.id,
        records=records,
        aggregates=aggregates,
        failed_runs=failed,
        wall_clock={"total_s": time.perf_counter() - started_all},
    )
    write_report(report, out, spec.d)
    _write_csv(out / "timings.csv", TIMING_FIELDS, timings)
    return report


def _write_history(path: Path, run: OptimizerRun, d: int) -> Path:
    rows = []
    for h in run.history:
        row = {name: getattr(h, name) for name in HISTORY_FIELDS}
        row.update({f"theta_{k}": v for k, v in enumerate(h.theta)})
        rows.append(row)
    return _write_csv(path, HISTORY_FIELDS + _theta_fields(d), rows)


def write_report(report: EvaluationReport, out: Path, d: int) -> None:
    rows = []
    for r in report.records:
        row = {name: getattr(r, name) for name in RUN_FIELDS}
        row.update({f"theta_{k}": v for k, v in enumerate(r.theta)})
        rows.append(row)
    _write_csv(out / "runs.csv", RUN_FIELDS + _theta_fields(d), rows)
    _write_csv(out / "report.csv", REPORT_FIELDS, [a.__dict__ for a in report.aggregates])


# -----------------------------
# Loss landscapes
# -----------------------------

@dataclass
class LandscapeGrid:
    dim_a: int
    dim_b: int
    axis_a: np.ndarray
    axis_b: np.ndarray
    values: np.ndarray   # (resolution_a, resolution_b); NaN where the rollout failed
    failed_cells: int = 0


def _cell_loss(spec: ScenarioSpec, theta: np.ndarray, variation: TaskVariation) -> float:
    try:
        traj = rollout(variation, spec.deform(theta), spec.policy, spec.world, with_tangents=False)
        return float(spec.model.task_loss(traj).value)
    except ToolMorphError as exc:
        logger.debug("landscape cell at %s failed: %s", theta, exc)
        return float("nan")


def evaluate_landscape(
    spec: ScenarioSpec,
    dim_a: int,
    dim_b: int,
    ranges: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None,
    resolution: int = 40,
    variation: Optional[TaskVariation] = None,
    jobs: int = 1,
) -> LandscapeGrid:
    """Task loss over a 2D slice of theta (other components at theta0), no gradients."""
    if dim_a == dim_b:
        raise ConfigError("dim_a and dim_b must differ", "landscape.dim_b")
    for name, k in (("dim_a", dim_a), ("dim_b", dim_b)):
        if not 0 <= k < spec.d:
            raise ConfigError(f"{name}={k} outside 0..{spec.d - 1}", f"landscape.{name}")
    if resolution < 2:
        raise ConfigError("resolution must be >= 2", "landscape.resolution")
    lo, hi = spec.theta0.lower_bounds, spec.theta0.upper_bounds
    if ranges is None:
        ranges = ((lo[dim_a], hi[dim_a]), (lo[dim_b], hi[dim_b]))
    for name, k, (a, b) in (("range_a", dim_a, ranges[0]), ("range_b", dim_b, ranges[1])):
        if not (lo[k] <= a <= b <= hi[k]):
            raise ConfigError(f"[{a}, {b}] not within bounds [{lo[k]}, {hi[k]}]", f"landscape.{name}")
    variation = variation or sample_variations(spec, 1)[0]

    axis_a = np.linspace(ranges[0][0], ranges[0][1], resolution)
    axis_b = np.linspace(ranges[1][0], ranges[1][1], resolution)
    thetas = []
    for a in axis_a:
        for b in axis_b:
            theta = np.array(spec.theta0.values, dtype=float)
            theta[dim_a], theta[dim_b] = a, b
            thetas.append(theta)
    if jobs > 1:
        flat = Parallel(n_jobs=jobs)(delayed(_cell_loss)(spec, th, variation) for th in thetas)
    else:
        flat = [_cell_loss(spec, th, variation) for th in thetas]
    values = np.asarray(flat, dtype=float).reshape(resolution, resolution)
    failed = int(np.count_nonzero(np.isnan(values)))
    if failed:
        logger.warning("%d of %d landscape cells failed", failed, values.size)
    return LandscapeGrid(dim_a, dim_b, axis_a, axis_b, values, failed)


def total_variation(values: np.ndarray) -> float:
    """Sum of |adjacent-cell differences| along both axes divided by the value range."""
    v = np.asarray(values, dtype=float)
    finite = v[np.isfinite(v)]
    if finite.size == 0:
        return float("nan")
    span = float(finite.max() - finite.min())
    if span == 0.0:
        return 0.0
    diffs = np.concatenate([np.abs(np.diff(v, axis=0)).ravel(), np.abs(np.diff(v, axis=1)).ravel()])
    return float(np.nansum(diffs) / span)


def write_landscape_csv(grid: LandscapeGrid, path: Union[str, Path]) -> Path:
    rows = [
        {"row": i, "col": j, "theta_a": grid.axis_a[i], "theta_b": grid.axis_b[j], "loss": grid.values[i, j]}
        for i in range(grid.values.shape[0])
        for j in range(grid.values.shape[1])
    ]
    return _write_csv(Path(path), ["row", "col", "theta_a", "theta_b", "loss"], rows)


# -----------------------------
# Geometry and trajectory export
# -----------------------------

def export_geometry(theta: Sequence[float], spec: ScenarioSpec, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Deformed tool polygon as <path>.txt and <path>.svg (deformed cage dashed)."""
    deformed = spec.deform(theta)
    base = Path(path)
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        txt = write_polygon_text(deformed.vertices, base.with_suffix(".txt"))
        svg = write_polygon_svg(deformed.vertices, base.with_suffix(".svg"), cage=spec.cage_param.cage(theta))
    except OSError as exc:
        raise IoError(f"cannot write geometry to {base}: {exc}") from exc
    return txt, svg


def write_trajectory_csv(traj: Trajectory, path: Union[str, Path]) -> Path:
    """step, channel, value, d_0 .. d_{d-1}; vector channels split into <name>.x / <name>.y."""
    d = traj.d
    rows: List[Dict[str, object]] = []
    for step in range(traj.horizon):
        for name, ch in traj.channels.items():
            v, t = ch.value[step], ch.tangents[step]
            if v.ndim == 0:
                parts = [(name, float(v), t)]
            else:
                parts = [(f"{name}.{axis}", float(v[k]), t[k]) for k, axis in zip(range(v.shape[0]), "xyzw")]
            for label, value, tangent in parts:
                row = {"step": step + 1, "channel": label, "value": value}
                row.update({f"d_{k}": float(tangent[k]) for k in range(d)})
                rows.append(row)
    return _write_csv(Path(path), ["step", "channel", "value"] + [f"d_{k}" for k in range(d)], rows)


def write_states_csv(traj: Trajectory, path: Union[str, Path]) -> Path:
    """Per-step body states (values only) of a rollout run with keep_states."""
    if traj.states is None:
        raise IoError("trajectory carries no body states; roll out with keep_states=True")
    rows: List[Dict[str, object]] = []
    for step, bodies in enumerate(traj.states, start=1):
        pos, vel = bodies.position.value, bodies.linear_velocity.value
        angle, omega = bodies.angle.value, bodies.angular_velocity.value
        for b in range(bodies.n):
            rows.append({
                "step": step, "body": b,
                "x": float(pos[b, 0]), "y": float(pos[b, 1]), "angle": float(angle[b]),
                "vx": float(vel[b, 0]), "vy": float(vel[b, 1]), "omega": float(omega[b]),
            })
    return _write_csv(Path(path), STATE_FIELDS, rows)


# -----------------------------
# Quick aggregation
# -----------------------------

def summarize(out_dir: Union[str, Path]) -> List[Dict[str, str]]:
    """Print per-algorithm mean +- std test loss and success rate from runs.csv."""
    path = Path(out_dir) / "runs.csv"
    if not path.exists():
        raise IoError(f"no runs.csv in {out_dir}")
    per_alg: Dict[str, Dict[str, List[float]]] = defaultdict(lambda: {"loss": [], "success": [], "failed": []})
    with open(path, "r", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            bucket = per_alg[row["algorithm"]]
            if row["status"] != "ok":
                bucket["failed"].append(1.0)
                continue
            bucket["loss"].append(float(row["test_loss"]))
            bucket["success"].append(float(row["success_rate"]))

    summary: List[Dict[str, str]] = []
    print("\n📊 Test loss by algorithm (mean ± population std):")
    for alg, v in sorted(per_alg.items(), key=lambda kv: population_stats(kv[1]["loss"])[0]):
        m, s = population_stats(v["loss"])
        sm, _ = population_stats(v["success"])
        print(f"- {alg:18s} {m:.6g} ± {s:.3g}  success {sm:.2f} (n={len(v['loss'])}, failed={len(v['failed'])})")
        summary.append({"algorithm": alg, "mean": repr(m), "std": repr(s), "success": repr(sm)})
    return summary


# -----------------------------
# CLI
# -----------------------------

def _parse_theta(text: Optional[str], spec: ScenarioSpec) -> np.ndarray:
    if not text:
        return np.array(spec.theta0.values, dtype=float)
    try:
        theta = np.array([float(x) for x in text.split(",")], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"cannot parse --theta {text!r}", "theta") from exc
    if theta.size != spec.d:
        raise ConfigError(f"--theta has {theta.size} components, scenario has d={spec.d}", "theta")
    return theta


def _resolve(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, object] = {}
    if args.out:
        overrides["out_dir"] = args.out
    if args.jobs:
        overrides["jobs"] = args.jobs
    if getattr(args, "seed", None) is not None and args.command == "run":
        runs = load_config(args.config, args.scenario).runs
        overrides["train_seeds"] = list(range(args.seed, args.seed + runs))
    return load_config(args.config, args.scenario, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Continual tool-morphology optimization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--scenario", choices=["Winding", "Flipping", "Pushing", "Reaching"])
        p.add_argument("--out", help=f"output directory (default: ${ENV_OUT_DIR} or results)")
        p.add_argument("--seed", type=int, help="first train seed (run) or variation stream (rollout)")
        p.add_argument("--jobs", type=int, help="parallel rollout workers")

    common(sub.add_parser("run", help="train all algorithms and score them on the held-out set"))

    p = sub.add_parser("landscape", help="2D loss-landscape slice")
    common(p)
    p.add_argument("--dim-a", type=int)
    p.add_argument("--dim-b", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--variation", type=int)

    p = sub.add_parser("rollout", help="simulate one variation and dump its trajectory")
    common(p)
    p.add_argument("--theta", help="comma-separated theta (default theta0)")
    p.add_argument("--variation", type=int, default=0)
    p.add_argument("--dump", help="trajectory CSV path")
    p.add_argument("--states", help="per-step body-state CSV path")

    p = sub.add_parser("export", help="write the deformed tool as text and SVG")
    common(p)
    p.add_argument("--theta", help="comma-separated theta (default theta0)")

    p = sub.add_parser("summarize", help="aggregate a finished experiment directory")
    p.add_argument("--out", required=True)
    return parser


def _cmd_run(args: argparse.Namespace) -> None:
    config = _resolve(args)
    report = run_experiment(config)
    print(f"\n✅ Done. Results written to {config.out_dir}")
    for row in report.aggregates:
        print(f"   {row.algorithm:18s} {row.mean_test_loss:.6g} ± {row.std_test_loss:.3g} (n={row.runs_ok})")


def _cmd_landscape(args: argparse.Namespace) -> None:
    config = _resolve(args)
    ls: LandscapeSettings = config.landscape
    dim_a = ls.dim_a if args.dim_a is None else args.dim_a
    dim_b = ls.dim_b if args.dim_b is None else args.dim_b
    resolution = args.resolution or ls.resolution
    spec = build_scenario(config.scenario)
    index = ls.variation if args.variation is None else args.variation
    variation = sample_variations(spec, 1, start=index)[0]
    ranges = (ls.range_a, ls.range_b) if ls.range_a and ls.range_b and (dim_a, dim_b) == (ls.dim_a, ls.dim_b) else None
    grid = evaluate_landscape(spec, dim_a, dim_b, ranges, resolution, variation, jobs=config.jobs)
    out = Path(config.out_dir)
    csv_path = write_landscape_csv(grid, out / f"landscape_{spec.id}_{dim_a}_{dim_b}.csv")
    tv = total_variation(grid.values)
    _write_csv(
        out / f"landscape_{spec.id}_{dim_a}_{dim_b}_summary.csv",
        ["scenario", "dim_a", "dim_b", "resolution", "total_variation", "failed_cells"],
        [{"scenario": spec.id, "dim_a": dim_a, "dim_b": dim_b, "resolution": resolution,
          "total_variation": tv, "failed_cells": grid.failed_cells}],
    )
    print(f"✅ {csv_path} (total variation {tv:.4g}, {grid.failed_cells} failed cells)")


def _cmd_rollout(args: argparse.Namespace) -> None:
    config = _resolve(args)
    spec = build_scenario(config.scenario)
    theta = _parse_theta(args.theta, spec)
    variation = sample_variations(spec, 1, seed=args.seed, start=args.variation)[0]
    traj = rollout(variation, spec.deform(theta), spec.policy, spec.world, keep_states=bool(args.states))
    loss = spec.model.task_loss(traj)
    print(f"📊 {spec.id} variation {variation.index}: task loss {float(loss.value):.6g}, success {spec.model.success(traj)}")
    print(f"   dL/dtheta = {np.array2string(loss.gradient(), precision=6)}")
    if args.dump:
        print(f"✅ trajectory written to {write_trajectory_csv(traj, args.dump)}")
    if args.states:
        print(f"✅ body states written to {write_states_csv(traj, args.states)}")


def _cmd_export(args: argparse.Namespace) -> None:
    config = _resolve(args)
    spec = build_scenario(config.scenario)
    theta = _parse_theta(args.theta, spec)
    txt, svg = export_geometry(theta, spec, Path(config.out_dir) / f"{spec.id}_tool")
    print(f"✅ {txt}\n✅ {svg}")


COMMANDS = {
    "run": _cmd_run,
    "landscape": _cmd_landscape,
    "rollout": _cmd_rollout,
    "export": _cmd_export,
    "summarize": lambda args: summarize(args.out),
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        from dotenv import load_dotenv
        load_dotenv()
    except ImportError:
        pass

    logging.basicConfig(
        level=os.getenv(ENV_LOG_LEVEL, "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ToolMorphError as exc:
        payload = {"error": exc.code, "message": str(exc)}
        if isinstance(exc, ConfigError):
            payload["field_path"] = exc.field_path
        print(json.dumps(payload), file=sys.stderr)
        return 1
    return 0
