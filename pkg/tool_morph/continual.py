"""
Continual morphology optimization over batches of task variations.

Ours                 per batch: task loss + alpha * distillation loss on a
                     resampled set of earlier variations, minimised over
                     the d' not-yet-visited dimensions with the largest
                     gradient magnitude; after a full sweep the visited set
                     resets and the step scale decays.
Baseline-DiffHand    one batch, all dimensions, task loss only.
Simple-Continual     every batch in turn, all dimensions, task loss only.

All three share one bounded quasi-Newton inner solver (projected BFGS with
Armijo backtracking), so their differences are exactly the algorithmic ones.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Sequence, Set, Tuple

import numpy as np
from joblib import Parallel, delayed

from tool_morph.config import OptimizerSettings
from tool_morph.diffsim import DiffScalar, Trajectory, rollout
from tool_morph.errors import (
    EmptyCandidate,
    NumericalBlowup,
    OptimizationError,
    ScheduleError,
    ToolMorphError,
)
from tool_morph.scenarios import ScenarioSpec, TaskVariation, sample_variations

logger = logging.getLogger("tool_morph.continual")

OURS = "Ours"
BASELINE = "Baseline-DiffHand"
SIMPLE = "Simple-Continual"


# -----------------------------
# Domain types
# -----------------------------

@dataclass(frozen=True, eq=False)
class BatchSchedule:
    batches: List[List[TaskVariation]]
    source: List[TaskVariation]
    seed: int
    padded: bool = False

    @property
    def num_batches(self) -> int:
        return len(self.batches)


@dataclass
class DistillationSet:
    members: List[TaskVariation] = field(default_factory=list)
    refresh: str = "resample-each-batch"

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class HistoryRow:
    batch: int
    algorithm: str
    theta: Tuple[float, ...]
    train_loss: float
    grad_norm: float
    step_scale: float
    active_dims: Tuple[int, ...]
    restart_count: int
    inner_iterations: int
    status: str = "ok"
    wall_time: float = 0.0


@dataclass
class OptimizerState:
    theta: np.ndarray
    lr0: float
    decay: float
    alpha: float = 0.1
    active_dims: Set[int] = field(default_factory=set)
    visited_dims: Set[int] = field(default_factory=set)
    restart_count: int = 0
    history: List[HistoryRow] = field(default_factory=list)

    @property
    def learning_rate(self) -> float:
        return self.lr0 * self.decay ** self.restart_count

    def restart(self) -> None:
        self.visited_dims = set()
        self.restart_count += 1


@dataclass
class OptimizerRun:
    algorithm: str
    theta_initial: np.ndarray
    theta_final: np.ndarray
    history: List[HistoryRow]
    metadata: Dict[str, object] = field(default_factory=dict)


# -----------------------------
# Loss pipelines
# -----------------------------

class LossPipeline(Protocol):
    """Per-variation losses as DiffScalars carrying d(loss)/d(theta)."""

    def task_losses(self, theta: np.ndarray, variations: Sequence[TaskVariation]) -> List[DiffScalar]: ...

    def distill_losses(
        self, theta: np.ndarray, theta_prev: np.ndarray, variations: Sequence[TaskVariation]
    ) -> List[DiffScalar]: ...


def _tagged(exc: ToolMorphError, variation: TaskVariation) -> ToolMorphError:
    exc.variation_index = variation.index
    return exc


def _rollout_job(spec: ScenarioSpec, theta: np.ndarray, variation: TaskVariation, with_tangents: bool) -> Trajectory:
    try:
        return rollout(variation, spec.deform(theta), spec.policy, spec.world, with_tangents=with_tangents)
    except ToolMorphError as exc:
        raise _tagged(exc, variation)


def _task_loss_job(spec: ScenarioSpec, theta: np.ndarray, variation: TaskVariation) -> DiffScalar:
    return spec.model.task_loss(_rollout_job(spec, theta, variation, True))


def _distill_job(spec: ScenarioSpec, theta: np.ndarray, variation: TaskVariation, old: Trajectory) -> DiffScalar:
    return spec.model.distill_loss(_rollout_job(spec, theta, variation, True), old)


def _evaluate_job(spec: ScenarioSpec, theta: np.ndarray, variation: TaskVariation) -> Tuple[float, bool]:
    traj = _rollout_job(spec, theta, variation, False)
    return float(spec.model.task_loss(traj).value), spec.model.success(traj)


class SimulationPipeline:
    """Losses from full rollouts, optionally fanned out over a joblib worker pool.

    Results always come back in variation order. Rollouts at theta_{t-1}
    carry no tangents and are cached until theta_prev changes.
    """

    def __init__(self, spec: ScenarioSpec, jobs: int = 1):
        self.spec = spec
        self.jobs = max(1, int(jobs))
        self.rollouts = 0
        self._cache_key: Optional[bytes] = None
        self._cache: Dict[Tuple[int, int], Trajectory] = {}

    def _map(self, fn: Callable, args: List[tuple]) -> list:
        self.rollouts += len(args)
        if self.jobs == 1 or len(args) <= 1:
            return [fn(*a) for a in args]
        return Parallel(n_jobs=self.jobs)(delayed(fn)(*a) for a in args)

    def task_losses(self, theta: np.ndarray, variations: Sequence[TaskVariation]) -> List[DiffScalar]:
        theta = np.asarray(theta, dtype=float)
        return self._map(_task_loss_job, [(self.spec, theta, v) for v in variations])

    def reference_trajectories(self, theta_prev: np.ndarray, variations: Sequence[TaskVariation]) -> List[Trajectory]:
        key = np.asarray(theta_prev, dtype=float).tobytes()
        if key != self._cache_key:
            self._cache_key, self._cache = key, {}
        missing = [v for v in variations if v.key not in self._cache]
        if missing:
            trajs = self._map(_rollout_job, [(self.spec, np.asarray(theta_prev, dtype=float), v, False) for v in missing])
            self._cache.update({v.key: tr for v, tr in zip(missing, trajs)})
        return [self._cache[v.key] for v in variations]

    def distill_losses(
        self, theta: np.ndarray, theta_prev: np.ndarray, variations: Sequence[TaskVariation]
    ) -> List[DiffScalar]:
        old = self.reference_trajectories(theta_prev, variations)
        theta = np.asarray(theta, dtype=float)
        return self._map(_distill_job, [(self.spec, theta, v, tr) for v, tr in zip(variations, old)])

    def evaluate(self, theta: np.ndarray, variations: Sequence[TaskVariation]) -> List[Tuple[float, bool]]:
        """(task loss, success) per variation, without tangents."""
        theta = np.asarray(theta, dtype=float)
        return self._map(_evaluate_job, [(self.spec, theta, v) for v in variations])


# -----------------------------
# Schedule and distillation set
# -----------------------------

def build_schedule(
    spec: ScenarioSpec,
    seed: int,
    forbidden_seeds: Iterable[int] = (),
    variations: Optional[List[TaskVariation]] = None,
) -> BatchSchedule:
    """Shuffle-then-chunk partition of N variations into batches of M.

    When M does not divide N the last batch is topped up with variations
    resampled from the rest of T and the schedule is flagged ``padded``.
    """
    forbidden = set(int(s) for s in forbidden_seeds)
    if int(seed) in forbidden:
        raise ScheduleError(f"training seed {seed} is reserved for the test set")
    source = variations if variations is not None else sample_variations(spec, spec.N, seed=seed)
    leaked = [v.key for v in source if v.seed in forbidden]
    if leaked:
        raise ScheduleError(f"test variations {leaked[:3]} appear in the training set")
    if not source:
        raise ScheduleError("no variations to schedule")

    M = spec.M
    rng = np.random.default_rng([spec.rng_seed, int(seed), 1])
    order = rng.permutation(len(source))
    batches = [[source[i] for i in order[k:k + M]] for k in range(0, len(order), M)]
    padded = len(batches[-1]) < M
    if padded:
        last = batches[-1]
        pool = [i for i in order if source[i] not in last]
        fill = rng.choice(pool, size=M - len(last), replace=len(pool) < M - len(last))
        last.extend(source[int(i)] for i in fill)
        logger.info("padded final batch with %d resampled variations", len(fill))
    return BatchSchedule(batches=batches, source=list(source), seed=int(seed), padded=padded)


def refresh_distillation(seen: Sequence[TaskVariation], size: int, rng: np.random.Generator) -> DistillationSet:
    """Draw ``size`` distinct variations from everything seen so far."""
    if not seen:
        return DistillationSet()
    idx = np.sort(rng.choice(len(seen), size=min(size, len(seen)), replace=False))
    return DistillationSet(members=[seen[int(i)] for i in idx])


# -----------------------------
# Losses
# -----------------------------

def _fixed_order_mean(terms: Sequence[DiffScalar]) -> DiffScalar:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def batch_task_loss(theta: np.ndarray, batch: Sequence[TaskVariation], pipeline: LossPipeline) -> DiffScalar:
    if not batch:
        raise ScheduleError("empty batch")
    return _fixed_order_mean(pipeline.task_losses(theta, batch))


def batch_distill_loss(
    theta_t: np.ndarray,
    theta_prev: np.ndarray,
    D: Sequence[TaskVariation],
    pipeline: LossPipeline,
    d: Optional[int] = None,
) -> DiffScalar:
    if not D:
        return DiffScalar.constant(0.0, len(theta_t) if d is None else d)
    return _fixed_order_mean(pipeline.distill_losses(theta_t, theta_prev, D))


def combined_loss(
    theta_t: np.ndarray,
    batch: Sequence[TaskVariation],
    D: Sequence[TaskVariation],
    alpha: float,
    pipeline: LossPipeline,
    theta_prev: Optional[np.ndarray] = None,
) -> DiffScalar:
    if alpha < 0:
        raise OptimizationError(f"alpha must be >= 0, got {alpha}")
    task = batch_task_loss(theta_t, batch, pipeline)
    if alpha == 0 or not D:
        return task
    if theta_prev is None:
        raise OptimizationError("distillation needs theta_prev")
    return task + batch_distill_loss(theta_t, theta_prev, D, pipeline) * alpha


# -----------------------------
# Dimension selection and inner solver
# -----------------------------

def select_dimensions(grad: Sequence[float], visited: Set[int], d_prime: int) -> Set[int]:
    """The d' unvisited indices with the largest |grad|, ties to the lower index."""
    g = np.abs(np.asarray(grad, dtype=float))
    candidates = [k for k in range(g.size) if k not in visited]
    if not candidates:
        raise EmptyCandidate(f"all {g.size} dimensions visited; restart before selecting")
    ranked = sorted(candidates, key=lambda k: (-g[k], k))
    return set(ranked[:d_prime])


@dataclass
class InnerResult:
    theta: np.ndarray
    loss: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool


def minimize_box(
    fun: Callable[[np.ndarray], DiffScalar],
    theta: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    active: Sequence[int],
    settings: OptimizerSettings,
    step_scale: float,
    initial: Optional[DiffScalar] = None,
) -> InnerResult:
    """Projected BFGS over the ``active`` coordinates of theta; the rest stay untouched.

    Steps are projected onto the box and accepted only under the Armijo
    condition with a strictly negative directional term, so the loss never
    increases. Inverse-Hessian starts at step_scale * I.
    """
    idx = np.array(sorted(active), dtype=int)
    x = np.array(theta, dtype=float, copy=True)
    lo, hi = lower[idx], upper[idx]
    current = initial if initial is not None else fun(x)
    evaluations = 0 if initial is not None else 1
    f = float(current.value)
    g_full = current.gradient()
    g = g_full[idx]
    k = idx.size
    Hinv = step_scale * np.eye(k)
    converged = False
    it = 0

    for it in range(1, settings.max_inner_iter + 1):
        xa = x[idx]
        pg = xa - np.clip(xa - g, lo, hi)
        if np.max(np.abs(pg), initial=0.0) <= settings.grad_tol:
            converged = True
            it -= 1
            break

        blocked = lambda p: ((xa <= lo) & (p < 0)) | ((xa >= hi) & (p > 0))
        p = -Hinv @ g
        p[blocked(p)] = 0.0
        if g @ p >= 0.0:
            Hinv = step_scale * np.eye(k)
            p = -step_scale * g
            p[blocked(p)] = 0.0
        if not np.any(p):
            converged = True
            break

        t = 1.0
        accepted = None
        for _ in range(settings.max_backtracks):
            trial = x.copy()
            trial[idx] = np.clip(xa + t * p, lo, hi)
            s = trial[idx] - xa
            slope = float(g @ s)
            if slope < 0.0:
                cand = fun(trial)
                evaluations += 1
                if float(cand.value) <= f + settings.armijo_c1 * slope:
                    accepted = (trial, cand, s)
                    break
            t *= settings.backtrack
        if accepted is None:
            logger.debug("line search failed after %d backtracks at inner iteration %d", settings.max_backtracks, it)
            break

        x, current, s = accepted
        g_new = current.gradient()[idx]
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            V = np.eye(k) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        f, g = float(current.value), g_new

    return InnerResult(theta=x, loss=f, grad=current.gradient(), iterations=it, evaluations=evaluations, converged=converged)


# -----------------------------
# Algorithms
# -----------------------------

def _row(algorithm: str, batch: int, theta: np.ndarray, loss: float, grad: np.ndarray, step: float,
         active: Iterable[int], restarts: int, iterations: int, status: str, started: float) -> HistoryRow:
    return HistoryRow(
        batch=batch,
        algorithm=algorithm,
        theta=tuple(float(v) for v in theta),
        train_loss=float(loss),
        grad_norm=float(np.linalg.norm(grad)),
        step_scale=float(step),
        active_dims=tuple(sorted(int(k) for k in active)),
        restart_count=restarts,
        inner_iterations=iterations,
        status=status,
        wall_time=time.perf_counter() - started,
    )


def _full_solve(
    algorithm: str,
    spec: ScenarioSpec,
    batches: Sequence[Sequence[TaskVariation]],
    settings: OptimizerSettings,
    pipeline: LossPipeline,
    theta0: Optional[np.ndarray],
) -> OptimizerRun:
    theta = spec.theta0.project(spec.theta0.values if theta0 is None else theta0)
    start_theta = theta.copy()
    lo, hi = spec.theta0.lower_bounds, spec.theta0.upper_bounds
    all_dims = list(range(spec.d))
    history: List[HistoryRow] = []
    skipped = evaluations = 0
    for t, batch in enumerate(batches, start=1):
        started = time.perf_counter()
        fun = lambda x, b=batch: batch_task_loss(x, b, pipeline)
        try:
            first = fun(theta)
            evaluations += 1
            res = minimize_box(fun, theta, lo, hi, all_dims, settings, settings.step_scale, initial=first)
            evaluations += res.evaluations
            theta = res.theta
            history.append(_row(algorithm, t, theta, res.loss, res.grad, settings.step_scale, all_dims, 0, res.iterations, "ok", started))
        except NumericalBlowup as exc:
            skipped += 1
            logger.warning("%s: batch %d skipped (%s)", algorithm, t, exc)
            history.append(_row(algorithm, t, theta, float("nan"), np.zeros(spec.d), settings.step_scale, (), 0, 0, f"skipped:{exc.code}", started))
        else:
            logger.info("%s batch %d/%d: loss %.6g, %d inner iterations", algorithm, t, len(batches), res.loss, res.iterations)
    return OptimizerRun(algorithm, start_theta, theta, history, {"skipped_batches": skipped, "evaluations": evaluations})


def run_baseline_diffhand(
    spec: ScenarioSpec,
    batch: Sequence[TaskVariation],
    settings: OptimizerSettings,
    pipeline: Optional[LossPipeline] = None,
    theta0: Optional[np.ndarray] = None,
) -> OptimizerRun:
    """Full-dimensional bounded minimisation of one batch's task loss."""
    pipeline = pipeline or SimulationPipeline(spec)
    return _full_solve(BASELINE, spec, [batch], settings, pipeline, theta0)


def run_simple_continual(
    spec: ScenarioSpec,
    schedule: BatchSchedule,
    settings: OptimizerSettings,
    pipeline: Optional[LossPipeline] = None,
    theta0: Optional[np.ndarray] = None,
) -> OptimizerRun:
    """Warm-started full-dimensional task-loss minimisation, batch after batch."""
    pipeline = pipeline or SimulationPipeline(spec)
    run = _full_solve(SIMPLE, spec, schedule.batches, settings, pipeline, theta0)
    run.metadata["padded"] = schedule.padded
    return run


def run_ours(
    spec: ScenarioSpec,
    schedule: BatchSchedule,
    settings: OptimizerSettings,
    pipeline: Optional[LossPipeline] = None,
    theta0: Optional[np.ndarray] = None,
) -> OptimizerRun:
    pipeline = pipeline or SimulationPipeline(spec)
    d_prime = settings.d_prime or spec.d_prime
    state = OptimizerState(
        theta=spec.theta0.project(spec.theta0.values if theta0 is None else theta0),
        lr0=settings.step_scale,
        decay=settings.decay,
        alpha=settings.alpha,
    )
    start_theta = state.theta.copy()
    lo, hi = spec.theta0.lower_bounds, spec.theta0.upper_bounds
    rng = np.random.default_rng([settings.distill_seed, schedule.seed])
    D = DistillationSet()
    seen: List[TaskVariation] = []
    skipped = evaluations = 0

    for t, batch in enumerate(schedule.batches, start=1):
        started = time.perf_counter()
        theta_prev = state.theta.copy()
        fun = lambda x, b=batch, m=list(D.members), p=theta_prev: combined_loss(x, b, m, state.alpha, pipeline, theta_prev=p)
        step = state.learning_rate
        try:
            first = fun(theta_prev)
            evaluations += 1
            state.active_dims = select_dimensions(first.gradient(), state.visited_dims, d_prime)
            res = minimize_box(fun, theta_prev, lo, hi, sorted(state.active_dims), settings, step, initial=first)
            evaluations += res.evaluations
        except NumericalBlowup as exc:
            skipped += 1
            logger.warning("Ours: batch %d skipped (%s)", t, exc)
            state.history.append(_row(OURS, t, state.theta, float("nan"), np.zeros(spec.d), step, (), state.restart_count, 0, f"skipped:{exc.code}", started))
        else:
            state.theta = res.theta
            state.visited_dims |= state.active_dims
            state.history.append(_row(OURS, t, state.theta, res.loss, res.grad, step, state.active_dims, state.restart_count, res.iterations, "ok", started))
            logger.info(
                "Ours batch %d/%d: dims %s, loss %.6g, step scale %.4g",
                t, schedule.num_batches, sorted(state.active_dims), res.loss, step,
            )
            if len(state.visited_dims) == spec.d:
                state.restart()
                logger.info("sweep complete; restart %d, step scale now %.4g", state.restart_count, state.learning_rate)

        seen.extend(batch)
        D = refresh_distillation(seen, spec.M, rng)

    return OptimizerRun(
        OURS,
        start_theta,
        state.theta,
        state.history,
        {
            "padded": schedule.padded,
            "restart_count": state.restart_count,
            "skipped_batches": skipped,
            "evaluations": evaluations,
        },
    )
