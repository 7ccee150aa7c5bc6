import math

import numpy as np
import pytest

from tool_morph.config import OptimizerSettings, default_scenario
from tool_morph.continual import (
    OptimizerState,
    SimulationPipeline,
    batch_distill_loss,
    batch_task_loss,
    build_schedule,
    combined_loss,
    minimize_box,
    refresh_distillation,
    run_baseline_diffhand,
    run_ours,
    run_simple_continual,
    select_dimensions,
)
from tool_morph.diffsim import DiffScalar
from tool_morph.errors import EmptyCandidate, NumericalBlowup, OptimizationError, ScheduleError
from tool_morph.scenarios import build_scenario, sample_variations


class QuadraticPipeline:
    """Separable quadratic per variation: sum_k w_k (theta_k - c_k(variation))^2."""

    def __init__(self, spec, spread=0.0, blowup_indices=()):
        self.spec = spec
        lo, hi = spec.theta0.lower_bounds, spec.theta0.upper_bounds
        self.center = 0.5 * (lo + hi)
        self.span = hi - lo
        self.weights = np.linspace(0.5, 2.0, spec.d)
        self.spread = spread
        self.blowup_indices = set(blowup_indices)
        self.calls = 0

    def target(self, variation):
        offset = math.sin(1.0 + variation.index) * self.spread
        return self.center + offset * self.span

    def _quad(self, theta, c):
        gap = np.asarray(theta, dtype=float) - c
        return DiffScalar(float(np.sum(self.weights * gap * gap)), 2.0 * self.weights * gap)

    def task_losses(self, theta, variations):
        self.calls += 1
        if any(v.index in self.blowup_indices for v in variations):
            raise NumericalBlowup("stub blowup", step=3)
        return [self._quad(theta, self.target(v)) for v in variations]

    def distill_losses(self, theta, theta_prev, variations):
        return [self._quad(theta, np.asarray(theta_prev, dtype=float)) for _ in variations]


@pytest.fixture(scope="module")
def winding():
    return build_scenario(default_scenario("Winding"))


@pytest.fixture(scope="module")
def reaching():
    return build_scenario(default_scenario("Reaching")).with_horizon(20)


def _quadratic(w, c):
    w, c = np.asarray(w, dtype=float), np.asarray(c, dtype=float)
    return lambda x: DiffScalar(float(np.sum(w * (x - c) ** 2)), 2.0 * w * (x - c))


# -----------------------------
# Dimension selection
# -----------------------------

def test_select_dimensions_takes_largest_unvisited():
    assert select_dimensions([0.1, -3.0, 2.0, 0.5], set(), 2) == {1, 2}
    assert select_dimensions([0.1, -3.0, 2.0, 0.5], {1}, 2) == {2, 3}
    assert select_dimensions([1.0, 1.0, 1.0], set(), 2) == {0, 1}
    assert select_dimensions([0.0, 5.0, 1.0], {1, 2}, 2) == {0}


def test_select_dimensions_needs_a_candidate():
    with pytest.raises(EmptyCandidate):
        select_dimensions([1.0, 2.0], {0, 1}, 1)


def test_learning_rate_decays_per_restart():
    state = OptimizerState(theta=np.zeros(3), lr0=1.0, decay=math.exp(-1.0))
    state.visited_dims = {0, 1, 2}
    state.restart()
    state.restart()
    assert state.visited_dims == set()
    assert state.learning_rate == pytest.approx(math.exp(-2.0))


# -----------------------------
# Schedules
# -----------------------------

def test_schedule_partitions_variations(winding):
    source = sample_variations(winding, 10, seed=3)
    schedule = build_schedule(winding, 3, variations=source)
    assert schedule.num_batches == 2
    assert not schedule.padded
    keys = [v.key for batch in schedule.batches for v in batch]
    assert sorted(keys) == sorted(v.key for v in source)


def test_schedule_pads_the_last_batch(winding):
    source = sample_variations(winding, 7, seed=3)
    schedule = build_schedule(winding, 3, variations=source)
    assert schedule.padded
    assert [len(b) for b in schedule.batches] == [5, 5]
    last = [v.key for v in schedule.batches[-1]]
    assert len(set(last)) == 5


def test_schedule_is_reproducible(winding):
    a = build_schedule(winding, 5)
    b = build_schedule(winding, 5)
    assert [[v.key for v in batch] for batch in a.batches] == [[v.key for v in batch] for batch in b.batches]
    assert a.num_batches == winding.N // winding.M


def test_schedule_rejects_test_seeds(winding):
    with pytest.raises(ScheduleError):
        build_schedule(winding, 10_000, forbidden_seeds=[10_000])
    leaked = sample_variations(winding, 5, seed=10_000)
    with pytest.raises(ScheduleError):
        build_schedule(winding, 3, forbidden_seeds=[10_000], variations=leaked)


def test_refresh_distillation_draws_distinct_members(winding):
    seen = sample_variations(winding, 12, seed=0)
    D = refresh_distillation(seen, 5, np.random.default_rng(0))
    assert len(D) == 5
    assert len({v.key for v in D.members}) == 5
    assert len(refresh_distillation([], 5, np.random.default_rng(0))) == 0


# -----------------------------
# Batch losses
# -----------------------------

def test_batch_losses(winding):
    pipe = QuadraticPipeline(winding, spread=0.2)
    batch = sample_variations(winding, 3, seed=0)
    theta = np.array(winding.theta0.values)
    task = batch_task_loss(theta, batch, pipe)
    each = pipe.task_losses(theta, batch)
    assert float(task.value) == pytest.approx(np.mean([float(t.value) for t in each]))

    empty = batch_distill_loss(theta, theta, [], pipe)
    assert float(empty.value) == 0.0
    assert empty.gradient().shape == (winding.d,)

    prev = theta + 0.001
    combined = combined_loss(theta, batch, batch[:2], 0.1, pipe, theta_prev=prev)
    distill = batch_distill_loss(theta, prev, batch[:2], pipe)
    assert float(combined.value) == pytest.approx(float(task.value) + 0.1 * float(distill.value))
    assert float(combined_loss(theta, batch, batch[:2], 0.0, pipe).value) == float(task.value)

    with pytest.raises(ScheduleError):
        batch_task_loss(theta, [], pipe)
    with pytest.raises(OptimizationError):
        combined_loss(theta, batch, batch, -1.0, pipe, theta_prev=prev)
    with pytest.raises(OptimizationError):
        combined_loss(theta, batch, batch, 0.1, pipe)


# -----------------------------
# Inner solver
# -----------------------------

def test_minimize_box_finds_interior_minimum():
    fun = _quadratic([1.0, 3.0], [0.3, -0.2])
    res = minimize_box(fun, np.zeros(2), -np.ones(2), np.ones(2), [0, 1], OptimizerSettings(), 1.0)
    assert res.converged
    np.testing.assert_allclose(res.theta, [0.3, -0.2], atol=1e-6)
    assert res.loss <= float(fun(np.zeros(2)).value)


def test_minimize_box_stops_at_the_bound():
    fun = _quadratic([1.0, 1.0], [2.0, 0.5])
    res = minimize_box(fun, np.zeros(2), -np.ones(2), np.ones(2), [0, 1], OptimizerSettings(), 1.0)
    np.testing.assert_allclose(res.theta, [1.0, 0.5], atol=1e-6)
    assert np.all(res.theta <= 1.0)


def test_minimize_box_leaves_inactive_coordinates_alone():
    fun = _quadratic([1.0, 1.0, 1.0], [0.5, 0.5, 0.5])
    start = np.array([0.1, 0.2, 0.3])
    res = minimize_box(fun, start, -np.ones(3), np.ones(3), [1], OptimizerSettings(), 1.0)
    assert res.theta[0] == 0.1 and res.theta[2] == 0.3
    assert res.theta[1] == pytest.approx(0.5, abs=1e-6)


def test_minimize_box_never_increases_the_loss():
    seen = []
    base = _quadratic([1.0, 10.0], [0.9, -0.9])

    def fun(x):
        out = base(x)
        seen.append(float(out.value))
        return out

    settings = OptimizerSettings(max_inner_iter=5)
    res = minimize_box(fun, np.zeros(2), -np.ones(2), np.ones(2), [0, 1], settings, 5.0)
    assert res.loss < seen[0]


# -----------------------------
# Algorithms
# -----------------------------

def test_ours_bookkeeping(winding):
    schedule = build_schedule(winding, 0)
    settings = OptimizerSettings(step_scale=1.0)
    run = run_ours(winding, schedule, settings, pipeline=QuadraticPipeline(winding, spread=0.2))

    assert len(run.history) == 12
    for sweep in range(3):
        rows = run.history[4 * sweep:4 * sweep + 4]
        dims = [d for row in rows for d in row.active_dims]
        assert sorted(dims) == list(range(8))
        assert all(len(row.active_dims) == 2 for row in rows)
        assert all(row.restart_count == sweep for row in rows)
        assert all(row.step_scale == pytest.approx(math.exp(-sweep)) for row in rows)
    assert run.metadata["restart_count"] == 3

    previous = np.array(winding.theta0.values)
    lo, hi = winding.theta0.lower_bounds, winding.theta0.upper_bounds
    for row in run.history:
        theta = np.array(row.theta)
        frozen = [k for k in range(8) if k not in row.active_dims]
        np.testing.assert_array_equal(theta[frozen], previous[frozen])
        assert np.all(theta >= lo) and np.all(theta <= hi)
        previous = theta


def test_ours_converges_on_a_shared_minimum(winding):
    pipe = QuadraticPipeline(winding, spread=0.0)
    settings = OptimizerSettings(alpha=0.0, grad_tol=1e-10)
    run = run_ours(winding, build_schedule(winding, 1), settings, pipeline=pipe)
    np.testing.assert_allclose(run.theta_final, pipe.center, atol=1e-6)


@pytest.mark.parametrize("alpha", [0.0, 0.1])
def test_ours_counts_loss_evaluations(winding, alpha):
    schedule = build_schedule(winding, 3)
    pipe = QuadraticPipeline(winding, spread=0.2)
    run = run_ours(winding, schedule, OptimizerSettings(alpha=alpha), pipeline=pipe)
    assert run.metadata["evaluations"] == pipe.calls
    assert run.metadata["evaluations"] >= schedule.num_batches


def test_full_solves_count_loss_evaluations(winding):
    schedule = build_schedule(winding, 3)
    pipe = QuadraticPipeline(winding, spread=0.2)
    run = run_simple_continual(winding, schedule, OptimizerSettings(), pipeline=pipe)
    assert run.metadata["evaluations"] == pipe.calls

    before = pipe.calls
    single = run_baseline_diffhand(winding, schedule.batches[0], OptimizerSettings(), pipeline=pipe)
    assert single.metadata["evaluations"] == pipe.calls - before


def test_start_outside_the_box_is_projected(winding):
    schedule = build_schedule(winding, 5)
    lo, hi = winding.theta0.lower_bounds, winding.theta0.upper_bounds
    start = np.where(np.arange(winding.d) % 2 == 0, hi + 0.3, lo - 0.3)
    pipe = QuadraticPipeline(winding, spread=0.2)
    for run in (
        run_ours(winding, schedule, OptimizerSettings(), pipeline=pipe, theta0=start),
        run_simple_continual(winding, schedule, OptimizerSettings(), pipeline=pipe, theta0=start),
    ):
        np.testing.assert_array_equal(run.theta_initial, np.clip(start, lo, hi))
        for row in run.history:
            assert np.all(np.array(row.theta) >= lo) and np.all(np.array(row.theta) <= hi)


def test_ours_reduces_to_simple_continual(winding):
    schedule = build_schedule(winding, 2)
    settings = OptimizerSettings(alpha=0.0, d_prime=winding.d, decay=1.0)
    pipe = QuadraticPipeline(winding, spread=0.2)
    ours = run_ours(winding, schedule, settings, pipeline=pipe)
    simple = run_simple_continual(winding, schedule, settings, pipeline=pipe)
    assert [row.theta for row in ours.history] == [row.theta for row in simple.history]

    single = run_baseline_diffhand(winding, schedule.batches[0], settings, pipeline=pipe)
    assert single.history[0].theta == ours.history[0].theta


def test_simple_continual_tracks_the_latest_batch(winding):
    schedule = build_schedule(winding, 4)
    pipe = QuadraticPipeline(winding, spread=0.2)
    run = run_simple_continual(winding, schedule, OptimizerSettings(), pipeline=pipe)
    last = np.mean([pipe.target(v) for v in schedule.batches[-1]], axis=0)
    np.testing.assert_allclose(run.theta_final, last, atol=1e-5)

    previous = np.array(winding.theta0.values)
    for row, batch in zip(run.history, schedule.batches):
        assert row.train_loss <= float(batch_task_loss(previous, batch, pipe).value)
        previous = np.array(row.theta)


def test_targets_outside_the_box_end_on_the_bounds(winding):
    pipe = QuadraticPipeline(winding, spread=0.0)
    pipe.center = winding.theta0.upper_bounds + 0.05
    run = run_baseline_diffhand(winding, sample_variations(winding, 5, seed=0), OptimizerSettings(), pipeline=pipe)
    np.testing.assert_allclose(run.theta_final, winding.theta0.upper_bounds, atol=1e-9)


def test_blowup_skips_the_batch(winding):
    schedule = build_schedule(winding, 6)
    bad = schedule.batches[1][0].index
    pipe = QuadraticPipeline(winding, spread=0.2, blowup_indices=[bad])
    run = run_ours(winding, schedule, OptimizerSettings(), pipeline=pipe)
    assert run.history[1].status == "skipped:numerical_blowup"
    assert run.history[1].theta == run.history[0].theta
    assert run.metadata["skipped_batches"] == sum(
        1 for batch in schedule.batches if any(v.index == bad for v in batch)
    )


# -----------------------------
# Simulation pipeline
# -----------------------------

def test_reference_rollouts_are_cached(reaching):
    pipe = SimulationPipeline(reaching)
    variations = sample_variations(reaching, 3, seed=0)
    theta = reaching.theta0.values
    pipe.reference_trajectories(theta, variations)
    pipe.reference_trajectories(theta, variations)
    assert pipe.rollouts == 3
    pipe.reference_trajectories(np.array([0.11, 0.08]), variations)
    assert pipe.rollouts == 6


def test_worker_pool_keeps_variation_order(reaching):
    variations = sample_variations(reaching, 4, seed=0)
    theta = np.array([0.11, 0.07])
    serial = SimulationPipeline(reaching, jobs=1).task_losses(theta, variations)
    pooled = SimulationPipeline(reaching, jobs=2).task_losses(theta, variations)
    for a, b in zip(serial, pooled):
        assert float(a.value) == float(b.value)
        np.testing.assert_array_equal(a.gradient(), b.gradient())
