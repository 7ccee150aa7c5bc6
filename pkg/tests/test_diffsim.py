from dataclasses import replace

import numpy as np
import pytest

from tool_morph.diffsim import (
    BodyState,
    DiffScalar,
    GroundContact,
    PointSet,
    SpringJoints,
    Trajectory,
    World,
    WorldConfig,
    contact_force,
    polygon_signed_distance,
    seed_shape,
    stack,
    step,
)
from tool_morph.errors import ConfigError, DimensionMismatch, MissingChannel, NumericalBlowup
from tool_morph.geometry import DeformedShape

SQUARE = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])


def _expr(x, y):
    a = (x.sin() * y.exp() + x * x / (y + 2.0)).tanh()
    b = (x * x + 1.0).sqrt() + (y + 2.0).log() + abs(y) - 1.0 / x + x ** 3
    return a * b + (x * y).sigmoid() + (x - y).softplus(3.0) + x.cos()


def _body(position, velocity=(0.0, 0.0), mass=1.0, d=1, kinematic=False):
    b = BodyState.at_rest([position], [0.0], [mass], [1.0], d, kinematic=[kinematic])
    return replace(b, linear_velocity=DiffScalar.constant(np.array([velocity], dtype=float), d))


# -----------------------------
# Forward-mode scalar
# -----------------------------

def test_chain_rule_matches_finite_differences():
    x0, y0 = 0.7, -0.3
    x = DiffScalar(x0, [1.0, 0.0])
    y = DiffScalar(y0, [0.0, 1.0])
    grad = _expr(x, y).gradient()

    def f(a, b):
        return float(_expr(DiffScalar.constant(a, 0), DiffScalar.constant(b, 0)).value)

    h = 1e-6
    fd = [(f(x0 + h, y0) - f(x0 - h, y0)) / (2 * h), (f(x0, y0 + h) - f(x0, y0 - h)) / (2 * h)]
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


def test_array_ops_and_reductions_carry_tangents():
    v = DiffScalar(np.array([1.0, 2.0, 3.0]), np.eye(3))
    s = (v * v).sum()
    np.testing.assert_allclose(s.gradient(), [2.0, 4.0, 6.0])
    m = (np.array([1.0, 1.0, 2.0]) * v).mean()
    np.testing.assert_allclose(m.gradient(), [1 / 3, 1 / 3, 2 / 3])


def test_ndarray_on_the_left_stays_a_diffscalar():
    v = DiffScalar(np.array([1.0, 2.0]), np.eye(2))
    out = np.array([3.0, 4.0]) - v
    assert isinstance(out, DiffScalar)
    np.testing.assert_allclose(out.tangents, -np.eye(2))


def test_mixed_tangent_widths_are_rejected():
    with pytest.raises(DimensionMismatch):
        DiffScalar(1.0, [1.0]) + DiffScalar(1.0, [1.0, 0.0])
    with pytest.raises(DimensionMismatch):
        DiffScalar(np.zeros(3), np.zeros((2, 1)))
    with pytest.raises(DimensionMismatch):
        DiffScalar(np.zeros(3), d=1).gradient()


def test_stack_and_indexing():
    rows = [DiffScalar(np.array([1.0, 2.0]), np.ones((2, 3))), DiffScalar(np.array([3.0, 4.0]), np.zeros((2, 3)))]
    s = stack(rows)
    assert s.shape == (2, 2)
    assert s.tangents.shape == (2, 2, 3)
    np.testing.assert_array_equal(s[1, 0].value, 3.0)
    np.testing.assert_array_equal(s[0].tangents, np.ones((2, 3)))


# -----------------------------
# Shape seeding and contact
# -----------------------------

def test_seed_shape_uses_vertex_sensitivities():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    sens = np.random.default_rng(1).normal(size=(3, 2, 4))
    tool = seed_shape(DeformedShape(verts, sens))
    assert tool.d == 4
    np.testing.assert_array_equal(tool.tangents, sens)
    with pytest.raises(DimensionMismatch):
        seed_shape(DeformedShape(verts, sens), d=3)
    with pytest.raises(DimensionMismatch):
        seed_shape(DeformedShape(verts, np.zeros((4, 2, 4))))


def test_signed_distance_edge_and_vertex_regions():
    poly = DiffScalar.constant(SQUARE, 0)
    pts = DiffScalar.constant(np.array([[0.0, 0.45], [1.0, 1.0], [0.0, 0.8]]), 0)
    sd, n = polygon_signed_distance(pts, poly)
    np.testing.assert_allclose(sd.value, [-0.05, np.sqrt(0.5), 0.3], atol=1e-12)
    np.testing.assert_allclose(n.value[0], [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(n.value[1], [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-12)


def test_contact_force_vanishes_far_from_polygon():
    cfg = WorldConfig()
    f = contact_force(DiffScalar.constant(np.array([3.0, 0.0]), 0), DiffScalar.constant(SQUARE, 0), cfg)
    assert np.max(np.abs(f.value)) < 1e-12


def test_static_penetration_pushes_out_with_stiffness_times_depth():
    cfg = WorldConfig(contact_stiffness=1e4)
    f = contact_force(DiffScalar.constant(np.array([0.0, 0.45]), 0), DiffScalar.constant(SQUARE, 0), cfg)
    assert abs(f.value[0]) < 1e-12
    assert f.value[1] == pytest.approx(1e4 * 0.05, rel=1e-3)


def test_contact_force_gradient_matches_finite_differences():
    cfg = WorldConfig(contact_stiffness=1e4, contact_damping=1.0)
    p0 = np.array([0.1, 0.45])
    top = np.zeros((4, 2, 1))
    top[[2, 3], 1, 0] = 1.0

    def force(p, shift, d_point, d_poly):
        pt = DiffScalar(p, np.hstack([d_point, np.zeros((2, 1))]))
        poly = DiffScalar(SQUARE + shift * top[..., 0], np.concatenate([np.zeros((4, 2, 2)), d_poly], axis=-1))
        return contact_force(pt, poly, cfg)

    f = force(p0, 0.0, np.eye(2), top)
    h = 1e-6

    def value(p, shift):
        return force(p, shift, np.zeros((2, 2)), np.zeros((4, 2, 1))).value

    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (value(p0 + e, 0.0) - value(p0 - e, 0.0)) / (2 * h)
        np.testing.assert_allclose(f.tangents[:, k], fd, rtol=1e-4, atol=1e-4)
    fd = (value(p0, h) - value(p0, -h)) / (2 * h)
    np.testing.assert_allclose(f.tangents[:, 2], fd, rtol=1e-4, atol=1e-4)


# -----------------------------
# Integrator
# -----------------------------

def test_world_config_validation():
    with pytest.raises(ConfigError):
        WorldConfig(dt=0.0)
    with pytest.raises(ConfigError):
        WorldConfig(horizon=0)


def test_ballistic_body_matches_semi_implicit_closed_form():
    g, dt, n = -9.81, 1e-3, 100
    cfg = WorldConfig(gravity=(0.0, g), dt=dt, horizon=n)
    world = World(bodies=_body((0.0, 1.0), velocity=(1.0, 2.0), mass=2.0))
    for _ in range(n):
        world = step(world, cfg)
    pos = world.bodies.position.value[0]
    assert pos[0] == pytest.approx(n * dt * 1.0, abs=1e-12)
    assert pos[1] == pytest.approx(1.0 + n * dt * 2.0 + g * dt * dt * n * (n + 1) / 2.0, abs=1e-12)
    assert world.step_index == n


def test_forceless_world_keeps_its_state(short_world):
    world = World(bodies=_body((0.3, -0.2)))
    start = world.bodies.position.value.copy()
    for _ in range(short_world.horizon):
        world = step(world, short_world)
    np.testing.assert_array_equal(world.bodies.position.value, start)
    np.testing.assert_array_equal(world.bodies.angle.value, [0.0])


def test_kinematic_body_ignores_forces():
    cfg = WorldConfig(gravity=(0.0, -9.81))
    world = World(bodies=_body((0.0, 0.0), velocity=(0.5, 0.0), kinematic=True))
    world = step(world, cfg)
    np.testing.assert_allclose(world.bodies.linear_velocity.value, [[0.5, 0.0]])


def test_point_mass_settles_at_weight_over_stiffness():
    m, k = 1.0, 1e4
    cfg = WorldConfig(
        gravity=(0.0, -9.81), dt=1e-3, contact_stiffness=k, contact_damping=100.0, contact_sharpness=1e6, horizon=1000
    )
    bodies = _body((0.0, 0.0), mass=m)
    points = PointSet(bodies=np.array([0]), local_points=DiffScalar.constant(np.zeros((1, 2)), 1), radius=np.zeros(1))
    world = World(bodies=bodies, ground=(GroundContact(points=points, height=0.0),))
    for _ in range(cfg.horizon):
        world = step(world, cfg)
    expected = m * 9.81 / k
    assert -world.bodies.position.value[0, 1] == pytest.approx(expected, rel=0.02)


def test_spring_oscillator_energy_drift_stays_small():
    k, m, dt = 25.0, 1.0, 1e-3
    cfg = WorldConfig(gravity=(0.0, 0.0), dt=dt, horizon=2000)
    bodies = BodyState.concat([_body((0.2, 0.0), mass=m), _body((0.0, 0.0), kinematic=True)])
    spring = SpringJoints(
        body_a=np.array([0]), anchor_a=np.zeros((1, 2)), body_b=np.array([1]), anchor_b=np.zeros((1, 2)),
        stiffness=k, damping=0.0,
    )
    world = World(bodies=bodies, joints=(spring,))
    e0 = 0.5 * k * 0.2 ** 2
    worst = 0.0
    for _ in range(cfg.horizon):
        world = step(world, cfg)
        x = world.bodies.position.value[0]
        v = world.bodies.linear_velocity.value[0]
        energy = 0.5 * m * v @ v + 0.5 * k * x @ x
        worst = max(worst, abs(energy - e0) / e0)
    assert worst < 0.01


def test_blowup_reports_the_step():
    cfg = WorldConfig(gravity=(0.0, 0.0), blowup_limit=1.0)
    world = World(bodies=_body((0.0, 0.0), velocity=(0.5, 0.0)))
    world = step(world, cfg)
    with pytest.raises(NumericalBlowup) as info:
        step(replace(world, bodies=replace(world.bodies, linear_velocity=DiffScalar.constant([[np.nan, 0.0]], 1))), cfg)
    assert info.value.step == 2


def test_trajectory_missing_channel():
    traj = Trajectory(channels={"h": DiffScalar.constant(np.zeros(3), 1)}, initial={}, horizon=3)
    with pytest.raises(MissingChannel):
        traj.channel("phi")
    with pytest.raises(MissingChannel):
        traj.initial_value("h")
