"""
The four manipulation scenarios as planar scenes.

Winding   side view, gravity; a 15-link rope dropped onto the tool, which is
          held at a sampled rotation and rocked about its axis.
Flipping  side view, ground at y = 0; a pointed finger (the tool) pushes a
          box over its far bottom corner.
Pushing   top-down, no gravity; the tool is a pusher tracking a zig-zag path
          that drives a pea towards the opening of a scoop.
Reaching  two-link arm whose link lengths are read off the deformed outline;
          only used for loss-landscape slices.

Each scene is a model object registered under its scenario name; the
simulator's rollout drives it through initial_world / actuate / record.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Type, Union

import numpy as np

from tool_morph.config import PolicySettings, ScenarioSettings
from tool_morph.diffsim import (
    BodyState,
    ContactGroup,
    DiffScalar,
    GroundContact,
    PointSet,
    PolygonShape,
    SpringJoints,
    Trajectory,
    World,
    WorldConfig,
    dot2,
    stack,
    where,
)
from tool_morph.errors import ConfigError, HorizonMismatch, SimulationError
from tool_morph.geometry import (
    CageParameterization,
    DeformedShape,
    MorphParams,
    ToolShape,
    build_tool_shape,
    deform,
    densify_polygon,
)

logger = logging.getLogger("tool_morph.scenarios")

HALF_PI = 0.5 * math.pi


# -----------------------------
# Domain types
# -----------------------------

@dataclass(frozen=True, eq=False)
class Policy:
    """Scripted open-loop action table, one row per step, entries in [-1, 1]."""

    kind: str
    table: np.ndarray

    def __post_init__(self) -> None:
        table = np.asarray(self.table, dtype=float)
        if table.ndim != 2:
            raise ConfigError(f"policy table must be 2D, got shape {table.shape}", "scenario.policy")
        if np.any(np.abs(table) > 1.0):
            raise ConfigError("policy actions must lie in [-1, 1]", "scenario.policy")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def length(self) -> int:
        return int(self.table.shape[0])

    def actions(self, horizon: int) -> np.ndarray:
        if horizon > self.length:
            raise SimulationError(f"{self.kind} policy has {self.length} steps, horizon is {horizon}")
        return self.table[:horizon]


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    id: str
    N: int
    M: int
    d: int
    d_prime: int
    horizon: int
    theta0: MorphParams
    cage_param: CageParameterization
    tool: ToolShape
    loss_coefficients: Dict[str, float]
    success_thresholds: Dict[str, float]
    policy: Policy
    world: WorldConfig
    rng_seed: int
    model: "ScenarioModel"
    settings: ScenarioSettings

    def params(self, theta: Sequence[float]) -> MorphParams:
        return self.theta0.with_values(theta)

    def deform(self, theta: Sequence[float]) -> DeformedShape:
        return deform(self.tool, self.params(theta))

    def with_horizon(self, horizon: int) -> "ScenarioSpec":
        return replace(self, horizon=horizon, world=replace(self.world, horizon=horizon))


@dataclass(frozen=True, eq=False)
class TaskVariation:
    """One fixed initial state s0 of a scenario (a restricted MDP)."""

    scenario: ScenarioSpec
    index: int
    seed: int
    initial_state: Mapping[str, float]

    @property
    def key(self) -> Tuple[int, int]:
        return (self.seed, self.index)


# -----------------------------
# Policies
# -----------------------------

def _segment_table(segments: List[List[float]], horizon: int) -> np.ndarray:
    if not segments:
        raise ConfigError("policy needs at least one segment", "scenario.policy.segments")
    ends = np.array([row[0] for row in segments])
    values = np.array([row[1:] for row in segments], dtype=float)
    frac = np.arange(1, horizon + 1) / horizon
    idx = np.minimum(np.searchsorted(ends, frac - 1e-12), len(segments) - 1)
    return values[idx]


def _zigzag_table(waypoints: List[Tuple[float, float]], speed: float, horizon: int, dt: float) -> np.ndarray:
    pts = np.asarray(waypoints, dtype=float)
    if pts.shape[0] < 2:
        raise ConfigError("zig-zag policy needs at least two waypoints", "scenario.policy.waypoints")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, arc[-1], horizon + 1)
    path = np.stack([np.interp(s, arc, pts[:, 0]), np.interp(s, arc, pts[:, 1])], axis=1)
    return np.clip(np.diff(path, axis=0) / (speed * dt), -1.0, 1.0)


def build_policy(settings: PolicySettings, horizon: int, dt: float) -> Policy:
    if settings.kind == "CircularWinding":
        tau = np.arange(1, horizon + 1)
        table = np.sin(2.0 * math.pi * tau / horizon)[:, None]
    elif settings.kind == "ZigZagPushing":
        table = _zigzag_table(settings.waypoints, settings.speed, horizon, dt)
    else:
        table = _segment_table(settings.segments, horizon)
    return Policy(kind=settings.kind, table=table)


# -----------------------------
# Helpers
# -----------------------------

def _set_rows(q: DiffScalar, index: int, value: np.ndarray) -> DiffScalar:
    """Copy of q with row ``index`` replaced by a constant (kinematic drive)."""
    v = q.value.copy()
    t = np.array(q.tangents)
    v[index] = value
    t[index] = 0.0
    return DiffScalar(v, t)


def _same_horizon(new: Trajectory, old: Trajectory) -> None:
    if new.horizon != old.horizon:
        raise HorizonMismatch(f"trajectories have horizons {new.horizon} and {old.horizon}")


def _norm(v: DiffScalar) -> DiffScalar:
    """Euclidean norm over the last axis with a zero (not NaN) derivative at 0."""
    sq = dot2(v, v)
    nonzero = sq.value > 0.0
    one = DiffScalar.constant(np.ones(sq.shape), sq.d)
    r = where(nonzero, sq, one).sqrt()
    return where(nonzero, r, DiffScalar.constant(np.zeros(sq.shape), sq.d))


def _as_diff(x: Union[DiffScalar, float]) -> DiffScalar:
    return x if isinstance(x, DiffScalar) else DiffScalar.constant(float(x), 0)


# -----------------------------
# Losses
# -----------------------------

def winding_task_loss(traj: Trajectory) -> DiffScalar:
    """Sum over steps of (h_tau - h_0)^2, h the rope's centre-of-mass height."""
    h = traj.channel("h")
    h0 = traj.initial_value("h")
    gap = h - h0
    return (gap * gap).sum()


def winding_distill_loss(traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
    _same_horizon(traj_new, traj_old)
    gap = traj_new.channel("h") - traj_old.channel("h").value
    return (gap * gap).mean()


def flipping_task_loss(traj: Trajectory, coeffs: Mapping[str, float]) -> DiffScalar:
    H = traj.horizon
    c_u = coeffs.get("c_u", 5.0)
    c_flip = coeffs.get("c_flip", 50.0)
    c_touch = coeffs.get("c_touch", 1.0)

    phi = traj.channel("phi")
    u = traj.channel("u")
    p = traj.channel("p")
    p_box = traj.initial_value("box").value

    # touch term only during the first half of the horizon
    touch_weight = np.where(np.arange(1, H + 1) < H / 2.0, c_touch, 0.0)
    flip = (phi[H - 1] - HALF_PI) ** 2 * c_flip
    effort = dot2(u, u).sum() * c_u
    gap = p - p_box
    touch = (dot2(gap, gap) * touch_weight).sum()
    return flip + effort + touch


def flipping_distill_loss(traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
    _same_horizon(traj_new, traj_old)
    du = traj_new.channel("u") - traj_old.channel("u").value
    dp = traj_new.channel("p") - traj_old.channel("p").value
    dphi = traj_new.channel("phi") - traj_old.channel("phi").value
    return (dot2(du, du) + dot2(dp, dp) + dphi * dphi).mean()


def pushing_task_loss(final_pea_x: Union[DiffScalar, float], x_scoop: float) -> DiffScalar:
    """Quadratic hinge on the pea's lateral offset at the scoop line: 0 inside the opening."""
    if x_scoop <= 0:
        raise ConfigError("x_scoop must be > 0", "scenario.loss.x_scoop")
    x = _as_diff(final_pea_x)
    gap = abs(x) - x_scoop
    if gap.value <= 0.0:
        return DiffScalar.constant(0.0, x.d)
    return gap * gap


def pushing_eval_step(traj: Trajectory, y_scoop: float) -> int:
    """0-based index of the first step with pea y >= y_scoop, else the last step."""
    y = traj.channel("position").value[:, 1]
    hits = np.flatnonzero(y >= y_scoop)
    return int(hits[0]) if hits.size else traj.horizon - 1


def pushing_distill_loss(traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
    # un-normalised sum over steps
    _same_horizon(traj_new, traj_old)
    gap = traj_new.channel("position") - traj_old.channel("position").value
    return dot2(gap, gap).sum()


def reaching_task_loss(
    traj: Trajectory,
    coeffs: Mapping[str, float],
    targets: Optional[np.ndarray] = None,
) -> DiffScalar:
    """c_u * sum |u|^2 + c_p * sum |p - p_hat| (the position term is not squared)."""
    c_u = coeffs.get("c_u", 0.1)
    c_p = coeffs.get("c_p", 10.0)
    u = traj.channel("u")
    p = traj.channel("p")
    p_hat = traj.channel("target").value if targets is None else np.asarray(targets, dtype=float)
    if p_hat.shape != p.shape:
        raise HorizonMismatch(f"targets have shape {p_hat.shape}, trajectory positions {p.shape}")
    return dot2(u, u).sum() * c_u + _norm(p - p_hat).sum() * c_p


def reaching_distill_loss(traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
    _same_horizon(traj_new, traj_old)
    gap = traj_new.channel("p") - traj_old.channel("p").value
    return dot2(gap, gap).mean()


def success(scenario: ScenarioSpec, traj: Trajectory) -> bool:
    return scenario.model.success(traj)


# -----------------------------
# Scene models
# -----------------------------

class ScenarioModel:
    """Base for scene models; subclasses register themselves by scenario name."""

    name: str = ""
    channels: Tuple[str, ...] = ()
    scene_defaults: Dict[str, float] = {}

    def __init__(self, settings: ScenarioSettings):
        self.settings = settings
        self.scene = {**self.scene_defaults, **settings.scene}
        self.region = dict(settings.region)
        self.coeffs = dict(settings.loss)
        self.thresholds = dict(settings.success)
        self.speed = settings.policy.speed

    def sample_state(self, rng: np.random.Generator) -> Dict[str, float]:
        raise NotImplementedError

    def initial_world(self, variation: TaskVariation, tool: DiffScalar, cfg: WorldConfig) -> World:
        raise NotImplementedError

    def actuate(self, world: World, tau: int, action: np.ndarray, cfg: WorldConfig) -> World:
        raise NotImplementedError

    def record(self, world: World, tau: int, action: np.ndarray) -> Dict[str, DiffScalar]:
        raise NotImplementedError

    def task_loss(self, traj: Trajectory) -> DiffScalar:
        raise NotImplementedError

    def distill_loss(self, traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
        raise NotImplementedError

    def success(self, traj: Trajectory) -> bool:
        raise NotImplementedError


MODEL_REGISTRY: Dict[str, Type[ScenarioModel]] = {}


def register_model(cls: Type[ScenarioModel]) -> Type[ScenarioModel]:
    MODEL_REGISTRY[cls.name] = cls
    return cls


@register_model
class WindingModel(ScenarioModel):
    name = "Winding"
    channels = ("h", "u")
    scene_defaults = {
        "links": 15,
        "link_length": 0.012,
        "link_mass": 0.05,
        "point_radius": 0.003,
        "drop_height": 0.002,
        "release_speed": 0.6,
        "air_drag": 0.05,
    }

    @property
    def n_links(self) -> int:
        return int(self.scene["links"])

    def sample_state(self, rng: np.random.Generator) -> Dict[str, float]:
        lo = self.region.get("angle_low", 0.0)
        hi = self.region.get("angle_high", 2.0 * math.pi)
        return {"psi": float(rng.uniform(lo, hi))}

    @staticmethod
    def reachable_top(spec: ScenarioSpec, psi: float) -> float:
        """Highest world y any theta in the box can give the tool held at angle psi.

        The boundary is affine in theta, so per vertex the maximum sits at a
        corner of the box and is found coordinate by coordinate.
        """
        c, s = math.cos(psi), math.sin(psi)
        base = np.asarray(spec.tool.boundary)
        up = s * spec.tool.sensitivities[:, 0, :] + c * spec.tool.sensitivities[:, 1, :]
        lo = spec.theta0.lower_bounds - spec.theta0.values
        hi = spec.theta0.upper_bounds - spec.theta0.values
        reach = np.maximum(up * lo, up * hi).sum(axis=1)
        return float(np.max(s * base[:, 0] + c * base[:, 1] + reach))

    def initial_world(self, variation: TaskVariation, tool: DiffScalar, cfg: WorldConfig) -> World:
        # start height is theta-independent, so s0 carries no tangents
        n, L, m = self.n_links, self.scene["link_length"], self.scene["link_mass"]
        d = tool.d
        psi = variation.initial_state["psi"]
        top = self.reachable_top(variation.scenario, psi) + self.scene["point_radius"]

        x = (np.arange(n) - 0.5 * (n - 1)) * L
        centres = np.stack([x, np.full(n, top + self.scene["drop_height"])], axis=1)
        rope = BodyState.at_rest(centres, np.zeros(n), np.full(n, m), np.full(n, m * L * L / 12.0), d)
        release = np.tile([0.0, -self.scene["release_speed"]], (n, 1))
        rope = replace(rope, linear_velocity=DiffScalar.constant(release, d))
        holder = BodyState.at_rest([[0.0, 0.0]], [psi], [1.0], [1.0], d, kinematic=[True])
        bodies = BodyState.concat([rope, holder])

        half = np.array([0.5 * L, 0.0])
        joints = SpringJoints(
            body_a=np.arange(n - 1),
            anchor_a=np.tile(half, (n - 1, 1)),
            body_b=np.arange(1, n),
            anchor_b=np.tile(-half, (n - 1, 1)),
            stiffness=cfg.joint_stiffness,
            damping=cfg.joint_damping,
        )
        local = np.tile(np.array([[-0.5 * L, 0.0], [0.0, 0.0], [0.5 * L, 0.0]]), (n, 1))
        points = PointSet(
            bodies=np.repeat(np.arange(n), 3),
            local_points=DiffScalar.constant(local, d),
            radius=np.full(3 * n, self.scene["point_radius"]),
        )
        contact = ContactGroup(points=points, polygon=PolygonShape(body=n, local_vertices=tool))
        drag = np.append(np.full(n, self.scene["air_drag"]), 0.0)
        return World(bodies=bodies, contacts=(contact,), joints=(joints,), linear_drag=drag)

    def actuate(self, world: World, tau: int, action: np.ndarray, cfg: WorldConfig) -> World:
        omega = _set_rows(world.bodies.angular_velocity, self.n_links, self.speed * float(action[0]))
        return replace(world, bodies=replace(world.bodies, angular_velocity=omega))

    def record(self, world: World, tau: int, action: np.ndarray) -> Dict[str, DiffScalar]:
        rope_y = world.bodies.position[: self.n_links, 1]
        return {"h": rope_y.mean(), "u": DiffScalar.constant(action, world.d)}

    def task_loss(self, traj: Trajectory) -> DiffScalar:
        return winding_task_loss(traj)

    def distill_loss(self, traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
        return winding_distill_loss(traj_new, traj_old)

    def success(self, traj: Trajectory) -> bool:
        h = traj.channel("h").value
        h0 = float(traj.initial_value("h").value)
        return bool(h[-1] >= h0 - self.thresholds.get("drop_tol", 0.05))


@register_model
class FlippingModel(ScenarioModel):
    name = "Flipping"
    channels = ("phi", "u", "p", "box")
    scene_defaults = {"box_size": 0.05, "box_mass": 0.2, "finger_x": 0.065, "finger_y": 0.04}

    def sample_state(self, rng: np.random.Generator) -> Dict[str, float]:
        off = self.region.get("offset", 2.0)
        yaw = self.region.get("yaw", HALF_PI)
        return {
            "ox": float(rng.uniform(-off, off)),
            "oy": float(rng.uniform(-off, off)),
            "yaw": float(rng.uniform(-yaw, yaw)),
        }

    def initial_world(self, variation: TaskVariation, tool: DiffScalar, cfg: WorldConfig) -> World:
        d = tool.d
        side, mass = self.scene["box_size"], self.scene["box_mass"]
        st = variation.initial_state
        tilt = st["yaw"] * self.region.get("tilt_scale", 0.05)
        half = 0.5 * side
        box_x = st["ox"] * self.region.get("offset_scale_x", 0.01)
        box_y = half * (abs(math.cos(tilt)) + abs(math.sin(tilt)))
        finger = (self.scene["finger_x"], self.scene["finger_y"] + st["oy"] * self.region.get("offset_scale_y", 0.005))

        box = BodyState.at_rest([[box_x, box_y]], [tilt], [mass], [mass * side * side / 6.0], d)
        holder = BodyState.at_rest([finger], [0.0], [1.0], [1.0], d, kinematic=[True])
        bodies = BodyState.concat([box, holder])

        corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
        box_poly = PolygonShape(body=0, local_vertices=DiffScalar.constant(corners, d))
        corner_points = PointSet(bodies=np.zeros(4, dtype=int), local_points=DiffScalar.constant(corners, d), radius=np.zeros(4))
        tool_points = PointSet(bodies=np.ones(len(tool), dtype=int), local_points=tool, radius=np.zeros(len(tool)))
        contacts = (
            ContactGroup(points=corner_points, polygon=PolygonShape(body=1, local_vertices=tool)),
            ContactGroup(points=tool_points, polygon=box_poly),
        )
        ground = (GroundContact(points=corner_points, height=0.0),)
        return World(bodies=bodies, contacts=contacts, ground=ground, extras={"tip": tool[0:1]})

    def actuate(self, world: World, tau: int, action: np.ndarray, cfg: WorldConfig) -> World:
        vel = _set_rows(world.bodies.linear_velocity, 1, self.speed * np.asarray(action, dtype=float))
        return replace(world, bodies=replace(world.bodies, linear_velocity=vel))

    def record(self, world: World, tau: int, action: np.ndarray) -> Dict[str, DiffScalar]:
        tip, _ = world.bodies.world_points(np.array([1]), world.extras["tip"])
        return {
            "phi": world.bodies.angle[0],
            "u": DiffScalar.constant(action, world.d),
            "p": tip[0],
            "box": world.bodies.position[0],
        }

    def task_loss(self, traj: Trajectory) -> DiffScalar:
        return flipping_task_loss(traj, self.coeffs)

    def distill_loss(self, traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
        return flipping_distill_loss(traj_new, traj_old)

    def success(self, traj: Trajectory) -> bool:
        phi_H = float(traj.channel("phi").value[-1])
        return bool(abs(phi_H - HALF_PI) <= self.thresholds.get("angle_tol", 0.1))


@register_model
class PushingModel(ScenarioModel):
    name = "Pushing"
    channels = ("position", "pusher", "u")
    scene_defaults = {
        "pea_mass": 0.02,
        "pea_radius": 0.01,
        "pea_drag": 0.2,
        "pusher_mass": 0.5,
        "kp": 2000.0,
        "kp_angle": 5.0,
    }

    def __init__(self, settings: ScenarioSettings):
        super().__init__(settings)
        if not settings.policy.waypoints:
            raise ConfigError("Pushing needs policy waypoints", "scenario.policy.waypoints")
        self.start = np.asarray(settings.policy.waypoints[0], dtype=float)
        corners = np.asarray(settings.boundary, dtype=float)
        w, h = corners.max(axis=0) - corners.min(axis=0)
        m = self.scene["pusher_mass"]
        self.pusher_inertia = m * (w * w + h * h) / 12.0
        self.kd = 2.0 * math.sqrt(self.scene["kp"] * m)
        self.kd_angle = 2.0 * math.sqrt(self.scene["kp_angle"] * self.pusher_inertia)

    def sample_state(self, rng: np.random.Generator) -> Dict[str, float]:
        cx = self.region.get("center_x", 0.0)
        cy = self.region.get("center_y", 0.01)
        a = self.region.get("half_size", 0.015)
        return {"pea_x": float(rng.uniform(cx - a, cx + a)), "pea_y": float(rng.uniform(cy - a, cy + a))}

    def initial_world(self, variation: TaskVariation, tool: DiffScalar, cfg: WorldConfig) -> World:
        d = tool.d
        r, m_pea = self.scene["pea_radius"], self.scene["pea_mass"]
        st = variation.initial_state
        pusher = BodyState.at_rest([self.start], [0.0], [self.scene["pusher_mass"]], [self.pusher_inertia], d)
        pea = BodyState.at_rest([[st["pea_x"], st["pea_y"]]], [0.0], [m_pea], [0.5 * m_pea * r * r], d)
        points = PointSet(bodies=np.array([1]), local_points=DiffScalar.constant(np.zeros((1, 2)), d), radius=np.array([r]))
        contact = ContactGroup(points=points, polygon=PolygonShape(body=0, local_vertices=tool))
        return World(
            bodies=BodyState.concat([pusher, pea]),
            contacts=(contact,),
            linear_drag=np.array([0.0, self.scene["pea_drag"]]),
            extras={"target": DiffScalar.constant(self.start, d)},
        )

    def actuate(self, world: World, tau: int, action: np.ndarray, cfg: WorldConfig) -> World:
        # stiff PD tracking of the integrated reference path
        b, d = world.bodies, world.d
        v_ref = self.speed * np.asarray(action, dtype=float)
        target = world.extras["target"] + v_ref * cfg.dt
        force = (target - b.position[0]) * self.scene["kp"] + (b.linear_velocity[0] * -1.0 + v_ref) * self.kd
        torque = b.angle[0] * -self.scene["kp_angle"] - b.angular_velocity[0] * self.kd_angle
        zero = DiffScalar.constant(0.0, d)
        return replace(
            world,
            applied_force=stack([force, DiffScalar.constant(np.zeros(2), d)]),
            applied_torque=stack([torque, zero]),
            extras={**world.extras, "target": target},
        )

    def record(self, world: World, tau: int, action: np.ndarray) -> Dict[str, DiffScalar]:
        return {
            "position": world.bodies.position[1],
            "pusher": world.bodies.position[0],
            "u": DiffScalar.constant(action, world.d),
        }

    def final_offset(self, traj: Trajectory) -> DiffScalar:
        """Pea x relative to the scoop centre when it reaches the scoop line."""
        k = pushing_eval_step(traj, self.coeffs.get("y_scoop", 0.07))
        return traj.channel("position")[k, 0] - self.coeffs.get("x_center", 0.0)

    def task_loss(self, traj: Trajectory) -> DiffScalar:
        return pushing_task_loss(self.final_offset(traj), self.coeffs.get("x_scoop", 0.005))

    def distill_loss(self, traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
        return pushing_distill_loss(traj_new, traj_old)

    def success(self, traj: Trajectory) -> bool:
        return bool(abs(float(self.final_offset(traj).value)) < self.coeffs.get("x_scoop", 0.005))


@register_model
class ReachingModel(ScenarioModel):
    name = "Reaching"
    channels = ("p", "u", "target")

    def __init__(self, settings: ScenarioSettings):
        super().__init__(settings)
        if len(settings.markers) != 3:
            raise ConfigError("Reaching needs three markers: elbow (lower), tip, elbow (upper)", "scenario.markers")
        self.markers = tuple(settings.markers)

    def sample_state(self, rng: np.random.Generator) -> Dict[str, float]:
        a = self.region.get("angle", 0.3)
        return {"q1": float(rng.uniform(-a, a)), "q2": float(rng.uniform(-a, a))}

    @staticmethod
    def _fk(l1: float, l2: float, q: np.ndarray) -> np.ndarray:
        q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
        return np.stack([l1 * np.cos(q1) + l2 * np.cos(q12), l1 * np.sin(q1) + l2 * np.sin(q12)], axis=-1)

    def targets(self, variation: TaskVariation, horizon: int, dt: float) -> np.ndarray:
        """Piecewise-constant targets: a reference arm's pose at the end of each chunk."""
        policy = variation.scenario.policy
        q0 = np.array([variation.initial_state["q1"], variation.initial_state["q2"]])
        q = q0 + np.cumsum(self.speed * dt * policy.actions(horizon), axis=0)
        ref = self._fk(self.region.get("reference_l1", 0.12), self.region.get("reference_l2", 0.06), q)
        chunks = max(1, int(self.region.get("target_chunks", 5)))
        ends = np.minimum(((np.arange(horizon) * chunks) // horizon + 1) * horizon // chunks, horizon) - 1
        return ref[ends]

    def link_lengths(self, tool: DiffScalar) -> Tuple[DiffScalar, DiffScalar]:
        lower, tip, upper = self.markers
        l1 = (tool[lower, 0] + tool[upper, 0]) * 0.5
        return l1, tool[tip, 0] - l1

    def initial_world(self, variation: TaskVariation, tool: DiffScalar, cfg: WorldConfig) -> World:
        d = tool.d
        l1, l2 = self.link_lengths(tool)
        empty = BodyState.at_rest(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros(0), d)
        q0 = np.array([variation.initial_state["q1"], variation.initial_state["q2"]])
        return World(
            bodies=empty,
            extras={
                "l1": l1,
                "l2": l2,
                "q": DiffScalar.constant(q0, d),
                "targets": DiffScalar.constant(self.targets(variation, cfg.horizon, cfg.dt), d),
            },
        )

    def actuate(self, world: World, tau: int, action: np.ndarray, cfg: WorldConfig) -> World:
        q = world.extras["q"] + self.speed * cfg.dt * np.asarray(action, dtype=float)
        return replace(world, extras={**world.extras, "q": q})

    def record(self, world: World, tau: int, action: np.ndarray) -> Dict[str, DiffScalar]:
        ex = world.extras
        q = ex["q"].value
        l1, l2 = ex["l1"], ex["l2"]
        c1, s1 = math.cos(q[0]), math.sin(q[0])
        c12, s12 = math.cos(q[0] + q[1]), math.sin(q[0] + q[1])
        p = stack([l1 * c1 + l2 * c12, l1 * s1 + l2 * s12])
        return {"p": p, "u": DiffScalar.constant(action, world.d), "target": ex["targets"][max(tau, 1) - 1]}

    def task_loss(self, traj: Trajectory) -> DiffScalar:
        return reaching_task_loss(traj, self.coeffs)

    def distill_loss(self, traj_new: Trajectory, traj_old: Trajectory) -> DiffScalar:
        return reaching_distill_loss(traj_new, traj_old)

    def success(self, traj: Trajectory) -> bool:
        gap = traj.channel("p").value[-1] - traj.channel("target").value[-1]
        return bool(np.linalg.norm(gap) <= self.thresholds.get("reach_tol", 0.01))


# -----------------------------
# Construction and sampling
# -----------------------------

def _jacobian(settings: ScenarioSettings) -> np.ndarray:
    jac = np.zeros((2 * len(settings.cage), len(settings.theta0)))
    for k, j, axis, coeff in settings.jacobian:
        jac[2 * j + (1 if axis == "y" else 0), k] += coeff
    return jac


def build_scenario(settings: ScenarioSettings) -> ScenarioSpec:
    """Materialise a validated scenario config: cage, MVC tool shape, policy, world."""
    if settings.name not in MODEL_REGISTRY:
        raise ConfigError(f"no model registered for {settings.name!r}", "scenario.name")
    theta0 = MorphParams(np.asarray(settings.theta0), np.asarray(settings.lower_bounds), np.asarray(settings.upper_bounds))
    cage = CageParameterization(np.asarray(settings.cage, dtype=float), _jacobian(settings), theta0.values)
    boundary = densify_polygon(settings.boundary, settings.boundary_per_edge)
    tool = build_tool_shape(boundary, cage)
    for k in settings.markers:
        if not 0 <= k < tool.num_vertices:
            raise ConfigError(f"marker {k} outside the {tool.num_vertices}-vertex boundary", "scenario.markers")

    world_kwargs = settings.world.model_dump()
    world_kwargs["gravity"] = tuple(world_kwargs["gravity"])
    world = WorldConfig(horizon=settings.horizon, **world_kwargs)
    policy = build_policy(settings.policy, settings.horizon, world.dt)
    spec = ScenarioSpec(
        id=settings.name,
        N=settings.n_tasks,
        M=settings.batch_size,
        d=theta0.d,
        d_prime=settings.d_prime,
        horizon=settings.horizon,
        theta0=theta0,
        cage_param=cage,
        tool=tool,
        loss_coefficients=dict(settings.loss),
        success_thresholds=dict(settings.success),
        policy=policy,
        world=world,
        rng_seed=settings.rng_seed,
        model=MODEL_REGISTRY[settings.name](settings),
        settings=settings,
    )
    logger.debug("built scenario %s: d=%d, |M|=%d boundary vertices", spec.id, spec.d, tool.num_vertices)
    return spec


def sample_variations(spec: ScenarioSpec, count: int, seed: Optional[int] = None, start: int = 0) -> List[TaskVariation]:
    """Variations start..start+count-1 of the stream ``seed``; each is a pure function of (rng_seed, seed, index)."""
    if count < 1:
        raise ConfigError("count must be >= 1", "count")
    stream = spec.rng_seed if seed is None else int(seed)
    out: List[TaskVariation] = []
    for i in range(start, start + count):
        rng = np.random.default_rng([spec.rng_seed, stream, i])
        out.append(TaskVariation(scenario=spec, index=i, seed=stream, initial_state=spec.model.sample_state(rng)))
    return out
