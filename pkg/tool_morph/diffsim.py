"""
Planar differentiable rigid-body simulation.

Every state quantity is a ``DiffScalar``: a value (scalar or array) plus a
trailing axis of d tangents, the derivatives with respect to the morphology
parameters. Tangents are seeded from the cage deformation and pushed through
every arithmetic operation (forward mode), so any trajectory functional comes
with its exact gradient.

Contact is a smooth penalty model (softplus-relaxed penetration, damping
gated by a sigmoid, tanh-smoothed Coulomb friction); integration is
semi-implicit Euler.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from tool_morph.errors import (
    ConfigError,
    DimensionMismatch,
    MissingChannel,
    NumericalBlowup,
    SimulationError,
)
from tool_morph.geometry import DeformedShape, points_in_polygon

logger = logging.getLogger("tool_morph.diffsim")

Number = Union[int, float]


# -----------------------------
# Forward-mode scalar
# -----------------------------

class DiffScalar:
    """Value with tangents d(value)/d(theta_k), k < d.

    ``value`` may be an array; ``tangents`` then has shape value.shape + (d,)
    and every operation acts elementwise, exactly like a grid of scalars.
    """

    __slots__ = ("value", "tangents")
    # ndarray (op) DiffScalar must dispatch to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value: Any, tangents: Any = None, d: Optional[int] = None):
        self.value = np.asarray(value, dtype=float)
        if tangents is None:
            if d is None:
                raise DimensionMismatch("DiffScalar needs tangents or a tangent width d")
            self.tangents = np.zeros(self.value.shape + (d,))
        else:
            t = np.asarray(tangents, dtype=float)
            if t.shape[:-1] != self.value.shape:
                raise DimensionMismatch(
                    f"tangents shape {t.shape} does not match value shape {self.value.shape}"
                )
            self.tangents = t

    @classmethod
    def constant(cls, value: Any, d: int) -> "DiffScalar":
        return cls(value, d=d)

    @property
    def d(self) -> int:
        return int(self.tangents.shape[-1])

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"DiffScalar(value={self.value!r}, d={self.d})"

    def __getitem__(self, idx: Any) -> "DiffScalar":
        tidx = (idx if isinstance(idx, tuple) else (idx,)) + (slice(None),)
        return DiffScalar(self.value[idx], self.tangents[tidx])

    # ---------- arithmetic ----------
    def _coerce(self, other: Any) -> "DiffScalar":
        if isinstance(other, DiffScalar):
            if other.d != self.d:
                raise DimensionMismatch(f"tangent widths differ: {self.d} vs {other.d}")
            return other
        return DiffScalar(other, d=self.d)

    @staticmethod
    def _fit(t: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        target = shape + (t.shape[-1],)
        return t if t.shape == target else np.broadcast_to(t, target)

    def __add__(self, other: Any) -> "DiffScalar":
        if not isinstance(other, DiffScalar):
            v = self.value + np.asarray(other, dtype=float)
            return DiffScalar(v, self._fit(self.tangents, v.shape))
        o = self._coerce(other)
        v = self.value + o.value
        return DiffScalar(v, self._fit(self.tangents + o.tangents, v.shape))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "DiffScalar":
        if not isinstance(other, DiffScalar):
            v = self.value - np.asarray(other, dtype=float)
            return DiffScalar(v, self._fit(self.tangents, v.shape))
        o = self._coerce(other)
        v = self.value - o.value
        return DiffScalar(v, self._fit(self.tangents - o.tangents, v.shape))

    def __rsub__(self, other: Any) -> "DiffScalar":
        return (-self) + other

    def __neg__(self) -> "DiffScalar":
        return DiffScalar(-self.value, -self.tangents)

    def __mul__(self, other: Any) -> "DiffScalar":
        if not isinstance(other, DiffScalar):
            c = np.asarray(other, dtype=float)
            v = self.value * c
            return DiffScalar(v, self._fit(self.tangents * c[..., None], v.shape))
        o = self._coerce(other)
        v = self.value * o.value
        t = self.tangents * o.value[..., None] + self.value[..., None] * o.tangents
        return DiffScalar(v, self._fit(t, v.shape))

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "DiffScalar":
        if not isinstance(other, DiffScalar):
            c = np.asarray(other, dtype=float)
            v = self.value / c
            return DiffScalar(v, self._fit(self.tangents / c[..., None], v.shape))
        o = self._coerce(other)
        inv = 1.0 / o.value
        v = self.value * inv
        t = (self.tangents - v[..., None] * o.tangents) * inv[..., None]
        return DiffScalar(v, self._fit(t, v.shape))

    def __rtruediv__(self, other: Any) -> "DiffScalar":
        return self._coerce(other) / self

    def __pow__(self, power: Number) -> "DiffScalar":
        if isinstance(power, DiffScalar):
            raise TypeError("DiffScalar exponents must be plain numbers")
        v = self.value ** power
        dv = power * self.value ** (power - 1) if power != 0 else np.zeros_like(self.value)
        return self._chain(v, dv)

    # ---------- unary ----------
    def _chain(self, v: np.ndarray, dv: np.ndarray) -> "DiffScalar":
        return DiffScalar(v, self.tangents * np.asarray(dv)[..., None])

    def sqrt(self) -> "DiffScalar":
        v = np.sqrt(self.value)
        return self._chain(v, 0.5 / v)

    def sin(self) -> "DiffScalar":
        return self._chain(np.sin(self.value), np.cos(self.value))

    def cos(self) -> "DiffScalar":
        return self._chain(np.cos(self.value), -np.sin(self.value))

    def tanh(self) -> "DiffScalar":
        v = np.tanh(self.value)
        return self._chain(v, 1.0 - v * v)

    def exp(self) -> "DiffScalar":
        v = np.exp(self.value)
        return self._chain(v, v)

    def log(self) -> "DiffScalar":
        return self._chain(np.log(self.value), 1.0 / self.value)

    def sigmoid(self) -> "DiffScalar":
        v = 0.5 * (np.tanh(0.5 * self.value) + 1.0)
        return self._chain(v, v * (1.0 - v))

    def softplus(self, beta: float = 1.0) -> "DiffScalar":
        """log(1 + exp(beta x)) / beta, the smooth stand-in for max(0, x)."""
        z = beta * self.value
        v = np.logaddexp(0.0, z) / beta
        return self._chain(v, 0.5 * (np.tanh(0.5 * z) + 1.0))

    def __abs__(self) -> "DiffScalar":
        return self._chain(np.abs(self.value), np.sign(self.value))

    # ---------- reductions ----------
    def sum(self, axis: Optional[int] = None) -> "DiffScalar":
        if axis is None:
            return DiffScalar(self.value.sum(), self.tangents.reshape(self.value.size, self.d).sum(axis=0))
        axis = axis if axis >= 0 else self.value.ndim + axis
        return DiffScalar(self.value.sum(axis=axis), self.tangents.sum(axis=axis))

    def mean(self, axis: Optional[int] = None) -> "DiffScalar":
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) / float(n)

    def gradient(self) -> np.ndarray:
        """Tangents of a scalar DiffScalar, i.e. d value / d theta."""
        if self.value.ndim != 0:
            raise DimensionMismatch(f"gradient() needs a scalar, value shape is {self.value.shape}")
        return np.array(self.tangents, copy=True)

    def without_tangents(self) -> "DiffScalar":
        return DiffScalar(self.value, np.zeros(self.value.shape + (0,)))


def stack(items: Sequence[DiffScalar], axis: int = 0) -> DiffScalar:
    axis_t = axis if axis >= 0 else items[0].value.ndim + 1 + axis
    return DiffScalar(
        np.stack([it.value for it in items], axis=axis_t),
        np.stack([it.tangents for it in items], axis=axis_t),
    )


def where(mask: np.ndarray, a: DiffScalar, b: DiffScalar) -> DiffScalar:
    """Elementwise selection by a value-level mask (the branch carries its own tangents)."""
    mask = np.asarray(mask, dtype=bool)
    return DiffScalar(np.where(mask, a.value, b.value), np.where(mask[..., None], a.tangents, b.tangents))


def dot2(a: DiffScalar, b: Union[DiffScalar, np.ndarray]) -> DiffScalar:
    return a[..., 0] * (b[..., 0]) + a[..., 1] * (b[..., 1])


def cross2(a: Union[DiffScalar, np.ndarray], b: Union[DiffScalar, np.ndarray]) -> DiffScalar:
    """z-component of a x b for (..., 2) vectors."""
    if isinstance(a, DiffScalar):
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return b[..., 1] * a[..., 0] - b[..., 0] * a[..., 1]


def vec2(x: DiffScalar, y: DiffScalar) -> DiffScalar:
    return stack([x, y], axis=-1)


def rotate(angle: DiffScalar, p: Union[DiffScalar, np.ndarray]) -> DiffScalar:
    """R(angle) p for matching leading shapes; ``p`` may be a constant array."""
    c, s = angle.cos(), angle.sin()
    px, py = p[..., 0], p[..., 1]
    return vec2(c * px - s * py, s * px + c * py)


def perp(v: DiffScalar) -> DiffScalar:
    """Rotate by +90 degrees: (x, y) -> (-y, x)."""
    return vec2(-v[..., 1], v[..., 0])


def scatter_add(n: int, index: np.ndarray, values: DiffScalar) -> DiffScalar:
    """Sum rows of ``values`` into n slots by ``index`` (fixed order, deterministic)."""
    out_v = np.zeros((n,) + values.value.shape[1:])
    out_t = np.zeros((n,) + values.tangents.shape[1:])
    np.add.at(out_v, index, values.value)
    np.add.at(out_t, index, values.tangents)
    return DiffScalar(out_v, out_t)


# -----------------------------
# World description
# -----------------------------

@dataclass(frozen=True)
class WorldConfig:
    gravity: Tuple[float, float] = (0.0, -9.81)
    dt: float = 1e-3
    contact_stiffness: float = 1e4
    contact_damping: float = 1.0
    friction_coefficient: float = 0.5
    tangential_smoothing: float = 1e-3
    contact_sharpness: float = 200.0
    joint_stiffness: float = 1e4
    joint_damping: float = 5.0
    horizon: int = 200
    blowup_limit: float = 1e9

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ConfigError("dt must be > 0", "world.dt")
        if self.contact_stiffness <= 0:
            raise ConfigError("contact stiffness must be > 0", "world.contact_stiffness")
        if self.friction_coefficient < 0:
            raise ConfigError("friction coefficient must be >= 0", "world.friction_coefficient")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1", "world.horizon")
        if self.contact_sharpness <= 0 or self.tangential_smoothing <= 0:
            raise ConfigError("contact sharpness and tangential smoothing must be > 0", "world")


@dataclass(frozen=True, eq=False)
class BodyState:
    """n planar rigid bodies stored as arrays (a rope is one BodyState of 15 links)."""

    position: DiffScalar          # (n, 2) m
    angle: DiffScalar             # (n,) rad
    linear_velocity: DiffScalar   # (n, 2) m/s
    angular_velocity: DiffScalar  # (n,) rad/s
    mass: np.ndarray              # (n,) kg
    inertia: np.ndarray           # (n,) kg m^2
    kinematic: np.ndarray         # (n,) bool; kinematic bodies ignore forces

    def __post_init__(self) -> None:
        if np.any(self.mass <= 0) or np.any(self.inertia <= 0):
            raise SimulationError("body mass and inertia must be > 0")

    @property
    def n(self) -> int:
        return int(self.mass.size)

    @property
    def d(self) -> int:
        return self.position.d

    @classmethod
    def at_rest(
        cls,
        positions: np.ndarray,
        angles: np.ndarray,
        mass: np.ndarray,
        inertia: np.ndarray,
        d: int,
        kinematic: Optional[np.ndarray] = None,
    ) -> "BodyState":
        positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        n = positions.shape[0]
        return cls(
            position=DiffScalar.constant(positions, d),
            angle=DiffScalar.constant(np.asarray(angles, dtype=float).reshape(n), d),
            linear_velocity=DiffScalar.constant(np.zeros((n, 2)), d),
            angular_velocity=DiffScalar.constant(np.zeros(n), d),
            mass=np.asarray(mass, dtype=float).reshape(n),
            inertia=np.asarray(inertia, dtype=float).reshape(n),
            kinematic=np.zeros(n, dtype=bool) if kinematic is None else np.asarray(kinematic, dtype=bool),
        )

    @staticmethod
    def concat(parts: Sequence["BodyState"]) -> "BodyState":
        cat = lambda name: DiffScalar(
            np.concatenate([getattr(p, name).value for p in parts]),
            np.concatenate([getattr(p, name).tangents for p in parts]),
        )
        return BodyState(
            position=cat("position"),
            angle=cat("angle"),
            linear_velocity=cat("linear_velocity"),
            angular_velocity=cat("angular_velocity"),
            mass=np.concatenate([p.mass for p in parts]),
            inertia=np.concatenate([p.inertia for p in parts]),
            kinematic=np.concatenate([p.kinematic for p in parts]),
        )

    def world_points(self, bodies: np.ndarray, local: Union[DiffScalar, np.ndarray]) -> Tuple[DiffScalar, DiffScalar]:
        """World positions and velocities of body-fixed points."""
        r = rotate(self.angle[bodies], local)
        pos = self.position[bodies] + r
        vel = self.linear_velocity[bodies] + perp(r) * self.angular_velocity[bodies][..., None]
        return pos, vel


@dataclass(frozen=True, eq=False)
class PolygonShape:
    """Body-fixed polygon; normals point out of the polygon for either winding."""

    body: int
    local_vertices: DiffScalar  # (m, 2)
    orientation: float = field(init=False)

    def __post_init__(self) -> None:
        v = self.local_vertices.value
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        object.__setattr__(self, "orientation", 1.0 if area2 >= 0 else -1.0)


@dataclass(frozen=True, eq=False)
class PointSet:
    bodies: np.ndarray          # (k,) body index per point
    local_points: DiffScalar    # (k, 2)
    radius: np.ndarray          # (k,)


@dataclass(frozen=True, eq=False)
class ContactGroup:
    points: PointSet
    polygon: PolygonShape


@dataclass(frozen=True, eq=False)
class GroundContact:
    """Half-plane y >= height."""

    points: PointSet
    height: float = 0.0


@dataclass(frozen=True, eq=False)
class SpringJoints:
    body_a: np.ndarray
    anchor_a: np.ndarray
    body_b: np.ndarray
    anchor_b: np.ndarray
    stiffness: float
    damping: float


@dataclass(frozen=True, eq=False)
class World:
    bodies: BodyState
    contacts: Tuple[ContactGroup, ...] = ()
    ground: Tuple[GroundContact, ...] = ()
    joints: Tuple[SpringJoints, ...] = ()
    linear_drag: Optional[np.ndarray] = None        # (n,) N s/m
    applied_force: Optional[DiffScalar] = None      # (n, 2), reset every step
    applied_torque: Optional[DiffScalar] = None     # (n,)
    extras: Dict[str, DiffScalar] = field(default_factory=dict)
    step_index: int = 0

    @property
    def d(self) -> int:
        return self.bodies.d


# -----------------------------
# Geometry seeding and contact
# -----------------------------

def seed_shape(deformed: DeformedShape, d: Optional[int] = None) -> DiffScalar:
    """Collision vertices whose tangents are the cage-deformation sensitivities."""
    sens = np.asarray(deformed.vertex_sensitivities, dtype=float)
    verts = np.asarray(deformed.vertices, dtype=float)
    if sens.shape[:2] != verts.shape or sens.ndim != 3:
        raise DimensionMismatch(
            f"vertex sensitivities shape {sens.shape} does not match vertices {verts.shape}"
        )
    if d is not None and sens.shape[-1] != d:
        raise DimensionMismatch(f"sensitivities have width {sens.shape[-1]}, expected {d}")
    return DiffScalar(verts, sens)


def _penalty_force(sd: DiffScalar, normal: Any, rel_vel: DiffScalar, cfg: WorldConfig) -> DiffScalar:
    """Force on the contacting point for signed distance ``sd`` (> 0 separated)."""
    beta = cfg.contact_sharpness
    elastic = (-sd).softplus(beta) * cfg.contact_stiffness
    vn = dot2(rel_vel, normal)
    damping = vn * (-sd * beta).sigmoid() * (-cfg.contact_damping)
    if isinstance(normal, DiffScalar):
        tangent = perp(normal)
    else:
        normal = np.asarray(normal, dtype=float)
        tangent = np.stack([-normal[..., 1], normal[..., 0]], axis=-1)
    vt = dot2(rel_vel, tangent)
    friction = elastic * (vt / cfg.tangential_smoothing).tanh() * (-cfg.friction_coefficient)
    fn = elastic + damping
    return normal * fn[..., None] + tangent * friction[..., None]


def polygon_signed_distance(points: DiffScalar, polygon: DiffScalar, orientation: float = 1.0) -> Tuple[DiffScalar, DiffScalar]:
    """Signed distance (negative inside) and outward unit normal for each point.

    The closest feature is picked on values; edge-interior contacts use the
    edge normal, so the result stays smooth when the point crosses the surface.
    """
    P = points.value.reshape(-1, 2)
    V = polygon.value
    A = V
    E = np.roll(V, -1, axis=0) - V
    E2 = np.einsum("ij,ij->i", E, E)
    rel = P[:, None, :] - A[None, :, :]
    t = np.clip(np.einsum("kmj,mj->km", rel, E) / E2[None, :], 0.0, 1.0)
    dist = np.linalg.norm(rel - t[..., None] * E[None, :, :], axis=-1)
    j = np.argmin(dist, axis=1)
    t_star = t[np.arange(P.shape[0]), j]

    inside = points_in_polygon(P, V)

    pts = DiffScalar(P, points.tangents.reshape(P.shape[0], 2, points.d))
    nxt = (j + 1) % V.shape[0]
    a = polygon[j]
    b = polygon[nxt]
    e = b - a
    e_len = dot2(e, e).sqrt()

    # edge-interior branch
    n_edge = vec2(e[..., 1], -e[..., 0]) * (orientation / e_len)[..., None]
    sd_edge = dot2(pts - a, n_edge)

    # vertex branch
    q = where((t_star >= 1.0)[:, None], b, a)
    diff = pts - q
    dist_v = (dot2(diff, diff) + 1e-30).sqrt()
    sign = np.where(inside, -1.0, 1.0)
    sd_vertex = dist_v * sign
    n_vertex = diff * (sign / dist_v)[..., None]

    interior = (t_star > 0.0) & (t_star < 1.0)
    sd = where(interior, sd_edge, sd_vertex)
    normal = where(interior[:, None], n_edge, n_vertex)
    out_shape = points.value.shape[:-1]
    return (
        DiffScalar(sd.value.reshape(out_shape), sd.tangents.reshape(out_shape + (points.d,))),
        DiffScalar(normal.value.reshape(out_shape + (2,)), normal.tangents.reshape(out_shape + (2, points.d))),
    )


def contact_force(
    point: DiffScalar,
    polygon: DiffScalar,
    cfg: WorldConfig,
    *,
    point_velocity: Optional[DiffScalar] = None,
    polygon_velocity: Optional[DiffScalar] = None,
    radius: float = 0.0,
) -> DiffScalar:
    """Penalty force on ``point`` (shape (2,) or (k, 2)) from a world-frame polygon."""
    v = polygon.value
    area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
    sd, n = polygon_signed_distance(point, polygon, 1.0 if area2 >= 0 else -1.0)
    rel = point_velocity if point_velocity is not None else DiffScalar.constant(np.zeros(point.shape), point.d)
    if polygon_velocity is not None:
        rel = rel - polygon_velocity
    return _penalty_force(sd - radius, n, rel, cfg)


# -----------------------------
# Integrator
# -----------------------------

def _accumulate_forces(world: World, cfg: WorldConfig) -> Tuple[DiffScalar, DiffScalar]:
    bodies = world.bodies
    n, d = bodies.n, bodies.d
    dyn = (~bodies.kinematic).astype(float)

    force = DiffScalar.constant(np.outer(bodies.mass * dyn, np.asarray(cfg.gravity, dtype=float)), d)
    torque = DiffScalar.constant(np.zeros(n), d)
    if world.applied_force is not None:
        force = force + world.applied_force
    if world.applied_torque is not None:
        torque = torque + world.applied_torque
    if world.linear_drag is not None:
        force = force - bodies.linear_velocity * world.linear_drag[:, None]

    for group in world.contacts:
        ps, poly = group.points, group.polygon
        pos, vel = bodies.world_points(ps.bodies, ps.local_points)
        b = np.full(poly.local_vertices.shape[0], poly.body)
        verts, _ = bodies.world_points(b, poly.local_vertices)
        sd, normal = polygon_signed_distance(pos, verts, poly.orientation)
        arm_b = pos - bodies.position[np.full(len(ps.bodies), poly.body)]
        vel_b = bodies.linear_velocity[np.full(len(ps.bodies), poly.body)] + perp(arm_b) * bodies.angular_velocity[np.full(len(ps.bodies), poly.body)][..., None]
        f = _penalty_force(sd - ps.radius, normal, vel - vel_b, cfg)
        arm_a = pos - bodies.position[ps.bodies]
        force = force + scatter_add(n, ps.bodies, f)
        torque = torque + scatter_add(n, ps.bodies, cross2(arm_a, f))
        force = force - scatter_add(n, np.full(len(ps.bodies), poly.body), f)
        torque = torque - scatter_add(n, np.full(len(ps.bodies), poly.body), cross2(arm_b, f))

    for ground in world.ground:
        ps = ground.points
        pos, vel = bodies.world_points(ps.bodies, ps.local_points)
        sd = pos[..., 1] - (ground.height + ps.radius)
        normal = np.broadcast_to(np.array([0.0, 1.0]), pos.shape)
        f = _penalty_force(sd, normal, vel, cfg)
        force = force + scatter_add(n, ps.bodies, f)
        torque = torque + scatter_add(n, ps.bodies, cross2(pos - bodies.position[ps.bodies], f))

    for joint in world.joints:
        pa, va = bodies.world_points(joint.body_a, joint.anchor_a)
        pb, vb = bodies.world_points(joint.body_b, joint.anchor_b)
        f = (pb - pa) * joint.stiffness + (vb - va) * joint.damping
        force = force + scatter_add(n, joint.body_a, f) - scatter_add(n, joint.body_b, f)
        torque = (
            torque
            + scatter_add(n, joint.body_a, cross2(pa - bodies.position[joint.body_a], f))
            - scatter_add(n, joint.body_b, cross2(pb - bodies.position[joint.body_b], f))
        )
    return force, torque


def _check_finite(bodies: BodyState, limit: float, step_index: int) -> None:
    for name in ("position", "angle", "linear_velocity", "angular_velocity"):
        q = getattr(bodies, name)
        if not (np.all(np.isfinite(q.value)) and np.all(np.isfinite(q.tangents))):
            raise NumericalBlowup(f"non-finite {name}", step=step_index)
        if q.value.size and np.max(np.abs(q.value)) > limit:
            raise NumericalBlowup(f"|{name}| exceeded {limit:g}", step=step_index)


def step(world: World, cfg: WorldConfig) -> World:
    """Semi-implicit Euler: velocities from forces first, then positions from new velocities."""
    bodies = world.bodies
    dyn = (~bodies.kinematic).astype(float)
    force, torque = _accumulate_forces(world, cfg)

    inv_m = dyn / bodies.mass
    inv_i = dyn / bodies.inertia
    lin_vel = bodies.linear_velocity + force * (cfg.dt * inv_m)[:, None]
    ang_vel = bodies.angular_velocity + torque * (cfg.dt * inv_i)
    new_bodies = replace(
        bodies,
        position=bodies.position + lin_vel * cfg.dt,
        angle=bodies.angle + ang_vel * cfg.dt,
        linear_velocity=lin_vel,
        angular_velocity=ang_vel,
    )
    _check_finite(new_bodies, cfg.blowup_limit, world.step_index + 1)
    return replace(
        world,
        bodies=new_bodies,
        applied_force=None,
        applied_torque=None,
        step_index=world.step_index + 1,
    )


# -----------------------------
# Rollout
# -----------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    """Per-step channels for steps 1..H (leading axis), plus the step-0 record."""

    channels: Dict[str, DiffScalar]
    initial: Dict[str, DiffScalar]
    horizon: int
    states: Optional[List[BodyState]] = None

    def channel(self, name: str) -> DiffScalar:
        if name not in self.channels:
            raise MissingChannel(name)
        return self.channels[name]

    def initial_value(self, name: str) -> DiffScalar:
        if name not in self.initial:
            raise MissingChannel(name)
        return self.initial[name]

    @property
    def d(self) -> int:
        return next(iter(self.channels.values())).d


class ScenarioModel(Protocol):
    channels: Tuple[str, ...]

    def initial_world(self, variation: Any, tool: DiffScalar, cfg: WorldConfig) -> World: ...

    def actuate(self, world: World, tau: int, action: np.ndarray, cfg: WorldConfig) -> World: ...

    def record(self, world: World, tau: int, action: np.ndarray) -> Dict[str, DiffScalar]: ...


class ActionSource(Protocol):
    def actions(self, horizon: int) -> np.ndarray: ...


def rollout(
    variation: Any,
    shape: DeformedShape,
    policy: ActionSource,
    cfg: WorldConfig,
    *,
    with_tangents: bool = True,
    keep_states: bool = False,
) -> Trajectory:
    """Run the variation's scenario model for cfg.horizon steps.

    Deterministic in (variation, theta, cfg): no randomness, fixed summation order.
    With ``with_tangents=False`` the tool is seeded with zero-width tangents,
    which is how constant reference rollouts are produced cheaply.
    """
    model: ScenarioModel = variation.scenario.model
    H = cfg.horizon
    actions = np.asarray(policy.actions(H), dtype=float)
    if actions.shape[0] < H:
        raise SimulationError(f"policy provides {actions.shape[0]} actions for horizon {H}")

    tool = seed_shape(shape)
    if not with_tangents:
        tool = tool.without_tangents()
    world = model.initial_world(variation, tool, cfg)
    initial = model.record(world, 0, np.zeros_like(actions[0]))

    records: List[Dict[str, DiffScalar]] = []
    states: List[BodyState] = []
    for tau in range(1, H + 1):
        u = actions[tau - 1]
        world = model.actuate(world, tau, u, cfg)
        world = step(world, cfg)
        records.append(model.record(world, tau, u))
        if keep_states:
            states.append(world.bodies)

    channels = {name: stack([r[name] for r in records]) for name in model.channels}
    logger.debug("rollout %s variation %s done (H=%d, d=%d)", type(model).__name__, getattr(variation, "index", "?"), H, world.d)
    return Trajectory(channels=channels, initial=initial, horizon=H, states=states if keep_states else None)
