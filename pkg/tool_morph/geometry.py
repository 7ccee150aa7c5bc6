"""
Cage-based tool morphology.

theta -> deformed cage (affine, per-scenario jacobian) -> dense tool boundary
(mean value coordinates, weights frozen at the base cage). Both maps are
linear, so the boundary sensitivities d m_i / d theta are constant and are
handed to the simulator as the seed tangents of every collision vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from tool_morph.errors import (
    DegenerateCage,
    GeometryError,
    ParamsOutOfBounds,
    PointOutsideCage,
)

# Points closer than this to the cage boundary are rejected; MVC is singular there.
INTERIOR_MARGIN = 1e-9
COINCIDENT_TOL = 1e-12
RECONSTRUCTION_TOL = 1e-10

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]], Sequence[float]]


# -----------------------------
# Domain types
# -----------------------------

@dataclass(frozen=True, eq=False)
class MorphParams:
    """The design vector theta with its box bounds."""

    values: np.ndarray
    lower_bounds: np.ndarray
    upper_bounds: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        lower = np.asarray(self.lower_bounds, dtype=float).reshape(-1)
        upper = np.asarray(self.upper_bounds, dtype=float).reshape(-1)
        if not (values.shape == lower.shape == upper.shape):
            raise GeometryError(
                f"theta has {values.size} components but bounds have {lower.size}/{upper.size}"
            )
        if np.any(lower > upper):
            raise GeometryError("lower bound exceeds upper bound")
        bad = np.flatnonzero((values < lower) | (values > upper))
        if bad.size:
            k = int(bad[0])
            raise ParamsOutOfBounds(
                f"theta[{k}]={values[k]!r} outside [{lower[k]!r}, {upper[k]!r}]"
            )
        for name, arr in (("values", values), ("lower_bounds", lower), ("upper_bounds", upper)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return int(self.values.size)

    def with_values(self, values: ArrayLike) -> "MorphParams":
        return MorphParams(np.asarray(values, dtype=float), self.lower_bounds, self.upper_bounds)

    def project(self, values: ArrayLike) -> np.ndarray:
        return np.clip(np.asarray(values, dtype=float), self.lower_bounds, self.upper_bounds)


@dataclass(frozen=True, eq=False)
class CageParameterization:
    """Affine map theta -> cage vertices: cage(theta) = base + J (theta - theta0).

    ``jacobian`` rows are interleaved per vertex: (x_0, y_0, x_1, y_1, ...).
    """

    base_cage: np.ndarray
    jacobian: np.ndarray
    theta0: np.ndarray

    def __post_init__(self) -> None:
        base = np.asarray(self.base_cage, dtype=float)
        jac = np.asarray(self.jacobian, dtype=float)
        theta0 = np.asarray(self.theta0, dtype=float).reshape(-1)
        if base.ndim != 2 or base.shape[1] != 2 or base.shape[0] < 3:
            raise DegenerateCage(f"cage must be a (C>=3, 2) array, got shape {base.shape}")
        if jac.shape != (2 * base.shape[0], theta0.size):
            raise GeometryError(
                f"cage jacobian must have shape {(2 * base.shape[0], theta0.size)}, got {jac.shape}"
            )
        _check_cage(base)
        for name, arr in (("base_cage", base), ("jacobian", jac), ("theta0", theta0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return int(self.theta0.size)

    @property
    def num_vertices(self) -> int:
        return int(self.base_cage.shape[0])

    def vertex_jacobian(self) -> np.ndarray:
        """Jacobian reshaped to (C, 2, d)."""
        return self.jacobian.reshape(self.num_vertices, 2, self.d)

    def cage(self, theta: ArrayLike) -> np.ndarray:
        delta = np.asarray(theta, dtype=float).reshape(-1) - self.theta0
        return self.base_cage + (self.jacobian @ delta).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class ToolShape:
    """Cage + dense boundary polygon + frozen MVC weight matrix W (|M| x |C|)."""

    cage: CageParameterization
    boundary: np.ndarray
    weights: np.ndarray
    sensitivities: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        # d m_i / d theta = sum_j W[i, j] d c_j / d theta, constant in theta.
        sens = np.einsum("ij,jak->iak", self.weights, self.cage.vertex_jacobian())
        sens.setflags(write=False)
        object.__setattr__(self, "sensitivities", sens)

    @property
    def num_vertices(self) -> int:
        return int(self.boundary.shape[0])


@dataclass(frozen=True, eq=False)
class DeformedShape:
    vertices: np.ndarray
    vertex_sensitivities: np.ndarray  # (M, 2, d)

    @property
    def d(self) -> int:
        return int(self.vertex_sensitivities.shape[-1])


# -----------------------------
# Mean value coordinates
# -----------------------------

def _check_cage(cage: np.ndarray) -> None:
    edges = np.roll(cage, -1, axis=0) - cage
    lengths = np.linalg.norm(edges, axis=1)
    short = np.flatnonzero(lengths <= COINCIDENT_TOL)
    if short.size:
        j = int(short[0])
        raise DegenerateCage(f"cage vertices {j} and {(j + 1) % len(cage)} coincide")


def segment_distances(point: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Distance from ``point`` to every edge (v_j, v_{j+1}) of a closed polygon."""
    a = polygon
    b = np.roll(polygon, -1, axis=0)
    ab = b - a
    t = np.einsum("ij,ij->i", point - a, ab) / np.einsum("ij,ij->i", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(point - closest, axis=1)


def points_in_polygon(points: ArrayLike, polygon: ArrayLike) -> np.ndarray:
    """Even-odd crossing test for a (k, 2) array of points; boundary points may go either way."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    poly = np.asarray(polygon, dtype=float)
    xi, yi = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    px, py = P[:, 0:1], P[:, 1:2]
    straddle = (yi[None, :] > py) != (yj[None, :] > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = (xj - xi)[None, :] * (py - yi[None, :]) / (yj - yi)[None, :] + xi[None, :]
    return (np.count_nonzero(straddle & (px < x_cross), axis=1) % 2).astype(bool)


def point_in_polygon(point: ArrayLike, polygon: ArrayLike) -> bool:
    return bool(points_in_polygon(np.asarray(point, dtype=float).reshape(1, 2), polygon)[0])


def compute_mvc_weights(point: ArrayLike, cage: ArrayLike) -> np.ndarray:
    """2D mean value coordinates of ``point`` with respect to a closed cage polygon.

    w_j proportional to (tan(a_{j-1}/2) + tan(a_j/2)) / |c_j - x|, where a_j is the
    signed angle subtended at x by edge (c_j, c_{j+1}); tan(a/2) is evaluated as
    sin(a) / (1 + cos(a)) = cross / (r_j r_{j+1} + dot), which stays finite
    for every strictly interior point, convex cage or not.
    """
    x = np.asarray(point, dtype=float).reshape(2)
    c = np.asarray(cage, dtype=float)
    _check_cage(c)

    s = c - x
    r = np.linalg.norm(s, axis=1)
    s_next = np.roll(s, -1, axis=0)
    r_next = np.roll(r, -1)
    cross = s[:, 0] * s_next[:, 1] - s[:, 1] * s_next[:, 0]
    dot = np.einsum("ij,ij->i", s, s_next)

    # winding number from the same signed angles; 0 means outside
    winding = np.sum(np.arctan2(cross, dot)) / (2.0 * np.pi)
    if abs(abs(winding) - 1.0) > 1e-6:
        raise PointOutsideCage(f"point {tuple(x)} is outside the cage", point=x)
    if np.min(segment_distances(x, c)) <= INTERIOR_MARGIN:
        raise PointOutsideCage(f"point {tuple(x)} lies on the cage boundary", point=x)

    tan_half = cross / (r * r_next + dot)
    w = (np.roll(tan_half, 1) + tan_half) / r
    return w / np.sum(w)


# -----------------------------
# Shape construction and deformation
# -----------------------------

def build_tool_shape(base_boundary: ArrayLike, cage: CageParameterization) -> ToolShape:
    boundary = np.asarray(base_boundary, dtype=float)
    if boundary.ndim != 2 or boundary.shape[1] != 2:
        raise GeometryError(f"boundary must be an (M, 2) array, got shape {boundary.shape}")

    rows: List[np.ndarray] = []
    for i, m in enumerate(boundary):
        try:
            rows.append(compute_mvc_weights(m, cage.base_cage))
        except PointOutsideCage as exc:
            raise PointOutsideCage(str(exc), index=i, point=m) from exc
    weights = np.vstack(rows)

    error = np.max(np.linalg.norm(weights @ cage.base_cage - boundary, axis=1))
    if error >= RECONSTRUCTION_TOL:
        raise GeometryError(f"MVC reconstruction error {error:.3e} exceeds {RECONSTRUCTION_TOL:g}")

    boundary = boundary.copy()
    boundary.setflags(write=False)
    weights.setflags(write=False)
    return ToolShape(cage=cage, boundary=boundary, weights=weights)


def deform(shape: ToolShape, params: MorphParams) -> DeformedShape:
    """Deformed boundary and its constant sensitivities.

    Evaluated as base boundary + W (cage(theta) - base cage), so theta0 gives
    the stored boundary exactly rather than its MVC reconstruction.
    """
    theta = np.asarray(params.values, dtype=float)
    if theta.size != shape.cage.d:
        raise GeometryError(f"theta has {theta.size} components, cage expects {shape.cage.d}")
    if np.any(theta < params.lower_bounds) or np.any(theta > params.upper_bounds):
        raise ParamsOutOfBounds("theta outside its bounds")

    delta = theta - shape.cage.theta0
    vertices = shape.boundary + shape.weights @ (shape.cage.jacobian @ delta).reshape(-1, 2)
    return DeformedShape(vertices=vertices, vertex_sensitivities=shape.sensitivities)


# -----------------------------
# Export
# -----------------------------

def write_polygon_text(vertices: ArrayLike, path: Union[str, Path]) -> Path:
    """One "x y" pair per line, closed implicitly; repr precision round-trips exactly."""
    path = Path(path)
    lines = [f"{x!r} {y!r}" for x, y in np.asarray(vertices, dtype=float).tolist()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_polygon_text(path: Union[str, Path]) -> np.ndarray:
    pts: List[Tuple[float, float]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x, y = line.split()
        pts.append((float(x), float(y)))
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def polygon_svg(vertices: ArrayLike, cage: ArrayLike = None, *, size_px: int = 400, margin: float = 0.05) -> str:
    """SVG document with the tool outline (and optionally its cage), y axis pointing up."""
    v = np.asarray(vertices, dtype=float)
    pts = v if cage is None else np.vstack([v, np.asarray(cage, dtype=float)])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = float(np.max(hi - lo)) or 1.0
    pad = margin * span
    scale = size_px / (span + 2 * pad)

    def to_px(p: np.ndarray) -> str:
        px = (p[0] - lo[0] + pad) * scale
        py = (hi[1] + pad - p[1]) * scale
        return f"{px:.3f} {py:.3f}"

    def path_d(poly: np.ndarray) -> str:
        return "M " + " L ".join(to_px(p) for p in poly) + " Z"

    width = (hi[0] - lo[0] + 2 * pad) * scale
    height = (hi[1] - lo[1] + 2 * pad) * scale
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1f}" height="{height:.1f}" '
        f'viewBox="0 0 {width:.3f} {height:.3f}">'
    ]
    if cage is not None:
        parts.append(f'  <path d="{path_d(np.asarray(cage, dtype=float))}" fill="none" stroke="#999" stroke-dasharray="4 3"/>')
    parts.append(f'  <path d="{path_d(v)}" fill="#4a78b5" fill-opacity="0.5" stroke="#1f3f6b"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_polygon_svg(vertices: ArrayLike, path: Union[str, Path], cage: ArrayLike = None) -> Path:
    path = Path(path)
    path.write_text(polygon_svg(vertices, cage), encoding="utf-8")
    return path


def densify_polygon(corners: ArrayLike, per_edge: Union[int, Sequence[int]]) -> np.ndarray:
    """Resample a closed polygon with ``per_edge`` points per edge (corners included)."""
    c = np.asarray(corners, dtype=float)
    counts = [per_edge] * len(c) if isinstance(per_edge, int) else list(per_edge)
    out: List[np.ndarray] = []
    for j, n in enumerate(counts):
        a, b = c[j], c[(j + 1) % len(c)]
        t = np.arange(n, dtype=float) / n
        out.append(a + t[:, None] * (b - a))
    return np.vstack(out)
