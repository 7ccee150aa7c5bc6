import numpy as np
import pytest

from tool_morph.errors import DegenerateCage, GeometryError, ParamsOutOfBounds, PointOutsideCage
from tool_morph.geometry import (
    CageParameterization,
    MorphParams,
    build_tool_shape,
    compute_mvc_weights,
    deform,
    densify_polygon,
    point_in_polygon,
    points_in_polygon,
    polygon_svg,
    read_polygon_text,
    write_polygon_text,
)


def _star_cage(rng, convex):
    n = int(rng.integers(4, 13))
    angles = 2.0 * np.pi * (np.arange(n) + 0.5 * rng.random(n)) / n
    radii = np.ones(n) if convex else rng.uniform(0.5, 1.5, n)
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def _interior_point(rng, cage):
    # star-shaped about the origin: any point on a ray to the boundary is inside
    j = int(rng.integers(len(cage)))
    b = cage[j] + rng.uniform(0.1, 0.9) * (cage[(j + 1) % len(cage)] - cage[j])
    return rng.uniform(0.1, 0.9) * b


def _simple_shape(square_cage):
    # theta = (half width, half height) of the cage
    jac = np.zeros((8, 2))
    jac[[0, 6], 0] = -1.0
    jac[[2, 4], 0] = 1.0
    jac[[1, 3], 1] = -1.0
    jac[[5, 7], 1] = 1.0
    cage = CageParameterization(square_cage, jac, np.array([1.0, 1.0]))
    boundary = densify_polygon([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]], 5)
    return build_tool_shape(boundary, cage)


# -----------------------------
# Mean value coordinates
# -----------------------------

def test_mvc_partition_of_unity_and_linear_reproduction():
    rng = np.random.default_rng(42)
    for trial in range(1000):
        cage = _star_cage(rng, convex=trial % 2 == 0)
        x = _interior_point(rng, cage)
        w = compute_mvc_weights(x, cage)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.linalg.norm(w @ cage - x) < 1e-10


def test_mvc_center_of_square_is_uniform(square_cage):
    np.testing.assert_allclose(compute_mvc_weights([0.0, 0.0], square_cage), 0.25, atol=1e-14)


def test_mvc_rejects_outside_and_boundary_points(square_cage):
    with pytest.raises(PointOutsideCage):
        compute_mvc_weights([2.0, 0.0], square_cage)
    with pytest.raises(PointOutsideCage):
        compute_mvc_weights([1.0, 0.0], square_cage)


def test_mvc_rejects_coincident_cage_vertices():
    cage = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DegenerateCage):
        compute_mvc_weights([0.2, 0.2], cage)


def test_mvc_handles_nonconvex_cage():
    # L-shaped cage, point in the inner corner region
    cage = np.array([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]], dtype=float)
    x = np.array([0.5, 1.5])
    w = compute_mvc_weights(x, cage)
    np.testing.assert_allclose(w @ cage, x, atol=1e-12)


def test_point_in_polygon(square_cage):
    assert point_in_polygon([0.2, 0.3], square_cage)
    assert not point_in_polygon([1.2, 0.3], square_cage)


def test_points_in_polygon_on_a_nonconvex_outline():
    rng = np.random.default_rng(3)
    # L-shaped, non-convex
    poly = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]])
    pts = rng.uniform(-0.5, 2.5, size=(500, 2))
    inside = points_in_polygon(pts, poly)
    assert inside.shape == (500,) and inside.dtype == bool
    x, y = pts[:, 0], pts[:, 1]
    expected = ((x > 0) & (x < 2) & (y > 0) & (y < 1)) | ((x > 0) & (x < 1) & (y > 0) & (y < 2))
    np.testing.assert_array_equal(inside, expected)
    assert inside.tolist() == [point_in_polygon(p, poly) for p in pts]
    assert not points_in_polygon(np.array([[1.5, 1.5]]), poly)[0]
    assert points_in_polygon(np.array([[0.5, 1.5]]), poly)[0]


# -----------------------------
# Shapes and deformation
# -----------------------------

def test_build_tool_shape_reports_offending_vertex(square_cage):
    cage = CageParameterization(square_cage, np.zeros((8, 1)), np.zeros(1))
    boundary = np.array([[0.0, 0.0], [0.5, 0.0], [1.5, 0.0]])
    with pytest.raises(PointOutsideCage) as info:
        build_tool_shape(boundary, cage)
    assert info.value.index == 2


def test_deform_at_theta0_reproduces_boundary_exactly(square_cage):
    shape = _simple_shape(square_cage)
    params = MorphParams(np.array([1.0, 1.0]), np.array([0.5, 0.5]), np.array([2.0, 2.0]))
    out = deform(shape, params)
    np.testing.assert_array_equal(out.vertices, shape.boundary)
    assert out.vertex_sensitivities.shape == (shape.num_vertices, 2, 2)


def test_deform_is_affine_in_theta(square_cage):
    shape = _simple_shape(square_cage)
    lo, hi = np.array([0.5, 0.5]), np.array([2.0, 2.0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        theta = rng.uniform(0.8, 1.7, 2)
        step = rng.uniform(-0.05, 0.05, 2)
        at = lambda t: deform(shape, MorphParams(t, lo, hi)).vertices
        second = at(theta + step) - 2.0 * at(theta) + at(theta - step)
        assert np.max(np.abs(second)) < 1e-10


def test_sensitivities_match_finite_differences(square_cage):
    shape = _simple_shape(square_cage)
    lo, hi = np.array([0.5, 0.5]), np.array([2.0, 2.0])
    theta = np.array([1.2, 0.9])
    sens = deform(shape, MorphParams(theta, lo, hi)).vertex_sensitivities
    for k in range(2):
        e = np.zeros(2)
        e[k] = 1e-6
        fd = (deform(shape, MorphParams(theta + e, lo, hi)).vertices - deform(shape, MorphParams(theta - e, lo, hi)).vertices) / 2e-6
        np.testing.assert_allclose(sens[:, :, k], fd, atol=1e-8)


def test_translation_column_gives_identical_sensitivities(square_cage):
    jac = np.zeros((8, 1))
    jac[0::2, 0] = 1.0
    cage = CageParameterization(square_cage, jac, np.zeros(1))
    shape = build_tool_shape(densify_polygon([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]], 3), cage)
    np.testing.assert_allclose(shape.sensitivities[:, 0, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(shape.sensitivities[:, 1, 0], 0.0, atol=1e-15)


def test_morph_params_bounds():
    with pytest.raises(ParamsOutOfBounds):
        MorphParams(np.array([0.0, 3.0]), np.zeros(2), np.ones(2))
    with pytest.raises(GeometryError):
        MorphParams(np.zeros(2), np.zeros(3), np.ones(3))
    p = MorphParams(np.array([0.5]), np.zeros(1), np.ones(1))
    np.testing.assert_array_equal(p.project([1.5]), [1.0])


def test_cage_jacobian_shape_is_checked(square_cage):
    with pytest.raises(GeometryError):
        CageParameterization(square_cage, np.zeros((6, 2)), np.zeros(2))


# -----------------------------
# Export
# -----------------------------

def test_polygon_text_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    verts = rng.normal(size=(17, 2)) * 0.05
    path = write_polygon_text(verts, tmp_path / "tool.txt")
    np.testing.assert_allclose(read_polygon_text(path), verts, rtol=0, atol=1e-12)


def test_polygon_svg_contains_outline_and_cage(square_cage):
    svg = polygon_svg(square_cage * 0.5, cage=square_cage)
    assert svg.startswith("<svg")
    assert svg.count("<path") == 2


def test_densify_keeps_corners():
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    dense = densify_polygon(corners, [4, 2, 1])
    assert dense.shape == (7, 2)
    np.testing.assert_array_equal(dense[[0, 4, 6]], corners)
