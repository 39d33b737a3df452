import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynplane.geometry import (
    PlaneParams,
    PositionalEncodingConfig,
    build_plane_basis,
    grid_index,
    normalization_constant,
    normalize_plane,
    positional_encoding,
    project_points,
    rotation_from_k,
    rotation_xyz,
)

unit_vectors = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(lambda v: np.linalg.norm(v) > 1e-3)


def axis_angle(axis, angle):
    """Independent rotation oracle (Rodrigues via quaternion)."""
    axis = np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis)
    w, (x, y, z) = math.cos(angle / 2), axis * math.sin(angle / 2)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# -- normalize_plane -----------------------------------------------------------
@pytest.mark.parametrize("raw,expected", [((0, 0, 2), (0, 0, 1)), ((3, 0, 4), (0.6, 0, 0.8))])
def test_normalize_plane(raw, expected):
    n, degenerate = normalize_plane(PlaneParams(np.array(raw, dtype=float)))
    assert np.allclose(n, expected) and not degenerate


def test_normalize_plane_fallback(caplog):
    n, degenerate = normalize_plane(np.array([1e-12, 0, 0]))
    assert np.array_equal(n, [0, 0, 1]) and degenerate
    assert "degenerate" in caplog.text


def test_plane_intercept_is_fixed():
    with pytest.raises(ValueError):
        PlaneParams(np.ones(3), intercept=0.2)


# -- rotation_from_k ---------------------------------------------------------------
def test_rotation_aligned_and_antiparallel():
    assert np.array_equal(rotation_from_k(np.array([0.0, 0, 1])), np.eye(3))
    assert np.array_equal(rotation_from_k(np.array([0.0, 0, -1])), np.diag([1.0, -1, -1]))


def test_rotation_x_axis_matches_axis_angle_oracle():
    r = rotation_from_k(np.array([1.0, 0, 0]))
    # k -> i is a quarter turn about k x i = +y
    assert np.allclose(r, axis_angle([0, 1, 0], math.pi / 2), atol=1e-12)
    assert np.allclose(r @ [0, 0, 1], [1, 0, 0])


@settings(max_examples=200, deadline=None)
@given(unit_vectors)
def test_rotation_matches_minimal_axis_angle(v):
    n = np.array(v) / np.linalg.norm(v)
    if n[2] < -1 + 1e-6:
        return
    axis = np.cross([0, 0, 1], n)
    if np.linalg.norm(axis) < 1e-8:
        return
    angle = math.acos(np.clip(n[2], -1, 1))
    assert np.allclose(rotation_from_k(n), axis_angle(axis, angle), atol=1e-9)


def test_rotation_near_antiparallel_is_orthonormal():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = np.array([0, 0, -1.0]) + rng.normal(scale=1e-4, size=3)
        n /= np.linalg.norm(n)
        r = rotation_from_k(n)
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-6
        assert np.abs(r @ [0, 0, 1] - n).max() < 1e-6


def test_rotation_rejects_non_unit():
    with pytest.raises(ValueError):
        rotation_from_k(np.array([0.0, 0.0, 2.0]))


# -- basis -----------------------------------------------------------------------
def test_canonical_ground_plane_basis():
    b = build_plane_basis(np.array([0.0, 0, 1]))
    assert np.array_equal(b.i_p, [1, 0, 0]) and np.array_equal(b.j_p, [0, 1, 0]) and b.c_norm == 1.0


def test_x_normal_basis_right_handed():
    b = build_plane_basis(np.array([1.0, 0, 0]))
    m = b.matrix()
    assert np.allclose(m.T @ m, np.eye(3)) and abs(np.linalg.det(m) - 1) < 1e-9


def test_random_bases_satisfy_invariants():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n, _ = normalize_plane(rng.normal(size=3))
        b = build_plane_basis(n)
        m = b.matrix()
        assert np.abs(m.T @ m - np.eye(3)).max() < 1e-6
        assert abs(np.linalg.det(m) - 1) < 1e-6
        assert b.c_norm >= 1.0 - 1e-12


def test_basis_is_bitwise_deterministic():
    n = np.array([0.3, -0.4, 0.5])
    n /= np.linalg.norm(n)
    a, b = build_plane_basis(n), build_plane_basis(n.copy())
    assert a.i_p.tobytes() == b.i_p.tobytes() and a.c_norm == b.c_norm


# -- normalization constant ---------------------------------------------------------
def test_normalization_constant_canonical():
    assert normalization_constant(np.array([1.0, 0, 0]), np.array([0.0, 1, 0])) == 1.0


def test_normalization_constant_diagonal_axis():
    i_p = np.array([1.0, 1.0, 0.0]) / math.sqrt(2)
    j_p = np.array([0.0, 0.0, 1.0])
    assert normalization_constant(i_p, j_p) == pytest.approx(math.sqrt(2))


def test_normalization_constant_is_tight_over_cube_corners():
    """Brute force: the worst cube corner lands exactly on the square's edge."""
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    rng = np.random.default_rng(2)
    for _ in range(500):
        n, _ = normalize_plane(rng.normal(size=3))
        b = build_plane_basis(n)
        coords = project_points(corners, b)
        assert np.abs(coords).max() == pytest.approx(0.5, abs=1e-12)


# -- projection ---------------------------------------------------------------------
def test_project_canonical_drops_z():
    b = build_plane_basis(np.array([0.0, 0, 1]))
    assert np.allclose(project_points(np.array([[0.3, -0.2, 0.5]]), b), [[0.3, -0.2]])


def test_projection_is_orthographic():
    b = build_plane_basis(np.array([0.0, 0, 1]))
    p = np.array([[0.1, 0.2, -0.4], [0.1, 0.2, 0.3]])
    c = project_points(p, b)
    assert np.array_equal(c[0], c[1])


def test_projection_bounds_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, _ = normalize_plane(rng.normal(size=3))
        pts = rng.uniform(-0.5, 0.5, size=(10_000, 3))
        assert np.abs(project_points(pts, build_plane_basis(n))).max() <= 0.5 + 1e-12


# -- grid index ----------------------------------------------------------------------
def test_grid_index_corners_and_boundary():
    assert grid_index(np.array([[-0.5, -0.5]]), 64)[0] == 0
    assert grid_index(np.array([[0.4999, 0.4999]]), 64)[0] == 4095
    assert grid_index(np.array([[0.0, 0.0]]), 2)[0] == 3
    assert grid_index(np.array([[0.5, 0.5]]), 4)[0] == 15  # closed upper edge clamps


def test_grid_index_first_coordinate_is_column():
    assert grid_index(np.array([[0.3, -0.5]]), 4)[0] == 3
    assert grid_index(np.array([[-0.5, 0.3]]), 4)[0] == 12


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0, 0.2))
def test_grid_index_monotone(u, v, du):
    res = 16
    a = grid_index(np.array([[u, v]]), res)[0]
    b = grid_index(np.array([[min(u + du, 0.5), v]]), res)[0]
    c = grid_index(np.array([[u, min(v + du, 0.5)]]), res)[0]
    assert b % res >= a % res and c // res >= a // res


# -- positional encoding ---------------------------------------------------------------
def test_positional_encoding_zero_pattern():
    enc = positional_encoding(np.zeros((1, 3)), PositionalEncodingConfig(10))
    assert enc.shape == (1, 60) and np.array_equal(enc[0], np.tile([0.0, 1.0], 30))


def test_positional_encoding_half():
    enc = positional_encoding(np.array([[0.5]]), PositionalEncodingConfig(1))
    assert np.allclose(enc, [[1.0, 0.0]], atol=1e-15)


def test_positional_encoding_layout_and_range():
    cfg = PositionalEncodingConfig(4)
    p = np.random.default_rng(4).uniform(-0.5, 0.5, size=(10, 3))
    enc = positional_encoding(p, cfg)
    assert enc.shape == (10, 24) and cfg.output_dim(3) == 24
    assert np.abs(enc).max() <= 1.0
    # coordinate y, frequency 2 -> columns 8 + 4, 8 + 5
    assert np.allclose(enc[:, 12], np.sin(4 * np.pi * p[:, 1]))
    assert np.allclose(enc[:, 13], np.cos(4 * np.pi * p[:, 1]))


def test_positional_encoding_first_band_period_two():
    p = np.random.default_rng(5).uniform(-0.5, 0.5, size=(10, 3))
    cfg = PositionalEncodingConfig(1)
    assert np.allclose(positional_encoding(p, cfg), positional_encoding(p + 2.0, cfg))


def test_positional_encoding_disabled_passthrough():
    p = np.ones((2, 3))
    assert np.array_equal(positional_encoding(p, PositionalEncodingConfig(10, enabled=False)), p)


def test_rotation_xyz_composition():
    r = rotation_xyz(0.1, 0.2, 0.3)
    assert np.allclose(r, axis_angle([0, 0, 1], 0.3) @ axis_angle([0, 1, 0], 0.2) @ axis_angle([1, 0, 0], 0.1))
    assert np.array_equal(rotation_xyz(0, 0, 0), np.eye(3))
