"""Plane mathematics: normalization, basis change, projection, grid indexing.

World coordinates live in the cube [-0.5, 0.5]^3. A plane through the
origin with unit normal ``n_hat`` gets an in-plane basis (i_p, j_p) by
rotating the canonical x/y axes with the rotation that takes z onto
``n_hat``. Projected coordinates are divided by a normalization constant
so that every point of the cube lands inside the plane's square.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

EPS_NORMAL = 1e-8
UNIT_TOL = 1e-6

E_X = np.array([1.0, 0.0, 0.0])
E_Y = np.array([0.0, 1.0, 0.0])
E_Z = np.array([0.0, 0.0, 1.0])
FALLBACK_NORMAL = E_Z


@dataclass(frozen=True)
class PlaneParams:
    normal_raw: np.ndarray
    intercept: float = 0.0

    def __post_init__(self):
        if self.intercept != 0.0:
            raise ValueError("plane intercept is fixed at 0")


@dataclass(frozen=True)
class PlaneBasis:
    n_hat: np.ndarray
    i_p: np.ndarray
    j_p: np.ndarray
    c_norm: float

    def matrix(self) -> np.ndarray:
        """Columns (i_p, j_p, n_hat)."""
        return np.stack([self.i_p, self.j_p, self.n_hat], axis=1)


@dataclass(frozen=True)
class PositionalEncodingConfig:
    num_frequencies: int = 10
    enabled: bool = True

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be positive")

    def output_dim(self, input_dim: int = 3) -> int:
        return input_dim * 2 * self.num_frequencies if self.enabled else input_dim


def normalize_plane(p: PlaneParams | np.ndarray) -> tuple[np.ndarray, bool]:
    """Unit normal of a plane and whether the degenerate fallback was used.

    Raw normals shorter than 1e-8 fall back to +z.
    """
    raw = np.asarray(p.normal_raw if isinstance(p, PlaneParams) else p, dtype=np.float64)
    norm = float(np.linalg.norm(raw))
    if norm < EPS_NORMAL:
        logger.warning("degenerate plane normal %s; falling back to +z", raw)
        return FALLBACK_NORMAL.copy(), True
    return raw / norm, False


def skew(v: np.ndarray) -> np.ndarray:
    v1, v2, v3 = v
    return np.array([[0.0, -v3, v2], [v3, 0.0, -v1], [-v2, v1, 0.0]])


def rotation_from_k(n_hat: np.ndarray) -> np.ndarray:
    """Rotation taking the z axis onto ``n_hat``.

    R = I + [v]x + [v]x^2 (1 - k.n) / |v|^2 with v = k x n. When n is
    (anti)parallel to k the formula degenerates: the aligned case is the
    identity and the antiparallel case is the half-turn about x.
    """
    n_hat = np.asarray(n_hat, dtype=np.float64)
    if n_hat.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {n_hat.shape}")
    if abs(np.linalg.norm(n_hat) - 1.0) > UNIT_TOL:
        raise ValueError(f"rotation_from_k needs a unit normal, |n| = {np.linalg.norm(n_hat)}")
    v = np.cross(E_Z, n_hat)
    vv = float(v @ v)
    cos = float(E_Z @ n_hat)
    if np.sqrt(vv) < EPS_NORMAL:
        if cos > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])
    vx = skew(v)
    return np.eye(3) + vx + vx @ vx * ((1.0 - cos) / vv)


def normalization_constant(i_p: np.ndarray, j_p: np.ndarray) -> float:
    """Largest length of the projections of (1, 1, 1) onto |i_p| and |j_p|."""
    ones = np.ones(3)
    lengths = []
    for axis in (i_p, j_p):
        pos = np.abs(axis)
        proj = (ones @ pos) / (pos @ pos) * pos
        lengths.append(float(np.linalg.norm(proj)))
    return max(lengths)


def build_plane_basis(n_hat: np.ndarray) -> PlaneBasis:
    n_hat = np.asarray(n_hat, dtype=np.float64)
    rot = rotation_from_k(n_hat)
    i_p = rot @ E_X
    j_p = rot @ E_Y
    return PlaneBasis(n_hat=rot @ E_Z, i_p=i_p, j_p=j_p, c_norm=normalization_constant(i_p, j_p))


def basis_from_raw(normal_raw: np.ndarray) -> PlaneBasis:
    n_hat, _ = normalize_plane(normal_raw)
    return build_plane_basis(n_hat)


def project_points(points: np.ndarray, basis: PlaneBasis) -> np.ndarray:
    """Plane coordinates (p.i_p / c, p.j_p / c) of world points."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ np.stack([basis.i_p, basis.j_p], axis=1) / basis.c_norm


def grid_index(plane_coords: np.ndarray, resolution: int) -> np.ndarray:
    """Row-major cell ids; the first coordinate selects the column."""
    cells = np.floor((np.asarray(plane_coords, dtype=np.float64) + 0.5) * resolution).astype(np.int64)
    cells = np.clip(cells, 0, resolution - 1)
    return cells[:, 1] * resolution + cells[:, 0]


def plane_uv(plane_coords: np.ndarray) -> np.ndarray:
    """Map plane coordinates in [-0.5, 0.5]^2 to [0, 1]^2 for bilinear lookup."""
    return np.clip(np.asarray(plane_coords, dtype=np.float64) + 0.5, 0.0, 1.0)


def positional_encoding(points: np.ndarray, cfg: PositionalEncodingConfig) -> np.ndarray:
    """sin/cos features at frequencies 2^0 pi ... 2^(L-1) pi.

    Output layout per scalar coordinate: (sin f0, cos f0, sin f1, cos f1, ...),
    coordinates concatenated in order. Disabled configs return the input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if not cfg.enabled:
        return pts
    freqs = (2.0 ** np.arange(cfg.num_frequencies)) * np.pi
    angles = pts[..., :, None] * freqs  # (..., 3, L)
    enc = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., 3, L, 2)
    return enc.reshape(*pts.shape[:-1], pts.shape[-1] * 2 * cfg.num_frequencies)


def canonical_normals() -> np.ndarray:
    """Normals of the three axis-aligned planes x=0, y=0, z=0."""
    return np.eye(3)


def rotation_xyz(theta_x: float, theta_y: float, theta_z: float) -> np.ndarray:
    """Rotation about x, then y, then z (angles in radians)."""
    cx, sx = np.cos(theta_x), np.sin(theta_x)
    cy, sy = np.cos(theta_y), np.sin(theta_y)
    cz, sz = np.cos(theta_z), np.sin(theta_z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx
