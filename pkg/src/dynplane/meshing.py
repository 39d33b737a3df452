"""Occupancy field to triangle mesh: coarse-to-fine extraction and a dense oracle.

A field is any callable mapping an M x 3 array of world points to M
occupancy probabilities. ``ModelField`` wraps a trained network and a fixed
input cloud. Grid corners for resolution R sit at -0.5 + i / R, i = 0..R.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage
from skimage import measure

from . import autodiff as ad
from .networks import DynamicPlaneONet

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray], np.ndarray]


@dataclass
class MeshingConfig:
    initial_resolution: int = 32
    final_resolution: int = 128
    threshold: float = 0.5
    chunk_size: int = 65536
    # also refine voxels with a corner this close to the threshold; catches
    # dips and bumps that cross it between coarse corners
    near_margin: float = 0.1

    def __post_init__(self):
        ratio = self.final_resolution / self.initial_resolution
        steps = int(round(np.log2(ratio))) if ratio >= 1 else -1
        if self.initial_resolution < 1 or steps < 0 or self.initial_resolution * 2**steps != self.final_resolution:
            raise ValueError("final_resolution must equal initial_resolution * 2^k")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")
        if self.near_margin < 0:
            raise ValueError("near_margin must be non-negative")

    @property
    def refinement_steps(self) -> int:
        return int(round(np.log2(self.final_resolution / self.initial_resolution)))


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def _cross(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    @property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        c = self._cross()
        length = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(length > 0, length, 1.0)

    def euler_characteristic(self) -> int:
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        num_edges = len(np.unique(edges, axis=0))
        num_vertices = len(np.unique(self.triangles))
        return num_vertices - num_edges + len(self.triangles)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------
class ModelField:
    """Occupancy probabilities of a trained model for one input cloud."""

    def __init__(self, model: DynamicPlaneONet, cloud: np.ndarray, chunk_size: int = 65536):
        self.model = model
        self.chunk_size = chunk_size
        with ad.no_grad():
            self.encoding = model.encode(np.asarray(cloud)[None])

    def logits(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = []
        with ad.no_grad():
            for s in range(0, len(points), self.chunk_size):
                out.append(self.model.decode(points[None, s : s + self.chunk_size], self.encoding).data[0])
        return np.concatenate(out).astype(np.float64) if out else np.zeros(0)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        z = self.logits(points)
        return np.exp(-np.logaddexp(0.0, -z))  # stable sigmoid


class CountingField:
    """Wraps a field and counts point evaluations."""

    def __init__(self, fn: Field):
        self.fn = fn
        self.count = 0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        self.count += len(points)
        return self.fn(points)


def evaluate_field(queries: np.ndarray, fn: Field, chunk_size: int = 65536) -> np.ndarray:
    """Probabilities at ``queries``, evaluated in chunks of ``chunk_size``."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    parts = [np.asarray(fn(queries[s : s + chunk_size]), dtype=np.float64) for s in range(0, len(queries), chunk_size)]
    return np.concatenate(parts) if parts else np.zeros(0)


def grid_points(resolution: int) -> np.ndarray:
    axis = -0.5 + np.arange(resolution + 1) / resolution
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------
def _cleanup(verts: np.ndarray, faces: np.ndarray) -> Mesh:
    """Drop triangles with repeated indices or zero area, then unused vertices."""
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
    if len(faces):
        tri = verts[faces]
        area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        faces = faces[area2 > 1e-20]
    used, inverse = np.unique(faces, return_inverse=True)
    return Mesh(verts[used], inverse.reshape(-1, 3))


def marching_cubes(corner_values: np.ndarray, threshold: float = 0.5, resolution: Optional[int] = None) -> Mesh:
    """Isosurface of an (R+1)^3 corner grid at ``threshold``, in world coordinates.

    Vertices are linearly interpolated along cube edges; face winding makes
    normals point from occupied (>= threshold) to free space.
    """
    values = np.asarray(corner_values, dtype=np.float64)
    if values.ndim != 3 or len(set(values.shape)) != 1:
        raise ValueError(f"expected a cubic corner grid, got shape {values.shape}")
    res = resolution or values.shape[0] - 1
    if not (values.min() < threshold <= values.max()):
        logger.warning("no isosurface crossing at threshold %s; returning an empty mesh", threshold)
        return Mesh()
    # skimage expects the surface between samples; our occupied side is >= threshold
    verts, faces, _, _ = measure.marching_cubes(values, level=threshold, spacing=(1.0 / res,) * 3, method="lewiner")
    mesh = _cleanup(verts - 0.5, faces.astype(np.int64))
    # skimage's winding yields inward normals for fields that are high inside
    mesh.triangles = mesh.triangles[:, ::-1].copy()
    return mesh


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------
@dataclass
class Extraction:
    mesh: Mesh
    values: np.ndarray  # (R+1)^3 corner values at the final resolution
    evaluations: int
    evaluated: Optional[np.ndarray] = None  # mask of truly evaluated corners

    def occupied(self, threshold: float) -> np.ndarray:
        return self.values >= threshold


def dense_extract(fn: Field, resolution: int, threshold: float = 0.5, chunk_size: int = 65536) -> Extraction:
    counter = CountingField(fn)
    values = evaluate_field(grid_points(resolution), counter, chunk_size).reshape((resolution + 1,) * 3)
    return Extraction(marching_cubes(values, threshold), values, counter.count, np.ones(values.shape, bool))


def _mixed_voxels(occ: np.ndarray) -> np.ndarray:
    """Voxels whose 8 corners are not all on the same side."""
    corners = [occ[i : i + occ.shape[0] - 1, j : j + occ.shape[1] - 1, k : k + occ.shape[2] - 1]
               for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    stacked = np.stack(corners)
    return stacked.any(axis=0) & ~stacked.all(axis=0)


def _near_voxels(values: np.ndarray, threshold: float, margin: float) -> np.ndarray:
    """Voxels with at least one corner within ``margin`` of the threshold."""
    near = np.abs(values - threshold) < margin
    n = near.shape[0] - 1
    out = np.zeros((n, n, n), dtype=bool)
    for i in (0, 1):
        for j in (0, 1):
            for k in (0, 1):
                out |= near[i : i + n, j : j + n, k : k + n]
    return out


def _dilate(mask: np.ndarray) -> np.ndarray:
    """One-voxel ring (26-neighbourhood) around ``mask``."""
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), dtype=bool))


def _upsample_trilinear(coarse: np.ndarray) -> np.ndarray:
    n = coarse.shape[0]
    fine = np.empty((2 * n - 1,) * 3)
    fine[::2, ::2, ::2] = coarse
    fine[1::2, ::2, ::2] = 0.5 * (fine[:-1:2, ::2, ::2] + fine[2::2, ::2, ::2])
    fine[:, 1::2, ::2] = 0.5 * (fine[:, :-1:2, ::2] + fine[:, 2::2, ::2])
    fine[:, :, 1::2] = 0.5 * (fine[:, :, :-1:2] + fine[:, :, 2::2])
    return fine


def mise_extract(fn: Field, cfg: MeshingConfig) -> Extraction:
    """Coarse-to-fine extraction.

    Evaluate the initial grid, then at each octave evaluate only the corners
    of voxels whose corners straddle the threshold or come within
    ``near_margin`` of it (plus a one-voxel ring);
    all other fine corners are trilinearly filled from the coarser level.
    """
    counter = CountingField(fn)
    res = cfg.initial_resolution
    values = evaluate_field(grid_points(res), counter, cfg.chunk_size).reshape((res + 1,) * 3)
    evaluated = np.ones(values.shape, dtype=bool)
    for _ in range(cfg.refinement_steps):
        active = _mixed_voxels(values >= cfg.threshold)
        if cfg.near_margin > 0:
            active |= _near_voxels(values, cfg.threshold, cfg.near_margin)
        active = _dilate(active)
        values = _upsample_trilinear(values)
        was = np.zeros(values.shape, dtype=bool)
        was[::2, ::2, ::2] = evaluated
        res *= 2
        # fine corners of every active coarse voxel: a 3x3x3 block per voxel
        need = np.zeros(values.shape, dtype=bool)
        ai, aj, ak = np.nonzero(active)
        for di in range(3):
            for dj in range(3):
                for dk in range(3):
                    need[2 * ai + di, 2 * aj + dj, 2 * ak + dk] = True
        need &= ~was
        idx = np.nonzero(need)
        if len(idx[0]):
            pts = -0.5 + np.stack(idx, axis=1) / res
            values[idx] = evaluate_field(pts, counter, cfg.chunk_size)
        evaluated = was | need
    return Extraction(marching_cubes(values, cfg.threshold), values, counter.count, evaluated)


def extract_mesh(model: DynamicPlaneONet, cloud: np.ndarray, cfg: Optional[MeshingConfig] = None) -> Mesh:
    cfg = cfg or MeshingConfig()
    return mise_extract(ModelField(model, cloud, cfg.chunk_size), cfg).mesh


# ---------------------------------------------------------------------------
# OBJ io
# ---------------------------------------------------------------------------
def export_obj(mesh: Mesh, path: str | Path) -> None:
    path = Path(path)
    lines = ["# dynplane mesh", f"# {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed to write OBJ {path}: {exc}") from exc


def read_obj(path: str | Path) -> Mesh:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed to read OBJ {path}: {exc}") from exc
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            # keep only the vertex index of "i/t/n" tokens
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
        else:
            logger.debug("%s:%d: ignoring OBJ record %r", path, lineno, parts[0])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
