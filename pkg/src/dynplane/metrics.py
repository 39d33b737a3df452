"""Reconstruction metrics, the rotation-robustness protocol and plane reports.

Surface metrics sample points uniformly by area on both meshes. Chamfer-L1
and normal consistency pair every sample with its nearest sample on the
other mesh (KD-tree). The F-score measures the exact distance from each
sample to the other mesh's triangles, so "within the threshold" refers to
the surface itself.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .data import SampleRecord, Shape
from .geometry import rotation_xyz
from .meshing import Mesh, ModelField, grid_points, marching_cubes
from .networks import DynamicPlaneONet

logger = logging.getLogger(__name__)

EMPTY_PENALTY = math.sqrt(3.0)  # diagonal of the world cube
DEFAULT_F_THRESHOLD = 0.01
DEFAULT_SURFACE_SAMPLES = 100_000
BOUNDARY_SLACK = 1e-9  # relative slack so distances equal to the threshold count as inside

Oracle = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# volume
# ---------------------------------------------------------------------------
def volumetric_iou(
    pred_occupancy_at: Oracle,
    gt_occupancy_at: Oracle,
    num_points: int = 100_000,
    seed: int = 0,
    domain: tuple[Sequence[float], Sequence[float]] = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5)),
) -> float:
    """Monte-Carlo |A n B| / |A u B| over uniform samples of ``domain``
    (the world cube unless both volumes reach outside it)."""
    lo, hi = (np.asarray(v, dtype=np.float64) for v in domain)
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(num_points, 3))
    a = np.asarray(pred_occupancy_at(pts), dtype=bool)
    b = np.asarray(gt_occupancy_at(pts), dtype=bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


# ---------------------------------------------------------------------------
# surface sampling and distances
# ---------------------------------------------------------------------------
def sample_mesh(mesh: Mesh, n: int, seed: int | np.random.Generator = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` area-uniform surface points and the normals of their faces."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    areas = mesh.face_areas
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    tri = mesh.vertices[mesh.triangles[face]]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts, mesh.face_normals[face]


def _closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p, row-wise (Voronoi-region walk)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.einsum("ij,ij->i", ab, ap), np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3, d4 = np.einsum("ij,ij->i", ab, bp), np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5, d6 = np.einsum("ij,ij->i", ab, cp), np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        assign((d6 >= 0) & (d5 <= d6), c)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + (d1 / (d1 - d3))[:, None] * ab)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + (d2 / (d2 - d6))[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = va + vb + vc
        v, w2 = vb / denom, vc / denom
        assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w2[:, None] * ac)
    return out


def point_mesh_distance(points: np.ndarray, mesh: Mesh, batch: int = 20_000) -> np.ndarray:
    """Exact Euclidean distance from each point to the closest triangle.

    Candidates come from a KD-tree over triangle centroids: no triangle whose
    centroid is farther than (nearest centroid distance + largest triangle
    radius) can be closer than the nearest-centroid triangle.
    """
    tri = mesh.vertices[mesh.triangles]
    cent = tri.mean(axis=1)
    radius = np.linalg.norm(tri - cent[:, None], axis=2).max()
    tree = cKDTree(cent)
    out = np.empty(len(points))
    for s in range(0, len(points), batch):
        p = points[s : s + batch]
        dc, _ = tree.query(p)
        lists = tree.query_ball_point(p, dc + radius + 1e-12)
        counts = np.array([len(x) for x in lists])
        owner = np.repeat(np.arange(len(p)), counts)
        cand = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists])
        closest = _closest_on_triangles(p[owner], tri[cand, 0], tri[cand, 1], tri[cand, 2])
        dist = np.linalg.norm(p[owner] - closest, axis=1)
        best = np.full(len(p), np.inf)
        np.minimum.at(best, owner, dist)
        out[s : s + batch] = best
    return out


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of the two directed mean nearest-neighbour distances."""
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def _samples(pred: Mesh, gt: Mesh, n: int, seed: int):
    # both meshes use the same seed, so identical meshes give identical samples
    return sample_mesh(pred, n, seed), sample_mesh(gt, n, seed)


def _any_empty(pred: Mesh, gt: Mesh, what: str) -> bool:
    if pred.is_empty or gt.is_empty:
        logger.warning("%s: empty mesh, reporting the penalty value", what)
        return True
    return False


def chamfer_l1(pred: Mesh, gt: Mesh, num_surface_samples: int = DEFAULT_SURFACE_SAMPLES, seed: int = 0) -> float:
    if _any_empty(pred, gt, "chamfer_l1"):
        return EMPTY_PENALTY
    (pa, _), (pb, _) = _samples(pred, gt, num_surface_samples, seed)
    return chamfer_points(pa, pb)


def normal_consistency(pred: Mesh, gt: Mesh, num_surface_samples: int = DEFAULT_SURFACE_SAMPLES, seed: int = 0) -> float:
    if _any_empty(pred, gt, "normal_consistency"):
        return 0.0
    (pa, na), (pb, nb) = _samples(pred, gt, num_surface_samples, seed)
    _, ia = cKDTree(pb).query(pa)
    _, ib = cKDTree(pa).query(pb)
    acc = np.abs(np.einsum("ij,ij->i", na, nb[ia])).mean()
    comp = np.abs(np.einsum("ij,ij->i", nb, na[ib])).mean()
    return 0.5 * float(acc + comp)


def f_score(
    pred: Mesh,
    gt: Mesh,
    threshold: float = DEFAULT_F_THRESHOLD,
    num_surface_samples: int = DEFAULT_SURFACE_SAMPLES,
    seed: int = 0,
) -> float:
    if threshold <= 0:
        raise ValueError("f_score threshold must be positive")
    if _any_empty(pred, gt, "f_score"):
        return 0.0
    (pa, _), (pb, _) = _samples(pred, gt, num_surface_samples, seed)
    limit = threshold * (1.0 + BOUNDARY_SLACK)
    precision = float(np.mean(point_mesh_distance(pa, gt) <= limit))
    recall = float(np.mean(point_mesh_distance(pb, pred) <= limit))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class MetricsReport:
    iou: float
    chamfer_l1: float
    normal_consistency: float
    f_score: float
    num_sample_points: int
    f_score_threshold: float
    empty_prediction: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def shape_mesh(shape: Shape, resolution: int = 128) -> Mesh:
    """Ground-truth surface of an analytic shape (marching cubes on its SDF)."""
    sdf = shape.sdf(grid_points(resolution)).reshape((resolution + 1,) * 3)
    return marching_cubes(-sdf, 0.0)


def evaluate_meshes(
    pred: Mesh,
    gt: Mesh,
    pred_occupancy_at: Oracle,
    gt_occupancy_at: Oracle,
    num_surface_samples: int = DEFAULT_SURFACE_SAMPLES,
    num_iou_points: int = 100_000,
    f_threshold: float = DEFAULT_F_THRESHOLD,
    seed: int = 0,
) -> MetricsReport:
    return MetricsReport(
        iou=volumetric_iou(pred_occupancy_at, gt_occupancy_at, num_iou_points, seed),
        chamfer_l1=chamfer_l1(pred, gt, num_surface_samples, seed),
        normal_consistency=normal_consistency(pred, gt, num_surface_samples, seed),
        f_score=f_score(pred, gt, f_threshold, num_surface_samples, seed),
        num_sample_points=num_surface_samples,
        f_score_threshold=f_threshold,
        empty_prediction=pred.is_empty,
    )


def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed so results do not depend on evaluation order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def model_occupancy(model: DynamicPlaneONet, cloud: np.ndarray, threshold: float = 0.5) -> Oracle:
    fld = ModelField(model, cloud)
    return lambda p: fld(p) >= threshold


def write_reports(path: str | Path, names: Sequence[str], reports: Sequence[MetricsReport]) -> None:
    """Per-sample rows followed by a ``mean`` row."""
    path = Path(path)
    fields = ["sample", *MetricsReport.__dataclass_fields__]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for name, rep in zip(names, reports):
            writer.writerow({"sample": name, **rep.to_dict()})
        if reports:
            mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("iou", "chamfer_l1", "normal_consistency", "f_score")}
            writer.writerow({"sample": "mean", **mean, "num_sample_points": reports[0].num_sample_points,
                             "f_score_threshold": reports[0].f_score_threshold,
                             "empty_prediction": sum(r.empty_prediction for r in reports)})


# ---------------------------------------------------------------------------
# rotation robustness
# ---------------------------------------------------------------------------
@dataclass
class RotationEvalConfig:
    theta_max: Sequence[float] = (0.0, 15.0, 30.0, 45.0)  # degrees
    num_rotations_per_sample: int = 1
    seed: int = 0
    num_iou_points: int = 20_000


def rotated_oracle(shape: Shape, rot: np.ndarray) -> Oracle:
    """Occupancy of the shape rotated by ``rot``: p is inside iff R^T p is."""
    return lambda p: shape.occupancy(np.asarray(p, dtype=np.float64) @ rot)


def rotation_eval(
    model: DynamicPlaneONet, records: Sequence[SampleRecord], cfg: RotationEvalConfig
) -> list[tuple[float, float]]:
    """Mean IoU per theta_max. Each sample draws fixed unit fractions u in
    [0, 1]^3 and is rotated by u * theta_max about x, y, z, so the sweep uses
    common random numbers; IoU points are the same across the sweep."""
    table = []
    for theta in cfg.theta_max:
        ious = []
        for idx, rec in enumerate(records):
            for k in range(cfg.num_rotations_per_sample):
                u = np.random.default_rng([cfg.seed, idx, k]).uniform(size=3)
                rot = rotation_xyz(*np.radians(u * theta))
                cloud = rec.input_cloud.astype(np.float64) @ rot.T
                ious.append(
                    volumetric_iou(
                        model_occupancy(model, cloud),
                        rotated_oracle(rec.shape, rot),
                        cfg.num_iou_points,
                        sample_seed(cfg.seed, idx),
                    )
                )
        table.append((float(theta), float(np.mean(ious))))
    return table


def write_rotation_table(path: str | Path, table: Sequence[tuple[float, float]]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta_max_deg", "mean_iou"])
        writer.writerows([(t, repr(v)) for t, v in table])


# ---------------------------------------------------------------------------
# plane distribution
# ---------------------------------------------------------------------------
@dataclass
class PlaneReport:
    rows: list[tuple[str, int, float, float, float, int]]  # sample, plane, nx, ny, nz, hemisphere
    pairwise_angles: np.ndarray  # degrees, every unordered pair of every sample
    histogram: np.ndarray
    bin_edges: np.ndarray

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "plane", "nx", "ny", "nz", "hemisphere"])
            writer.writerows([(s, i, repr(x), repr(y), repr(z), h) for s, i, x, y, z, h in self.rows])
        with path.with_name(path.stem + "_angles.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo_deg", "bin_hi_deg", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.histogram):
                writer.writerow([lo, hi, int(c)])


def pairwise_angles(normals: np.ndarray) -> np.ndarray:
    """Angles in degrees between every unordered pair of unit normals."""
    n = np.asarray(normals, dtype=np.float64)
    rows, cols = np.triu_indices(len(n), k=1)
    cos = np.clip(np.einsum("ij,ij->i", n[rows], n[cols]), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def plane_report(model: DynamicPlaneONet, records: Sequence[SampleRecord], bin_width: float = 15.0) -> PlaneReport:
    """Predicted unit normals per sample. The hemisphere column is the sign of
    n_z (+1 drawn as a dot, -1 as a star in a top view)."""
    rows, angles = [], []
    for idx, rec in enumerate(records):
        normals = model.predict_normals(rec.input_cloud)[0]
        name = rec.name or str(idx)
        for i, (x, y, z) in enumerate(normals):
            rows.append((name, i, float(x), float(y), float(z), 1 if z >= 0 else -1))
        angles.append(pairwise_angles(normals))
    all_angles = np.concatenate(angles) if angles else np.zeros(0)
    edges = np.arange(0.0, 180.0 + bin_width, bin_width)
    hist, _ = np.histogram(all_angles, bins=edges)
    return PlaneReport(rows, all_angles, hist, edges)
