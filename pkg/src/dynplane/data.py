"""Synthetic analytic-shape datasets.

Shapes are CSG trees over spheres, boxes, tori and capped cylinders. Their
occupancy is exact, which gives ground-truth labels and metric oracles
without any mesh processing. Every shape must fit inside [-0.45, 0.45]^3.
"""

from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import rotation_xyz

logger = logging.getLogger(__name__)

SHAPE_BOUND = 0.45
SAMPLE_MAGIC = b"DPCS"
SAMPLE_VERSION = 1
BOUNDARY_EPS = 1e-5


class DegenerateShapeError(RuntimeError):
    pass


class SampleFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CSG nodes
# ---------------------------------------------------------------------------
def _fmt(*values: float) -> str:
    return " ".join(repr(float(v)) for v in values)


class Shape:
    """Base CSG node. ``sdf`` is exact for primitives and a bound for CSG."""

    def sdf(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def occupancy(self, p: np.ndarray) -> np.ndarray:
        """Boolean occupancy; boundary points count as occupied."""
        return self.sdf(np.asarray(p, dtype=np.float64).reshape(-1, 3)) <= 0.0

    def leaves(self, transform=None) -> list[tuple["Primitive", np.ndarray, np.ndarray]]:
        """Primitives with their accumulated world rotation and translation."""
        raise NotImplementedError

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Conservative axis-aligned bounding box (lo, hi)."""
        raise NotImplementedError

    def to_text(self) -> str:
        raise NotImplementedError

    def scaled(self, s: float) -> "Shape":
        """The same shape uniformly scaled about the origin."""
        raise NotImplementedError

    def __eq__(self, other) -> bool:
        return isinstance(other, Shape) and self.to_text() == other.to_text()

    def __hash__(self) -> int:
        return hash(self.to_text())

    def __repr__(self) -> str:
        return self.to_text()


class Primitive(Shape):
    def leaves(self, transform=None):
        rot, trans = transform if transform is not None else (np.eye(3), np.zeros(3))
        return [(self, rot, trans)]

    def area(self) -> float:
        raise NotImplementedError

    def sample_local(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` area-uniform surface points and outward normals."""
        raise NotImplementedError

    def _corners(self) -> np.ndarray:
        lo, hi = self.bounds()
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


@dataclass(eq=False, repr=False)
class Sphere(Primitive):
    center: Sequence[float]
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def area(self):
        return 4 * math.pi * self.radius**2

    def sample_local(self, n, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d, d

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius

    def to_text(self):
        return f"(sphere {_fmt(*self.center, self.radius)})"

    def scaled(self, s):
        return Sphere([s * v for v in self.center], s * self.radius)


@dataclass(eq=False, repr=False)
class Box(Primitive):
    center: Sequence[float]
    half_extents: Sequence[float]

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def face_areas(self) -> np.ndarray:
        hx, hy, hz = self.half_extents
        per_axis = np.array([4 * hy * hz, 4 * hx * hz, 4 * hx * hy])
        return np.repeat(per_axis, 2)  # faces -x, +x, -y, +y, -z, +z

    def area(self):
        return float(self.face_areas().sum())

    def sample_local(self, n, rng):
        h = np.asarray(self.half_extents, dtype=np.float64)
        areas = self.face_areas()
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        normals = np.zeros((n, 3))
        normals[np.arange(n), axis] = sign
        return pts + np.asarray(self.center), normals

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        return c - h, c + h

    def to_text(self):
        return f"(box {_fmt(*self.center, *self.half_extents)})"

    def scaled(self, s):
        return Box([s * v for v in self.center], [s * v for v in self.half_extents])


@dataclass(eq=False, repr=False)
class Torus(Primitive):
    """Torus around the z axis through ``center``."""

    center: Sequence[float]
    major_radius: float
    minor_radius: float

    def sdf(self, p):
        q = p - np.asarray(self.center)
        ring = np.linalg.norm(q[:, :2], axis=-1) - self.major_radius
        return np.sqrt(ring**2 + q[:, 2] ** 2) - self.minor_radius

    def area(self):
        return 4 * math.pi**2 * self.major_radius * self.minor_radius

    def sample_local(self, n, rng):
        big, small = self.major_radius, self.minor_radius
        out_v = np.empty(0)
        while out_v.size < n:
            v = rng.uniform(0, 2 * math.pi, size=2 * n)
            keep = rng.uniform(0, big + small, size=2 * n) < big + small * np.cos(v)
            out_v = np.concatenate([out_v, v[keep]])
        v = out_v[:n]
        u = rng.uniform(0, 2 * math.pi, size=n)
        normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        ring = np.stack([big * np.cos(u), big * np.sin(u), np.zeros(n)], axis=1)
        return np.asarray(self.center) + ring + small * normals, normals

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        ext = np.array([self.major_radius + self.minor_radius] * 2 + [self.minor_radius])
        return c - ext, c + ext

    def to_text(self):
        return f"(torus {_fmt(*self.center, self.major_radius, self.minor_radius)})"

    def scaled(self, s):
        return Torus([s * v for v in self.center], s * self.major_radius, s * self.minor_radius)


def _frame(axis: np.ndarray) -> np.ndarray:
    """Orthonormal frame whose third column is ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    return np.stack([u, np.cross(a, u), a], axis=1)


@dataclass(eq=False, repr=False)
class Cylinder(Primitive):
    center: Sequence[float]
    axis: Sequence[float]
    radius: float
    half_height: float

    def _local(self, p):
        return (p - np.asarray(self.center)) @ _frame(self.axis)

    def sdf(self, p):
        q = self._local(p)
        d = np.stack([np.linalg.norm(q[:, :2], axis=-1) - self.radius, np.abs(q[:, 2]) - self.half_height], axis=1)
        return np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1)

    def area(self):
        return 2 * math.pi * self.radius * 2 * self.half_height + 2 * math.pi * self.radius**2

    def sample_local(self, n, rng):
        r, hh = self.radius, self.half_height
        side = 4 * math.pi * r * hh
        cap = math.pi * r**2
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * math.pi, size=n)
        pts = np.empty((n, 3))
        normals = np.zeros((n, 3))
        s = part == 0
        pts[s] = np.stack([r * np.cos(theta[s]), r * np.sin(theta[s]), rng.uniform(-hh, hh, s.sum())], axis=1)
        normals[s] = np.stack([np.cos(theta[s]), np.sin(theta[s]), np.zeros(s.sum())], axis=1)
        for which, z in ((1, -hh), (2, hh)):
            c = part == which
            rho = r * np.sqrt(rng.uniform(0, 1, c.sum()))
            pts[c] = np.stack([rho * np.cos(theta[c]), rho * np.sin(theta[c]), np.full(c.sum(), z)], axis=1)
            normals[c, 2] = np.sign(z)
        frame = _frame(self.axis)
        return pts @ frame.T + np.asarray(self.center), normals @ frame.T

    def bounds(self):
        frame = _frame(self.axis)
        c = np.asarray(self.center, dtype=np.float64)
        a = frame[:, 2]
        # extent of a disc of radius r with normal a, plus the axial half-length
        ext = self.radius * np.sqrt(np.clip(1 - a**2, 0, 1)) + self.half_height * np.abs(a)
        return c - ext, c + ext

    def to_text(self):
        return f"(cylinder {_fmt(*self.center, *self.axis, self.radius, self.half_height)})"

    def scaled(self, s):
        return Cylinder([s * v for v in self.center], list(self.axis), s * self.radius, s * self.half_height)


@dataclass(eq=False, repr=False)
class CSG(Shape):
    op: str
    children: list[Shape] = field(default_factory=list)

    def __post_init__(self):
        if self.op not in ("union", "intersection", "difference"):
            raise ValueError(f"unknown CSG op {self.op!r}")
        if len(self.children) < 2 or (self.op == "difference" and len(self.children) != 2):
            raise ValueError(f"{self.op} needs two children (difference exactly two)")

    def sdf(self, p):
        vals = [c.sdf(p) for c in self.children]
        if self.op == "union":
            return np.minimum.reduce(vals)
        if self.op == "intersection":
            return np.maximum.reduce(vals)
        return np.maximum(vals[0], -vals[1])

    def occupancy(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        occ = [c.occupancy(p) for c in self.children]
        if self.op == "union":
            return np.logical_or.reduce(occ)
        if self.op == "intersection":
            return np.logical_and.reduce(occ)
        # boundary of the subtracted solid stays occupied (closed set convention)
        return occ[0] & ~(self.children[1].sdf(p) < 0.0)

    def leaves(self, transform=None):
        out = []
        for c in self.children:
            out.extend(c.leaves(transform))
        return out

    def bounds(self):
        boxes = [c.bounds() for c in self.children]
        if self.op == "union":
            return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)
        if self.op == "intersection":
            return np.max([b[0] for b in boxes], axis=0), np.min([b[1] for b in boxes], axis=0)
        return boxes[0]

    def to_text(self):
        return f"({self.op} " + " ".join(c.to_text() for c in self.children) + ")"

    def scaled(self, s):
        return CSG(self.op, [c.scaled(s) for c in self.children])


@dataclass(eq=False, repr=False)
class Pose(Shape):
    """Rigid transform of a subtree: rotate by xyz Euler angles (degrees), then translate."""

    rotation_deg: Sequence[float]
    translation: Sequence[float]
    child: Shape

    @property
    def matrix(self) -> np.ndarray:
        return rotation_xyz(*np.radians(np.asarray(self.rotation_deg, dtype=np.float64)))

    def _to_local(self, p):
        return (p - np.asarray(self.translation)) @ self.matrix  # R^T (p - t), row form

    def sdf(self, p):
        return self.child.sdf(self._to_local(p))

    def occupancy(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        return self.child.occupancy(self._to_local(p))

    def leaves(self, transform=None):
        rot, trans = transform if transform is not None else (np.eye(3), np.zeros(3))
        r = self.matrix
        return self.child.leaves((rot @ r, rot @ np.asarray(self.translation, dtype=np.float64) + trans))

    def bounds(self):
        lo, hi = self.child.bounds()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        world = corners @ self.matrix.T + np.asarray(self.translation)
        return world.min(axis=0), world.max(axis=0)

    def to_text(self):
        return f"(pose {_fmt(*self.rotation_deg, *self.translation)} {self.child.to_text()})"

    def scaled(self, s):
        return Pose(list(self.rotation_deg), [s * v for v in self.translation], self.child.scaled(s))


# ---------------------------------------------------------------------------
# canonical text encoding
# ---------------------------------------------------------------------------
_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def parse_shape(text: str) -> Shape:
    tokens = _TOKEN.findall(text)
    pos = 0

    def parse() -> Shape:
        nonlocal pos
        if tokens[pos] != "(":
            raise ValueError(f"expected '(' at token {pos} in shape text")
        head = tokens[pos + 1]
        pos += 2
        nums: list[float] = []
        kids: list[Shape] = []
        while tokens[pos] != ")":
            if tokens[pos] == "(":
                kids.append(parse())
            else:
                nums.append(float(tokens[pos]))
                pos += 1
        pos += 1
        if head == "sphere":
            return Sphere(nums[:3], nums[3])
        if head == "box":
            return Box(nums[:3], nums[3:6])
        if head == "torus":
            return Torus(nums[:3], nums[3], nums[4])
        if head == "cylinder":
            return Cylinder(nums[:3], nums[3:6], nums[6], nums[7])
        if head == "pose":
            return Pose(nums[:3], nums[3:6], kids[0])
        return CSG(head, kids)

    try:
        shape = parse()
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed shape text {text!r}: {exc}") from exc
    return shape


def fits_in_bound(shape: Shape, bound: float = SHAPE_BOUND) -> bool:
    lo, hi = shape.bounds()
    return bool(np.all(lo >= -bound - 1e-12) and np.all(hi <= bound + 1e-12))


def normalize_to_bound(shape: Shape, bound: float = SHAPE_BOUND) -> Shape:
    """Center the bounding box at the origin and scale its longest side to 2 * bound."""
    lo, hi = shape.bounds()
    s = 2.0 * bound / float((hi - lo).max())
    # round down a hair so float error never pushes a face past the bound
    s *= 1.0 - 1e-9
    center = (lo + hi) / 2.0
    return Pose([0.0, 0.0, 0.0], (-s * center).tolist(), shape.scaled(s))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
def occupancy_at(shape: Shape, p: np.ndarray) -> np.ndarray | bool:
    """Exact occupancy of one point (returns bool) or an M x 3 array."""
    arr = np.asarray(p, dtype=np.float64)
    occ = shape.occupancy(arr.reshape(-1, 3))
    return bool(occ[0]) if arr.ndim == 1 else occ


def sample_surface(
    shape: Shape, n: int, seed: int | np.random.Generator = 0, max_rounds: int = 50, return_normals: bool = False
):
    """Area-uniform samples of the CSG boundary.

    Candidates are drawn parametrically on every primitive (proportionally to
    primitive area) and kept when the CSG occupancy changes across the
    surface, i.e. the point lies on the composite boundary.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    leaves = shape.leaves()
    areas = np.array([prim.area() for prim, _, _ in leaves])
    weights = areas / areas.sum()
    kept_p, kept_n, total = [], [], 0
    batch = max(2 * n, 1024)
    for _ in range(max_rounds):
        counts = rng.multinomial(batch, weights)
        for (prim, rot, trans), count in zip(leaves, counts):
            if count == 0:
                continue
            pts, nrm = prim.sample_local(int(count), rng)
            pts = pts @ rot.T + trans
            nrm = nrm @ rot.T
            if len(leaves) > 1:
                inside = shape.occupancy(pts - BOUNDARY_EPS * nrm)
                outside = shape.occupancy(pts + BOUNDARY_EPS * nrm)
                keep = inside != outside
                pts, nrm = pts[keep], nrm[keep]
            kept_p.append(pts)
            kept_n.append(nrm)
            total += len(pts)
        if total >= n:
            break
    if total < n:
        raise DegenerateShapeError(f"found only {total} of {n} surface samples for {shape.to_text()}")
    pts = np.concatenate(kept_p)
    nrm = np.concatenate(kept_n)
    # draw without order bias across primitives
    pick = rng.permutation(len(pts))[:n]
    return (pts[pick], nrm[pick]) if return_normals else pts[pick]


@dataclass
class SampleRecord:
    shape: Shape
    surface_points: np.ndarray  # N x 3, before noise
    input_cloud: np.ndarray  # N x 3, noisy and clamped
    query_points: np.ndarray  # Q x 3
    occupancy_labels: np.ndarray  # Q bools
    split: Optional[str] = None
    family: Optional[str] = None
    name: Optional[str] = None

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            self.shape.to_text() == other.shape.to_text()
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("surface_points", "input_cloud", "query_points", "occupancy_labels")
            )
        )


def make_sample(
    shape: Shape,
    n_surface: int = 3000,
    q_queries: int = 2048,
    noise_sigma: float = 0.05,
    seed: int = 0,
) -> SampleRecord:
    """Noisy surface cloud plus uniformly drawn, exactly labelled queries."""
    rng = np.random.default_rng(seed)
    surface = sample_surface(shape, n_surface, rng).astype(np.float32)
    noisy = surface.astype(np.float64)
    if noise_sigma > 0:
        noisy = noisy + rng.normal(0.0, noise_sigma, size=noisy.shape)
    cloud = np.clip(noisy, -0.5, 0.5).astype(np.float32)
    queries = rng.uniform(-0.5, 0.5, size=(q_queries, 3)).astype(np.float32)
    # labels are computed on the stored float32 coordinates so they re-verify exactly
    labels = shape.occupancy(queries.astype(np.float64))
    return SampleRecord(shape, surface, cloud, queries, labels)


def verify_labels(record: SampleRecord) -> bool:
    return bool(np.array_equal(record.shape.occupancy(record.query_points.astype(np.float64)), record.occupancy_labels))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------
def _pack_points(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4").reshape(-1, 3)
    return struct.pack("<Q", len(arr)) + arr.tobytes()


def save_sample(record: SampleRecord, path: str | Path) -> None:
    path = Path(path)
    text = record.shape.to_text().encode("utf-8")
    labels = np.asarray(record.occupancy_labels, dtype=bool)
    parts = [
        SAMPLE_MAGIC,
        struct.pack("<I", SAMPLE_VERSION),
        struct.pack("<Q", len(text)) + text,
        _pack_points(record.surface_points),
        _pack_points(record.input_cloud),
        _pack_points(record.query_points),
        struct.pack("<Q", len(labels)) + np.packbits(labels, bitorder="little").tobytes(),
    ]
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"failed to write sample {path}: {exc}") from exc


def load_sample(path: str | Path, split: Optional[str] = None, family: Optional[str] = None) -> SampleRecord:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read sample {path}: {exc}") from exc
    if buf[:4] != SAMPLE_MAGIC:
        raise SampleFormatError(f"{path}: bad magic {buf[:4]!r}, expected {SAMPLE_MAGIC!r}")
    pos = 4

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise SampleFormatError(f"{path}: truncated while reading {what}")
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != SAMPLE_VERSION:
        raise SampleFormatError(
            f"{path}: sample format version {version} is not supported by this reader (version {SAMPLE_VERSION})"
        )
    (text_len,) = struct.unpack("<Q", take(8, "shape length"))
    shape = parse_shape(take(text_len, "shape text").decode("utf-8"))
    arrays = []
    for what in ("surface_points", "input_cloud", "query_points"):
        (count,) = struct.unpack("<Q", take(8, f"{what} count"))
        arrays.append(np.frombuffer(take(12 * count, what), dtype="<f4").reshape(count, 3).astype(np.float32))
    (count,) = struct.unpack("<Q", take(8, "label count"))
    packed = np.frombuffer(take((count + 7) // 8, "labels"), dtype=np.uint8)
    labels = np.unpackbits(packed, bitorder="little")[:count].astype(bool)
    if pos != len(buf):
        raise SampleFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return SampleRecord(shape, *arrays, labels, split=split, family=family, name=path.stem)


# ---------------------------------------------------------------------------
# shape families
# ---------------------------------------------------------------------------
def sphere_box_union() -> Shape:
    """The fixed overfitting target: a sphere fused with a box."""
    return CSG("union", [Sphere([-0.1, 0.0, 0.0], 0.25), Box([0.15, 0.0, 0.0], [0.2, 0.15, 0.12])])


# Parts thinner than about twice the default input noise cannot be recovered
# from the cloud, so primitives keep a minimum thickness and objects a
# minimum occupied fraction of the cube.
MIN_OBJECT_FILL = 0.08


def _random_primitive(rng: np.random.Generator, scale: float = 1.0) -> Primitive:
    kind = rng.choice(["sphere", "box", "torus", "cylinder"])
    c = rng.uniform(-0.12, 0.12, size=3) * scale
    if kind == "sphere":
        return Sphere(c.tolist(), float(rng.uniform(0.12, 0.28) * scale))
    if kind == "box":
        return Box(c.tolist(), (rng.uniform(0.08, 0.25, size=3) * scale).tolist())
    if kind == "torus":
        big = float(rng.uniform(0.12, 0.24) * scale)
        return Torus(c.tolist(), big, float(rng.uniform(0.06, 0.1) * min(scale, big / 0.2)))
    axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    return Cylinder(c.tolist(), axis.tolist(), float(rng.uniform(0.08, 0.2) * scale), float(rng.uniform(0.1, 0.25) * scale))


def _maybe_pose(shape: Shape, rng: np.random.Generator, prob: float = 0.5) -> Shape:
    if rng.uniform() >= prob:
        return shape
    return Pose(rng.uniform(-45, 45, size=3).round(3).tolist(), [0.0, 0.0, 0.0], shape)


def _accept(shape: Shape, rng: np.random.Generator, min_fill: float = 0.01) -> bool:
    if not fits_in_bound(shape):
        return False
    probe = rng.uniform(-0.5, 0.5, size=(4000, 3))
    return shape.occupancy(probe).mean() >= min_fill


def random_primitive_shape(rng: np.random.Generator) -> Shape:
    while True:
        shape = _maybe_pose(_random_primitive(rng), rng)
        if _accept(shape, rng):
            return shape


def random_object(rng: np.random.Generator) -> Shape:
    """2-4 primitives combined, mostly by union, occasionally carved, then fitted to the margin cube."""
    while True:
        count = int(rng.integers(2, 5))
        parts: list[Shape] = [_random_primitive(rng) for _ in range(count)]
        shape: Shape = CSG("union", parts[:2]) if count == 2 or rng.uniform() < 0.7 else CSG("intersection", parts[:2])
        for extra in parts[2:]:
            op = "difference" if rng.uniform() < 0.25 else "union"
            shape = CSG(op, [shape, extra])
        shape = normalize_to_bound(_maybe_pose(shape, rng, prob=0.3))
        if _accept(shape, rng, min_fill=MIN_OBJECT_FILL):
            return shape


def random_room(rng: np.random.Generator, max_tries: int = 200) -> Shape:
    """A floor slab with 2-4 non-overlapping objects standing on it (z is up)."""
    floor_top = -0.38
    floor = Box([0.0, 0.0, -0.415], [0.45, 0.45, 0.035])
    count = int(rng.integers(2, 5))
    placed: list[tuple[Shape, np.ndarray, np.ndarray]] = []
    tries = 0
    while len(placed) < count and tries < max_tries:
        tries += 1
        prim = _random_primitive(rng, scale=0.6)
        lo, hi = prim.bounds()
        # stand the object on the floor, then shift it in the plane
        shift = np.array([*rng.uniform(-0.3, 0.3, size=2), floor_top - lo[2]])
        lo2, hi2 = lo + shift, hi + shift
        if np.any(lo2 < -SHAPE_BOUND) or np.any(hi2 > SHAPE_BOUND):
            continue
        if any(np.all(lo2[:2] < h[:2]) and np.all(hi2[:2] > l[:2]) for _, l, h in placed):
            continue
        placed.append((Pose([0.0, 0.0, 0.0], shift.tolist(), prim), lo2, hi2))
    if len(placed) < 2:
        raise DegenerateShapeError("could not place room objects")
    return CSG("union", [floor] + [s for s, _, _ in placed])


FAMILIES = {"primitive": random_primitive_shape, "object": random_object, "room": random_room}


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------
@dataclass
class DatasetRecipe:
    """How many shapes per family and split, plus sampling parameters."""

    counts: dict[str, dict[str, int]]  # family -> split -> count
    seed: int = 0
    n_surface: int = 3000
    n_queries: int = 2048
    noise_sigma: float = 0.05

    @classmethod
    def simple(cls, family: str, train: int, val: int, test: int, **kw) -> "DatasetRecipe":
        return cls({family: {"train": train, "val": val, "test": test}}, **kw)


MANIFEST = "manifest.txt"


def generate_records(recipe: DatasetRecipe) -> list[SampleRecord]:
    records = []
    seen: set[str] = set()
    for fam_idx, family in enumerate(sorted(recipe.counts)):
        make_shape = FAMILIES[family]
        serial = 0
        for split in ("train", "val", "test"):
            for _ in range(recipe.counts[family].get(split, 0)):
                while True:
                    ss = np.random.SeedSequence([recipe.seed, fam_idx, serial])
                    serial += 1
                    shape = make_shape(np.random.default_rng(ss))
                    if shape.to_text() not in seen:
                        break
                seen.add(shape.to_text())
                sample_seed = int(ss.generate_state(1)[0])
                rec = make_sample(shape, recipe.n_surface, recipe.n_queries, recipe.noise_sigma, sample_seed)
                rec.split, rec.family = split, family
                rec.name = f"{family}_{split}_{len([r for r in records if r.family == family and r.split == split]):04d}"
                records.append(rec)
    return records


def generate_dataset(out_dir: str | Path, recipe: DatasetRecipe) -> list[SampleRecord]:
    """Write one ``.dpcs`` file per sample plus a manifest; returns the records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = generate_records(recipe)
    lines = []
    for rec in records:
        fname = f"{rec.name}.dpcs"
        save_sample(rec, out_dir / fname)
        lines.append(f"{fname} {rec.split} {rec.family}")
    (out_dir / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return records


def read_manifest(root: str | Path) -> list[tuple[str, str, str]]:
    root = Path(root)
    path = root / MANIFEST
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest {path}: {exc}") from exc
    return [tuple(line.split()) for line in lines if line.strip()]


def load_dataset(root: str | Path, splits: Optional[Iterable[str]] = None) -> list[SampleRecord]:
    root = Path(root)
    wanted = None if splits is None else set(splits)
    out = []
    for fname, split, family in read_manifest(root):
        if wanted is None or split in wanted:
            out.append(load_sample(root / fname, split=split, family=family))
    return out


def self_check(root: str | Path) -> list[str]:
    """Names of samples whose stored labels disagree with the analytic shape."""
    return [rec.name for rec in load_dataset(root) if not verify_labels(rec)]
