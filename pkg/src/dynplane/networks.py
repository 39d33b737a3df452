"""Learned components: point encoder, plane predictor, U-Net and decoder.

All layers are plain functions over a flat ``name -> Tensor`` parameter
dict owned by :class:`DynamicPlaneONet`, which keeps checkpointing trivial.
Batched inputs are B x N x 3 numpy arrays already inside the world cube.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    PlaneBasis,
    PositionalEncodingConfig,
    basis_from_raw,
    build_plane_basis,
    canonical_normals,
    grid_index,
    plane_uv,
    positional_encoding,
    project_points,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DPCO"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def unet_receptive_field(depth: int) -> int:
    """Receptive field (in cells) of the U-Net built by :func:`unet_forward`.

    Two 3x3 convs per level on the way down and up, 2x2 pooling between
    levels, nearest upsampling followed by a 1x1 conv on the way up.
    """
    rf = 1
    rf += sum(4 * 2**i for i in range(depth))  # down convs
    rf += sum(2**i for i in range(depth - 1))  # pools
    rf += sum(4 * 2**i for i in range(depth - 1))  # up convs
    return rf


def default_unet_depth(resolution: int) -> int:
    """Smallest depth whose receptive field spans the whole plane."""
    depth = 1
    while unet_receptive_field(depth) < resolution:
        depth += 1
    return depth


@dataclass
class EncoderConfig:
    feature_dim: int = 32
    num_planes: int = 3  # dynamic planes
    plane_resolution: int = 64
    unet_depth: Optional[int] = None  # None -> receptive field covers the plane
    pointnet_blocks: int = 5
    use_positional_encoding: bool = False
    num_frequencies: int = 10
    fixed_canonical_planes: int = 0
    hidden_dim: Optional[int] = None  # point encoder width, defaults to feature_dim
    decoder_hidden: int = 32
    decoder_blocks: int = 5
    predictor_hidden: int = 64

    def __post_init__(self):
        if self.fixed_canonical_planes not in (0, 3):
            raise ValueError("fixed_canonical_planes must be 0 or 3")
        if self.num_planes < 0:
            raise ValueError("num_planes must be non-negative")
        if self.unet_depth is None:
            self.unet_depth = default_unet_depth(self.plane_resolution)
        if self.hidden_dim is None:
            self.hidden_dim = self.feature_dim
        if self.total_planes and self.plane_resolution % 2 ** (self.unet_depth - 1):
            raise ValueError(
                f"plane resolution {self.plane_resolution} not divisible by 2^(depth-1) "
                f"for U-Net depth {self.unet_depth}"
            )
        if self.pointnet_blocks < 1:
            raise ValueError("pointnet_blocks must be >= 1")

    @property
    def total_planes(self) -> int:
        return self.fixed_canonical_planes + self.num_planes

    @property
    def global_only(self) -> bool:
        """No planes at all: the global-feature (ONet-style) ablation."""
        return self.total_planes == 0

    @property
    def pe(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.num_frequencies, self.use_positional_encoding)

    @property
    def input_dim(self) -> int:
        return self.pe.output_dim(3)

    def label(self) -> str:
        parts = []
        if self.fixed_canonical_planes:
            parts.append(f"{self.fixed_canonical_planes}C")
        if self.num_planes:
            parts.append(f"{self.num_planes}D")
        name = " + ".join(parts) or "global"
        return name + (" PE" if self.use_positional_encoding else "")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------
class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def tensor(self, name: str, values: np.ndarray) -> Tensor:
        t = Tensor(values, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def linear(self, name: str, fan_in: int, fan_out: int, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        self.tensor(f"{name}.weight", w)
        if bias:
            self.tensor(f"{name}.bias", np.zeros(fan_out))

    def conv(self, name: str, cin: int, cout: int, k: int, zero: bool = False):
        fan_in = cin * k * k
        w = np.zeros((cout, cin, k, k)) if zero else self.rng.normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin, k, k))
        self.tensor(f"{name}.weight", w)
        self.tensor(f"{name}.bias", np.zeros(cout))

    def resblock(self, name: str, size_in: int, size_out: int):
        size_h = min(size_in, size_out)
        self.linear(f"{name}.fc_0", size_in, size_h)
        self.linear(f"{name}.fc_1", size_h, size_out, zero=True)
        if size_in != size_out:
            self.linear(f"{name}.shortcut", size_in, size_out, bias=False)


def _fibonacci_normals(count: int) -> np.ndarray:
    """Well-spread unit vectors on the upper hemisphere."""
    golden = math.pi * (3.0 - math.sqrt(5.0))
    k = np.arange(count) + 0.5
    z = 1.0 - k / count
    r = np.sqrt(1.0 - z**2)
    phi = golden * np.arange(count)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, Tensor]:
    init = _Init(seed)
    f_in, h, d = cfg.input_dim, cfg.hidden_dim, cfg.feature_dim

    # ResNet PointNet
    init.linear("pointnet.fc_pos", f_in, 2 * h)
    for i in range(cfg.pointnet_blocks):
        init.resblock(f"pointnet.block{i}", 2 * h, h)
    init.linear("pointnet.fc_c", h, d)

    # plane predictor
    if cfg.num_planes:
        p = cfg.predictor_hidden
        init.linear("predictor.fc_in", f_in, p)
        init.linear("predictor.fc_1", p, p)
        init.linear("predictor.fc_2", p, p)
        init.linear("predictor.fc_3", p, p)
        init.linear("predictor.fc_out", p, 3 * cfg.num_planes)
        params = init.params
        params["predictor.fc_out.weight"].data *= 0.1
        params["predictor.fc_out.bias"].data[:] = _fibonacci_normals(cfg.num_planes).reshape(-1)
        init.linear("predictor.fc_plane", 3, d)
    if cfg.fixed_canonical_planes:
        init.tensor("canonical.plane_feature", np.zeros((cfg.fixed_canonical_planes, d)))

    # U-Net, shared by all planes
    if cfg.total_planes:
        for name, cin, cout, k in unet_layers(cfg):
            init.conv(name, cin, cout, k)

    # decoder
    hd = cfg.decoder_hidden
    init.linear("decoder.fc_p", f_in, hd)
    for i in range(cfg.decoder_blocks):
        init.linear(f"decoder.fc_c{i}", d, hd)
        init.resblock(f"decoder.block{i}", hd, hd)
    init.linear("decoder.fc_out", hd, 1, zero=True)
    return init.params


def unet_layers(cfg: EncoderConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every U-Net conv."""
    d, depth = cfg.feature_dim, cfg.unet_depth
    layers = []
    outs = d
    for i in range(depth):
        ins = d if i == 0 else outs
        outs = d * 2**i
        layers.append((f"unet.down{i}.conv1", ins, outs, 3))
        layers.append((f"unet.down{i}.conv2", outs, outs, 3))
    for i in range(depth - 1):
        ins, outs = outs, outs // 2
        layers.append((f"unet.up{i}.upconv", ins, outs, 1))
        layers.append((f"unet.up{i}.conv1", 2 * outs, outs, 3))
        layers.append((f"unet.up{i}.conv2", outs, outs, 3))
    layers.append(("unet.final", outs, d, 1))
    return layers


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return sum(t.size for name, t in params.items() if name.startswith(prefix))


# ---------------------------------------------------------------------------
# layer functions
# ---------------------------------------------------------------------------
def _fc(params, name: str, x: Tensor) -> Tensor:
    bias = params.get(f"{name}.bias")
    return ad.linear(x, params[f"{name}.weight"], bias)


def _resblock(params, name: str, x: Tensor) -> Tensor:
    net = _fc(params, f"{name}.fc_0", ad.relu(x))
    dx = _fc(params, f"{name}.fc_1", ad.relu(net))
    shortcut = f"{name}.shortcut"
    xs = _fc(params, shortcut, x) if f"{shortcut}.weight" in params else x
    return xs + dx


def _conv(params, name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.weight"]
    k = w.shape[-1]
    return ad.conv2d(x, w, params[f"{name}.bias"], stride=1, padding=k // 2)


def canonical_cell_indices(points: np.ndarray, resolution: int) -> list[np.ndarray]:
    """Cell ids of B x N points on the xz, xy and yz planes, offset per batch."""
    b, n, _ = points.shape
    offsets = (np.arange(b) * resolution * resolution)[:, None]
    out = []
    for axes in ((0, 2), (0, 1), (1, 2)):
        coords = points[..., axes].reshape(-1, 2)
        out.append((grid_index(coords, resolution).reshape(b, n) + offsets).reshape(-1))
    return out


def resnet_pointnet(params, cfg: EncoderConfig, x: Tensor, points: np.ndarray) -> Tensor:
    """Per-point features (B*N x D).

    ``x`` is the (optionally encoded) input, flattened to B*N x F. Between
    blocks every point receives the max of the features sharing its cell on
    each canonical plane, averaged over the three planes. The global-only
    ablation pools over the whole cloud instead.
    """
    b, n, _ = points.shape
    net = _fc(params, "pointnet.fc_pos", x)
    net = _resblock(params, "pointnet.block0", net)
    if cfg.global_only:
        for i in range(1, cfg.pointnet_blocks):
            pooled = ad.max_axis(net.reshape(b, n, -1), axis=1)  # B x H
            pooled = ad.take_rows(pooled, np.repeat(np.arange(b), n))
            net = _resblock(params, f"pointnet.block{i}", ad.concat([net, pooled], axis=1))
        return _fc(params, "pointnet.fc_c", net)

    res = cfg.plane_resolution
    cells = canonical_cell_indices(points, res)
    for i in range(1, cfg.pointnet_blocks):
        pooled = None
        for idx in cells:
            grid = ad.scatter_max(net, idx, b * res * res)
            term = ad.take_rows(grid, idx)
            pooled = term if pooled is None else pooled + term
        pooled = ad.scale(pooled, 1.0 / len(cells))
        net = _resblock(params, f"pointnet.block{i}", ad.concat([net, pooled], axis=1))
    return _fc(params, "pointnet.fc_c", net)


def plane_predictor(params, cfg: EncoderConfig, x: Tensor, batch: int) -> tuple[Tensor, Tensor]:
    """Raw plane normals (B x L x 3) and plane-specific features (B x L x D)."""
    n = x.shape[0] // batch
    net = ad.relu(_fc(params, "predictor.fc_in", x))
    net = ad.relu(_fc(params, "predictor.fc_1", net))
    net = _fc(params, "predictor.fc_2", net)
    pooled = ad.relu(ad.max_axis(net.reshape(batch, n, -1), axis=1))  # B x P
    net = ad.relu(_fc(params, "predictor.fc_3", pooled))
    normals = _fc(params, "predictor.fc_out", net).reshape(batch * cfg.num_planes, 3)
    feats = _fc(params, "predictor.fc_plane", normals)
    return normals.reshape(batch, cfg.num_planes, 3), feats.reshape(batch, cfg.num_planes, -1)


def plane_specific_sum(point_features: Tensor, plane_feature: Tensor) -> Tensor:
    """Broadcast-add per-plane features onto per-point features.

    point_features: (B,) N x D; plane_feature: (B,) L x D -> (B,) L x N x D.
    """
    if point_features.ndim == 2:
        return point_features.reshape(1, *point_features.shape) + plane_feature.reshape(
            plane_feature.shape[0], 1, plane_feature.shape[1]
        )
    b, n, d = point_features.shape
    return point_features.reshape(b, 1, n, d) + plane_feature.reshape(b, plane_feature.shape[1], 1, d)


def project_to_grids(summed: Tensor, bases: list[list[PlaneBasis]], points: np.ndarray, resolution: int) -> Tensor:
    """Scatter-max B x L x N x D features onto (B*L) x D x H x W plane grids."""
    b, num_planes, n, d = summed.shape
    cells = resolution * resolution
    idx = np.empty((b, num_planes, n), dtype=np.int64)
    for bi in range(b):
        for li, basis in enumerate(bases[bi]):
            local = grid_index(project_points(points[bi], basis), resolution)
            idx[bi, li] = local + (bi * num_planes + li) * cells
    flat = ad.scatter_max(summed.reshape(b * num_planes * n, d), idx.reshape(-1), b * num_planes * cells)
    return flat.reshape(b * num_planes, resolution, resolution, d).transpose(0, 3, 1, 2)


def unet_forward(params, cfg: EncoderConfig, x: Tensor) -> Tensor:
    """Shared-weight U-Net over a stack of planes (G x D x H x W)."""
    depth = cfg.unet_depth
    skips = []
    for i in range(depth):
        x = ad.relu(_conv(params, f"unet.down{i}.conv1", x))
        x = ad.relu(_conv(params, f"unet.down{i}.conv2", x))
        if i < depth - 1:
            skips.append(x)
            x = ad.max_pool2d(x, 2)
    for i in range(depth - 1):
        up = _conv(params, f"unet.up{i}.upconv", ad.upsample2d(x, 2))
        x = ad.concat([up, skips[-(i + 1)]], axis=1)
        x = ad.relu(_conv(params, f"unet.up{i}.conv1", x))
        x = ad.relu(_conv(params, f"unet.up{i}.conv2", x))
    return _conv(params, "unet.final", x)


def query_features(query_points: np.ndarray, grids: Tensor, bases: list[list[PlaneBasis]]) -> Tensor:
    """Sum over planes of bilinearly sampled features: B x Q x D."""
    b, q, _ = query_points.shape
    num_planes = len(bases[0])
    uv = np.empty((b, num_planes, q, 2))
    gid = np.empty((b, num_planes, q), dtype=np.int64)
    for bi in range(b):
        for li, basis in enumerate(bases[bi]):
            uv[bi, li] = plane_uv(project_points(query_points[bi], basis))
            gid[bi, li] = bi * num_planes + li
    feats = ad.gather_bilinear(grids, uv.reshape(-1, 2), gid.reshape(-1))
    d = feats.shape[1]
    return feats.reshape(b, num_planes, q, d).sum(axis=1)


def decoder_forward(params, cfg: EncoderConfig, p: Tensor, psi: Tensor) -> Tensor:
    """Occupancy logits for flattened queries: p is M x F, psi is M x D."""
    net = _fc(params, "decoder.fc_p", p)
    for i in range(cfg.decoder_blocks):
        net = net + _fc(params, f"decoder.fc_c{i}", psi)
        net = _resblock(params, f"decoder.block{i}", net)
    out = _fc(params, "decoder.fc_out", ad.relu(net))
    return out.reshape(out.shape[0])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------
@dataclass
class Encoding:
    """Everything the decoder needs for one batch of input clouds."""

    grids: Optional[Tensor]  # (B*L) x D x H x W, None for the global ablation
    bases: list[list[PlaneBasis]]
    plane_params: Optional[Tensor]  # B x L_dyn x 3 raw normals
    global_feature: Optional[Tensor] = None  # B x D
    degenerate_planes: int = 0

    @property
    def batch(self) -> int:
        if self.grids is None:
            return self.global_feature.shape[0]
        return len(self.bases)


@dataclass
class DynamicPlaneONet:
    cfg: EncoderConfig
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.cfg, self.seed)

    # -- helpers ------------------------------------------------------------
    def encode_coords(self, points: np.ndarray) -> Tensor:
        """(Optionally positionally encoded) coordinates, flattened to M x F."""
        enc = positional_encoding(points.reshape(-1, 3), self.cfg.pe)
        return Tensor(enc)

    def plane_bases(self, plane_params: Optional[np.ndarray], batch: int) -> tuple[list[list[PlaneBasis]], int]:
        fixed = [build_plane_basis(n) for n in canonical_normals()[: self.cfg.fixed_canonical_planes]]
        bases, degenerate = [], 0
        for bi in range(batch):
            row = list(fixed)
            if plane_params is not None:
                for raw in plane_params[bi]:
                    if np.linalg.norm(raw) < 1e-8:
                        degenerate += 1
                    row.append(basis_from_raw(raw))
            bases.append(row)
        return bases, degenerate

    # -- forward ------------------------------------------------------------
    def encode(self, points: np.ndarray, bases: Optional[list[list[PlaneBasis]]] = None) -> Encoding:
        """Encode B x N x 3 clouds. ``bases`` overrides the predicted planes'
        projection (the predictor still runs, for the feature path)."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 2:
            points = points[None]
        b, n, _ = points.shape
        if n == 0:
            raise ValueError("cannot encode an empty point cloud")
        cfg, params = self.cfg, self.params
        x = self.encode_coords(points)
        feats = resnet_pointnet(params, cfg, x, points)  # B*N x D
        d = cfg.feature_dim
        if cfg.global_only:
            glob = ad.max_axis(feats.reshape(b, n, d), axis=1)
            return Encoding(None, [[] for _ in range(b)], None, glob)

        plane_params = None
        plane_feats = []
        if cfg.fixed_canonical_planes:
            fixed = params["canonical.plane_feature"]
            plane_feats.append(fixed.reshape(1, *fixed.shape) + Tensor(np.zeros((b, 1, 1))))
        if cfg.num_planes:
            plane_params, dyn_feats = plane_predictor(params, cfg, x, b)
            plane_feats.append(dyn_feats)
        plane_feat = plane_feats[0] if len(plane_feats) == 1 else ad.concat(plane_feats, axis=1)
        degenerate = 0
        if bases is None:
            raw = None if plane_params is None else plane_params.data.astype(np.float64)
            bases, degenerate = self.plane_bases(raw, b)
        summed = plane_specific_sum(feats.reshape(b, n, d), plane_feat)
        grids = project_to_grids(summed, bases, points, cfg.plane_resolution)
        grids = unet_forward(params, cfg, grids)
        return Encoding(grids, bases, plane_params, degenerate_planes=degenerate)

    def decode(self, query_points: np.ndarray, enc: Encoding) -> Tensor:
        """Occupancy logits B x Q."""
        query_points = np.asarray(query_points, dtype=np.float64)
        if query_points.ndim == 2:
            query_points = query_points[None]
        b, q, _ = query_points.shape
        if enc.grids is None:
            psi = ad.take_rows(enc.global_feature, np.repeat(np.arange(b), q))
        else:
            psi = query_features(query_points, enc.grids, enc.bases).reshape(b * q, -1)
        logits = decoder_forward(self.params, self.cfg, self.encode_coords(query_points), psi)
        return logits.reshape(b, q)

    def forward(self, points: np.ndarray, query_points: np.ndarray) -> tuple[Tensor, Encoding]:
        enc = self.encode(points)
        return self.decode(query_points, enc), enc

    def predict_normals(self, points: np.ndarray) -> np.ndarray:
        """Unit normals of every plane (fixed first), B x L x 3."""
        with ad.no_grad():
            enc = self.encode(points)
        return np.array([[basis.n_hat for basis in row] for row in enc.bases])

    # -- parameters ---------------------------------------------------------
    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def num_parameters(self, prefix: str = "") -> int:
        return count_params(self.params, prefix)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {name: t.shape for name, t in self.params.items()}
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise CheckpointError(f"checkpoint tensor names differ: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(state[name].shape) != tuple(shape):
                raise CheckpointError(f"tensor {name}: expected shape {shape}, found {state[name].shape}")
            self.params[name].data = np.asarray(state[name], dtype=self.params[name].data.dtype).copy()

    def astype(self, dtype) -> "DynamicPlaneONet":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------
def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, version, then (name, rank, dims, float32 values)."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (count,) = take("<Q")
    state = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(buf):
            raise CheckpointError(f"{path}: truncated tensor name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        nbytes = 4 * n
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated data for tensor {name}")
        state[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += nbytes
    return state
