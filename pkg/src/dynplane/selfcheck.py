"""Built-in verification: gradient checks, geometry properties, metric oracles.

Used by the ``selfcheck`` command and by the acceptance tests, so both run
the same cases.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    PositionalEncodingConfig,
    build_plane_basis,
    normalize_plane,
    positional_encoding,
    project_points,
    rotation_from_k,
)

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ---------------------------------------------------------------------------
# gradient-check cases: each builder returns (loss_fn, inputs)
# ---------------------------------------------------------------------------
def _leaf(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def _away_from(rng, shape, points=(0.0,), margin=0.05, low=-2.0, high=2.0):
    """Uniform samples kept at least ``margin`` away from non-smooth points."""
    x = rng.uniform(low, high, size=shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.sign(x[near] - p + 1e-12) * (margin + rng.uniform(0, 0.5, size=near.sum()))
    return x


def _distinct(rng, shape, gap=0.05):
    """Values whose pairwise gaps exceed ``gap`` (no max ties under a 1e-3 step)."""
    n = int(np.prod(shape))
    vals = np.cumsum(rng.uniform(gap, 3 * gap, size=n))
    return rng.permutation(vals - vals.mean()).reshape(shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tsum(out * Tensor(w))


def _unary(op):
    def build(rng):
        x = _leaf(_away_from(rng, (3, 4)))
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(op(x), w)), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = _leaf(rng.normal(size=(3, 4)))
        b = _leaf(rng.uniform(0.5, 2.0, size=(1, 4)) if positive_b else rng.normal(size=(1, 4)))
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(op(a, b), w)), [a, b]
    return build


def _case_matmul(rng):
    a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    return (lambda: _weighted(a @ b, w)), [a, b]


def _case_linear(rng):
    x, wt, bias = _leaf(rng.normal(size=(5, 3))), _leaf(rng.normal(size=(3, 2))), _leaf(rng.normal(size=2))
    w = rng.normal(size=(5, 2))
    return (lambda: _weighted(ad.linear(x, wt, bias), w)), [x, wt, bias]


def _case_conv(stride, padding, size=8):
    def build(rng):
        x, k, b = _leaf(rng.normal(size=(2, size, size))), _leaf(rng.normal(size=(3, 2, 3, 3))), _leaf(rng.normal(size=3))
        out_shape = ad.conv2d(x, k, b, stride, padding).shape
        w = rng.normal(size=out_shape)
        return (lambda: _weighted(ad.conv2d(x, k, b, stride, padding), w)), [x, k, b]
    return build


def _case_pool(kind):
    def build(rng):
        x = _leaf(_distinct(rng, (2, 4, 4)))
        w = rng.normal(size=(2, 2, 2))
        return (lambda: _weighted(ad.pool2d(kind, x, 2), w)), [x]
    return build


def _case_upsample(rng):
    x = _leaf(rng.normal(size=(2, 3, 3)))
    w = rng.normal(size=(2, 6, 6))
    return (lambda: _weighted(ad.upsample2d(x, 2), w)), [x]


def _case_scatter_max(rng):
    x = _leaf(_distinct(rng, (10, 3)))
    idx = rng.integers(0, 4, size=10)
    w = rng.normal(size=(5, 3))
    return (lambda: _weighted(ad.scatter_max(x, idx, 5), w)), [x]


def _case_gather(rng):
    grid = _leaf(rng.normal(size=(2, 3, 4, 4)))
    uv = rng.uniform(-0.1, 1.1, size=(7, 2))
    which = rng.integers(0, 2, size=7)
    w = rng.normal(size=(7, 3))
    return (lambda: _weighted(ad.gather_bilinear(grid, uv, which), w)), [grid]


def _case_reductions(rng):
    x = _leaf(_distinct(rng, (3, 4)))
    w1, w2 = rng.normal(size=3), rng.normal(size=4)

    def loss():
        return _weighted(ad.max_axis(x, 1), w1) + _weighted(ad.mean(x, axis=0), w2) + ad.tsum(x.transpose(1, 0).reshape(2, 6)) * 0.5
    return loss, [x]


def _case_concat_take(rng):
    a, b = _leaf(rng.normal(size=(3, 2))), _leaf(rng.normal(size=(3, 3)))
    idx = rng.integers(0, 3, size=6)
    w = rng.normal(size=(6, 5))
    return (lambda: _weighted(ad.take_rows(ad.concat([a, b], axis=1), idx), w)), [a, b]


def _case_power_sqrt(rng):
    x = _leaf(rng.uniform(0.3, 2.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(ad.power(x, 3) + ad.sqrt(x), w)), [x]


OP_CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "scale": _unary(lambda x: ad.scale(x, 1.7)),
    "relu": _unary(ad.relu),
    "sin": _unary(ad.sin),
    "cos": _unary(ad.cos),
    "sigmoid": _unary(ad.sigmoid),
    "softplus": _unary(ad.softplus),
    "abs": _unary(ad.tabs),
    "power_sqrt": _case_power_sqrt,
    "reductions": _case_reductions,
    "concat_take_rows": _case_concat_take,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "conv2d": _case_conv(1, 1),
    "conv2d_stride2": _case_conv(2, 1, size=9),
    "max_pool2d": _case_pool("max"),
    "avg_pool2d": _case_pool("avg"),
    "upsample2d": _case_upsample,
    "scatter_max": _case_scatter_max,
    "gather_bilinear": _case_gather,
}


def check_op(name: str, instances: int = 100, seed: int = 0) -> tuple[float, int]:
    """Worst relative error of ``name`` over random instances, and the count of failures."""
    worst, failures = 0.0, 0
    with ad.precision("float64"):
        for i in range(instances):
            rng = np.random.default_rng([seed, i])
            loss, inputs = OP_CASES[name](rng)
            rep = ad.grad_check(loss, inputs, step=1e-3, tolerance=OP_TOLERANCE)
            worst = max(worst, rep.max_rel_error)
            failures += not rep.passed
    return worst, failures


def micro_model_check(seed: int = 0, tolerance: float = MODEL_TOLERANCE) -> ad.GradCheckReport:
    """End-to-end check of a tiny encoder-decoder (8 points, 4 queries, 2
    dynamic planes, 8x8 grids, D = 4, depth-1 U-Net) with the projection held
    fixed."""
    from .networks import DynamicPlaneONet, EncoderConfig

    with ad.precision("float64"):
        cfg = EncoderConfig(
            feature_dim=4, num_planes=2, plane_resolution=8, unet_depth=1, pointnet_blocks=2,
            decoder_hidden=4, decoder_blocks=2, predictor_hidden=4,
        )
        model = DynamicPlaneONet(cfg, seed=seed)
        rng = np.random.default_rng(seed)
        # zero-initialized layers would hide whole branches from the check
        for t in model.params.values():
            if not np.any(t.data):
                t.data[...] = rng.normal(0.0, 0.3, size=t.shape)
        points = rng.uniform(-0.45, 0.45, size=(1, 8, 3))
        queries = rng.uniform(-0.45, 0.45, size=(1, 4, 3))
        labels = rng.uniform(size=(1, 4)) < 0.5
        with ad.no_grad():
            bases = model.encode(points).bases
        y = Tensor(labels.astype(np.float64))

        def loss():
            logits = model.decode(queries, model.encode(points, bases=bases))
            return ad.mean(ad.softplus(logits) - logits * y)

        # a small step keeps the probes on one side of relu kinks and max switches
        return ad.grad_check(loss, list(model.params.values()), step=1e-6, tolerance=tolerance, floor=1e-5)


# ---------------------------------------------------------------------------
# geometry properties
# ---------------------------------------------------------------------------
def rotation_check(samples: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Worst |R^T R - I|_inf and |R k - n|_inf over random normals plus the axis cases."""
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(samples, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.concatenate([normals, np.eye(3), -np.eye(3)])
    worst_orth, worst_map = 0.0, 0.0
    for n in normals:
        r = rotation_from_k(n)
        worst_orth = max(worst_orth, float(np.abs(r.T @ r - np.eye(3)).max()))
        worst_map = max(worst_map, float(np.abs(r[:, 2] - n).max()))
    return worst_orth, worst_map


def projection_bound_check(pairs: int = 1_000_000, planes: int = 1000, seed: int = 0) -> float:
    """Largest |plane coordinate| over random (point, plane) pairs in the cube."""
    rng = np.random.default_rng(seed)
    per_plane = pairs // planes
    worst = 0.0
    for _ in range(planes):
        n, _ = normalize_plane(rng.normal(size=3))
        pts = rng.uniform(-0.5, 0.5, size=(per_plane, 3))
        worst = max(worst, float(np.abs(project_points(pts, build_plane_basis(n))).max()))
    return worst


def positional_encoding_check() -> bool:
    cfg = PositionalEncodingConfig(10)
    zero = positional_encoding(np.zeros((1, 3)), cfg)[0]
    expected = np.tile([0.0, 1.0], 30)
    return zero.shape == (60,) and bool(np.array_equal(zero, expected))


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------
def metric_oracle_check() -> dict[str, float]:
    from .data import Box
    from .meshing import Mesh
    from .metrics import chamfer_l1, f_score, normal_consistency, volumetric_iou

    a, b = Box([0, 0, 0], [0.5] * 3), Box([0.5, 0, 0], [0.5] * 3)
    iou = volumetric_iou(a.occupancy, b.occupancy, 100_000, seed=0, domain=((-0.5, -0.5, -0.5), (1.0, 0.5, 0.5)))

    def square(z):
        return Mesh([[-0.5, -0.5, z], [0.5, -0.5, z], [0.5, 0.5, z], [-0.5, 0.5, z]], [[0, 1, 2], [0, 2, 3]])

    m = square(0.0)
    return {
        "shifted_box_iou": iou,
        "identity_chamfer": chamfer_l1(m, m, 10_000),
        "identity_nc": normal_consistency(m, m, 10_000),
        "identity_f": f_score(m, m, 0.01, 10_000),
        "offset_chamfer": chamfer_l1(m, square(0.1), 100_000),
    }


def run_all(op_instances: int = 100, quick: bool = False) -> list[CheckResult]:
    """Every check; ``quick`` reduces sample counts for an interactive run."""
    results = []

    def timed(name, fn):
        t = time.perf_counter()
        passed, detail = fn()
        results.append(CheckResult(name, passed, detail, time.perf_counter() - t))
        logger.info(results[-1].line())

    for op in OP_CASES:
        def one(op=op):
            worst, fails = check_op(op, op_instances)
            return fails == 0 and worst < OP_TOLERANCE, f"max rel err {worst:.2e} over {op_instances} instances"
        timed(f"grad {op}", one)

    def model():
        rep = micro_model_check()
        return rep.passed, f"max rel err {rep.max_rel_error:.2e} over {rep.entries_checked} weights"
    timed("grad micro-model", model)

    def rotation():
        orth, mapped = rotation_check(1000 if quick else 10_000)
        return orth < 1e-6 and mapped < 1e-6, f"|RtR-I| {orth:.1e}, |Rk-n| {mapped:.1e}"
    timed("rotation", rotation)

    def bounds():
        worst = projection_bound_check(100_000 if quick else 1_000_000)
        return worst <= 0.5 + 1e-12, f"max |coord| {worst:.15f}"
    timed("projection bounds", bounds)

    timed("positional encoding", lambda: (positional_encoding_check(), "gamma(0) pattern, 3 -> 60"))

    def oracles():
        v = metric_oracle_check()
        ok = (
            abs(v["shifted_box_iou"] - 1 / 3) <= 0.01
            and v["identity_chamfer"] == 0.0
            and v["identity_nc"] == 1.0
            and v["identity_f"] == 1.0
            and abs(v["offset_chamfer"] - 0.1) <= 0.005
        )
        return ok, ", ".join(f"{k} {val:.4f}" for k, val in v.items())
    timed("metric oracles", oracles)
    return results
