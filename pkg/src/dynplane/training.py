"""Losses, Adam, and the training loop with validation-based model selection."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SampleRecord
from .networks import DynamicPlaneONet, save_checkpoint

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("iteration", "bce", "similarity", "total", "validation_iou", "wall_seconds")


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss; ``snapshot`` holds the diagnostic state."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_iterations: int = 5000
    validate_every: int = 1000
    similarity_exponent: int = 10
    similarity_weight_factor: float = 10.0
    similarity_mode: str = "off"  # off | always | warmup
    similarity_disable_after: int = 20000  # warmup only
    seed: int = 0
    queries_per_step: Optional[int] = None  # subsample the stored queries each step

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.validate_every < 1 or self.validate_every > self.max_iterations:
            raise ValueError("validate_every must lie in [1, max_iterations]")
        if self.similarity_mode not in ("off", "always", "warmup"):
            raise ValueError(f"unknown similarity mode {self.similarity_mode!r}")

    def similarity_weight(self, num_dynamic: int) -> float:
        """C = factor * M with M the number of unordered plane pairs."""
        return self.similarity_weight_factor * num_dynamic * (num_dynamic - 1) / 2

    def similarity_active(self, iteration: int) -> bool:
        if self.similarity_mode == "always":
            return True
        if self.similarity_mode == "warmup":
            return iteration < self.similarity_disable_after
        return False

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def bce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy in logit form: softplus(z) - y z."""
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(logits.shape))
    return ad.mean(ad.softplus(logits) - logits * y)


def similarity_loss(normals: Tensor, d: int = 10) -> Tensor:
    """Mean of |cos|^d over unordered pairs of plane normals (L x 3, or B x L x 3
    averaged over the batch). Fewer than two planes gives 0."""
    if normals.ndim == 2:
        normals = normals.reshape(1, *normals.shape)
    b, count, _ = normals.shape
    if count < 2:
        return Tensor(np.zeros(()))
    rows, cols = np.triu_indices(count, k=1)
    terms = []
    for bi in range(b):
        n = ad.take_rows(normals.reshape(b * count, 3), np.arange(bi * count, (bi + 1) * count))
        length = ad.sqrt(ad.tsum(n * n, axis=1, keepdims=True))
        unit = n / length
        gram = (unit @ unit.transpose(1, 0)).reshape(count * count, 1)
        cosines = ad.take_rows(gram, rows * count + cols)
        terms.append(ad.mean(ad.power(ad.tabs(cosines), d)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1.0 / b)


def total_loss(bce: Tensor, sim: Tensor, cfg: TrainConfig, iteration: int, num_dynamic: int) -> Tensor:
    if num_dynamic < 2 or not cfg.similarity_active(iteration):
        return bce
    return bce + ad.scale(sim, cfg.similarity_weight(num_dynamic))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update using each parameter's accumulated grad."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------
def predict_logits(model: DynamicPlaneONet, cloud: np.ndarray, queries: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Logits for one cloud at any number of queries, without graph recording."""
    with ad.no_grad():
        enc = model.encode(np.asarray(cloud)[None])
        out = [model.decode(np.asarray(queries)[None, s : s + chunk], enc).data[0] for s in range(0, len(queries), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def iou_from_labels(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def sample_iou(model: DynamicPlaneONet, record: SampleRecord) -> float:
    """IoU on the record's stored queries (occupied where probability >= 0.5)."""
    logits = predict_logits(model, record.input_cloud, record.query_points)
    return iou_from_labels(logits >= 0.0, record.occupancy_labels)


def mean_iou(model: DynamicPlaneONet, records: Sequence[SampleRecord]) -> float:
    return float(np.mean([sample_iou(model, r) for r in records])) if records else float("nan")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    best_iou: float = -1.0
    best_iteration: int = -1
    best_state: Optional[dict[str, np.ndarray]] = None
    stopped_early: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows if r[name] != ""], dtype=np.float64)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def make_batch(records: Sequence[SampleRecord], cfg: TrainConfig, rng: np.random.Generator):
    """Clouds B x N x 3, queries B x Q x 3 and labels B x Q for one step."""
    pick = rng.integers(0, len(records), size=cfg.batch_size)
    clouds, queries, labels = [], [], []
    for i in pick:
        rec = records[i]
        q, y = rec.query_points, rec.occupancy_labels
        if cfg.queries_per_step is not None and cfg.queries_per_step < len(q):
            sub = rng.choice(len(q), size=cfg.queries_per_step, replace=False)
            q, y = q[sub], y[sub]
        clouds.append(rec.input_cloud)
        queries.append(q)
        labels.append(y)
    return np.stack(clouds), np.stack(queries), np.stack(labels)


def train_step(model: DynamicPlaneONet, batch, cfg: TrainConfig, state: AdamState, iteration: int) -> dict:
    clouds, queries, labels = batch
    model.zero_grad()
    logits, enc = model.forward(clouds, queries)
    bce = bce_loss(logits, labels)
    num_dyn = model.cfg.num_planes
    sim = similarity_loss(enc.plane_params, cfg.similarity_exponent) if enc.plane_params is not None else Tensor(np.zeros(()))
    total = total_loss(bce, sim, cfg, iteration, num_dyn)
    values = {"bce": float(bce.item()), "similarity": float(sim.item()), "total": float(total.item())}
    if not all(math.isfinite(v) for v in values.values()):
        snapshot = {
            "iteration": iteration,
            "plane_params": None if enc.plane_params is None else enc.plane_params.data.copy(),
            **values,
        }
        raise TrainingDivergedError(f"non-finite loss at iteration {iteration}: {values}", snapshot)
    total.backward()
    adam_step(model.params, state, cfg.learning_rate)
    return values


def train(
    model: DynamicPlaneONet,
    train_records: Sequence[SampleRecord],
    val_records: Sequence[SampleRecord],
    cfg: TrainConfig,
    out_dir: Optional[str | Path] = None,
    on_validation: Optional[Callable[[int, float], bool]] = None,
) -> TrainReport:
    """Train with Adam; every ``validate_every`` steps measure validation IoU
    and keep the best weights. Randomness for step ``i`` comes only from
    ``(seed, i)``. ``on_validation`` may return True to stop the run."""
    if not train_records:
        raise ValueError("training set is empty")
    val_records = list(val_records) or list(train_records)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = AdamState()
    report = TrainReport()
    start = time.perf_counter()
    for it in range(cfg.max_iterations):
        rng = np.random.default_rng([cfg.seed, it])
        values = train_step(model, make_batch(train_records, cfg, rng), cfg, state, it)
        row = {"iteration": it, **values, "validation_iou": "", "wall_seconds": 0.0}
        done = (it + 1) % cfg.validate_every == 0 or it + 1 == cfg.max_iterations
        stop = False
        if done:
            iou = mean_iou(model, val_records)
            row["validation_iou"] = iou
            logger.info("iteration %d: bce %.4f sim %.4g val IoU %.4f", it, values["bce"], values["similarity"], iou)
            if iou > report.best_iou:
                report.best_iou, report.best_iteration = iou, it
                report.best_state = model.state_dict()
                if out is not None:
                    save_checkpoint(out / "best.ckpt", report.best_state)
            if on_validation is not None:
                stop = bool(on_validation(it, iou))
        row["wall_seconds"] = time.perf_counter() - start
        report.rows.append(row)
        if stop:
            report.stopped_early = True
            break
    if out is not None:
        report.write_csv(out / "report.csv")
    return report
