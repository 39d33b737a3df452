import math

import numpy as np
import pytest

from dynplane import autodiff as ad
from dynplane.autodiff import Tensor
from dynplane.data import make_sample, sphere_box_union
from dynplane.networks import DynamicPlaneONet, EncoderConfig, load_checkpoint
from dynplane.training import (
    AdamState,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    bce_loss,
    iou_from_labels,
    make_batch,
    similarity_loss,
    total_loss,
    train,
    train_step,
)


@pytest.fixture(autouse=True)
def float64():
    with ad.precision("float64"):
        yield


def tiny_model(planes=3, seed=0):
    return DynamicPlaneONet(EncoderConfig(feature_dim=8, num_planes=planes, plane_resolution=8, use_positional_encoding=True, num_frequencies=4), seed=seed)


@pytest.fixture(scope="module")
def records():
    return [make_sample(sphere_box_union(), 300, 512, seed=s) for s in range(2)]


# -- bce --------------------------------------------------------------------------------
@pytest.mark.parametrize("logit,label,expected", [(0.0, 1, math.log(2)), (20.0, 1, 0.0), (-20.0, 1, 20.0), (0.0, 0, math.log(2))])
def test_bce_examples(logit, label, expected):
    assert bce_loss(Tensor([logit]), np.array([label])).item() == pytest.approx(expected, abs=1e-8)


def test_bce_stable_at_extremes():
    v = bce_loss(Tensor([1000.0, -1000.0]), np.array([1, 0])).item()
    assert v == 0.0


def test_bce_gradient_is_sigmoid_minus_label():
    z = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    y = np.array([1, 0, 1])
    bce_loss(z, y).backward()
    assert np.allclose(z.grad, (1 / (1 + np.exp(-z.data)) - y) / 3)


# -- similarity ------------------------------------------------------------------------------
def test_similarity_orthogonal_parallel_and_45():
    assert similarity_loss(Tensor(np.eye(3))).item() == 0.0
    assert similarity_loss(Tensor([[0.0, 0, 2], [0, 0, 1]])).item() == pytest.approx(1.0)
    s = math.sqrt(0.5)
    assert similarity_loss(Tensor([[1.0, 0, 0], [s, s, 0]])).item() == pytest.approx(1 / 32)


def test_similarity_single_plane_is_zero():
    assert similarity_loss(Tensor([[0.3, 0.2, 0.1]])).item() == 0.0


def test_similarity_sign_and_order_invariant():
    n = np.random.default_rng(0).normal(size=(5, 3))
    base = similarity_loss(Tensor(n)).item()
    flipped = n * np.array([[1], [-1], [1], [-1], [-1]])
    assert similarity_loss(Tensor(flipped)).item() == pytest.approx(base, rel=1e-12)
    assert similarity_loss(Tensor(n[[4, 2, 0, 3, 1]])).item() == pytest.approx(base, rel=1e-12)


def test_similarity_batch_mean():
    a = np.eye(3)
    b = np.array([[0.0, 0, 1], [0, 0, 1], [0, 0, 1]])
    assert similarity_loss(Tensor(np.stack([a, b]))).item() == pytest.approx(0.5)


def test_similarity_gradient_check():
    n = Tensor(np.random.default_rng(1).normal(size=(2, 4, 3)), requires_grad=True)
    rep = ad.grad_check(lambda: similarity_loss(n, 10), [n])
    assert rep.passed


# -- total loss and weight -----------------------------------------------------------------------
def test_similarity_weight_for_five_planes():
    assert TrainConfig().similarity_weight(5) == 100.0


def test_total_loss_modes():
    bce, sim = Tensor(0.5), Tensor(0.01)
    assert total_loss(bce, Tensor(0.0), TrainConfig(similarity_mode="always"), 0, 3).item() == 0.5
    assert total_loss(bce, sim, TrainConfig(similarity_mode="always"), 0, 3).item() == pytest.approx(0.5 + 30 * 0.01)
    assert total_loss(bce, sim, TrainConfig(similarity_mode="off"), 0, 3).item() == 0.5
    warm = TrainConfig(similarity_mode="warmup", similarity_disable_after=20_000)
    assert total_loss(bce, sim, warm, 19_999, 3).item() > 0.5
    assert total_loss(bce, sim, warm, 20_000, 3).item() == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(similarity_mode="sometimes")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# -- adam --------------------------------------------------------------------------------------
def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState(), lr=1e-3)
    assert p.data[0] == pytest.approx(1.0 - 1e-3, abs=1e-9)


def test_adam_zero_grad_no_change_and_identical_params():
    a = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    b = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    z = Tensor(np.array([0.7]), requires_grad=True)
    state = AdamState()
    for _ in range(3):
        a.grad = np.array([0.1, -0.4])
        b.grad = np.array([0.1, -0.4])
        z.grad = np.zeros(1)
        adam_step({"a": a, "b": b, "z": z}, state, lr=1e-2)
    assert np.array_equal(a.data, b.data) and z.data[0] == 0.7


# -- metrics helper ----------------------------------------------------------------------------------
def test_iou_from_labels():
    assert iou_from_labels(np.array([1, 1, 0], bool), np.array([1, 0, 0], bool)) == 0.5
    assert iou_from_labels(np.zeros(3, bool), np.zeros(3, bool)) == 1.0


# -- steps and loop -----------------------------------------------------------------------------------
def test_predictor_gets_gradient_from_similarity(records):
    m = tiny_model()
    cfg = TrainConfig(batch_size=1, max_iterations=1, validate_every=1, similarity_mode="always")
    batch = make_batch(records, cfg, np.random.default_rng(0))
    train_step(m, batch, cfg, AdamState(), 0)
    assert np.abs(m.params["predictor.fc_out.weight"].grad).sum() > 0


def test_nan_loss_aborts_with_snapshot(records):
    m = tiny_model()
    m.params["decoder.fc_out.bias"].data[...] = np.nan
    cfg = TrainConfig(batch_size=1, max_iterations=1, validate_every=1)
    with pytest.raises(TrainingDivergedError) as info:
        train_step(m, make_batch(records, cfg, np.random.default_rng(0)), cfg, AdamState(), 7)
    snap = info.value.snapshot
    assert snap["iteration"] == 7 and snap["plane_params"].shape == (1, 3, 3) and math.isnan(snap["bce"])


def test_training_is_deterministic_and_writes_outputs(records, tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=2, max_iterations=6, validate_every=3, queries_per_step=128, similarity_mode="always")
    runs = []
    for name in ("a", "b"):
        rep = train(tiny_model(), records, records[:1], cfg, out_dir=tmp_path / name)
        runs.append([{k: v for k, v in r.items() if k != "wall_seconds"} for r in rep.rows])
    assert runs[0] == runs[1]
    assert len(runs[0]) == 6 and runs[0][2]["validation_iou"] != "" and runs[0][1]["validation_iou"] == ""
    header = (tmp_path / "a" / "report.csv").read_text().splitlines()[0]
    assert header == "iteration,bce,similarity,total,validation_iou,wall_seconds"
    assert load_checkpoint(tmp_path / "a" / "best.ckpt")


def test_validation_hook_can_stop(records):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=1, max_iterations=20, validate_every=2, queries_per_step=64)
    rep = train(tiny_model(), records, records, cfg, on_validation=lambda it, iou: it >= 3)
    assert rep.stopped_early and len(rep.rows) == 4


def test_bce_decreases_early(records):
    """Windowed mean of bce over the first 100 steps drops on a single object."""
    with ad.precision("float32"):
        m = tiny_model()
        cfg = TrainConfig(learning_rate=5e-4, batch_size=1, max_iterations=100, validate_every=100, queries_per_step=512)
        bce = train(m, records[:1], records[:1], cfg).column("bce")
    windows = bce.reshape(10, 10).mean(axis=1)
    assert windows[-1] < windows[0]
    assert np.all(np.diff(windows) < 0.01)
