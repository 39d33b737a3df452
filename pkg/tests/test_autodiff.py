import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynplane import autodiff as ad
from dynplane.autodiff import ShapeError, Tensor


@pytest.fixture(autouse=True)
def float64():
    with ad.precision("float64"):
        yield


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- elementwise -------------------------------------------------------------
def test_relu_values():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_sin_cos_at_zero():
    assert ad.sin(Tensor([0.0])).data[0] == 0.0
    assert ad.cos(Tensor([0.0])).data[0] == 1.0


def test_mul_gradient_is_other_factor():
    a, b = leaf([2.0]), leaf([3.0])
    ad.tsum(a * b).backward()
    assert a.grad[0] == 3.0 and b.grad[0] == 2.0


def test_elementwise_dispatch_matches_direct_ops():
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    assert np.array_equal(ad.elementwise("add", a, b).data, [4.0, 2.0])
    assert np.array_equal(ad.elementwise("relu", a).data, [1.0, 0.0])
    assert np.allclose(ad.elementwise("sigmoid", Tensor([0.0])).data, [0.5])


def test_broadcast_mismatch_reports_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from([((3, 4), (4,)), ((3, 1), (1, 5)), ((2, 3, 4), (3, 1)), ((5,), (1,))]),
    st.integers(0, 2**31 - 1),
)
def test_broadcast_matches_explicit_tiling(shapes, seed):
    rng = np.random.default_rng(seed)
    sa, sb = shapes
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    full = np.broadcast_shapes(sa, sb)
    ta, tb = np.broadcast_to(a, full), np.broadcast_to(b, full)
    assert np.array_equal(ad.add(Tensor(a), Tensor(b)).data, ta + tb)
    assert np.array_equal(ad.mul(Tensor(a), Tensor(b)).data, ta * tb)


def test_broadcast_backward_sums_over_repeated_axes():
    a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
    ad.tsum(a + b).backward()
    assert np.array_equal(b.grad, np.full(4, 3.0))


# -- matmul ------------------------------------------------------------------
def test_matmul_identity_and_selection():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert np.array_equal(ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]])).data, [[5.0]])


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    w = Tensor(rng.normal(size=(3, 2)))
    rep = ad.grad_check(lambda: ad.tsum((a @ b) * w), [a, b])
    assert rep.passed and rep.max_rel_error < 1e-8


# -- conv / pool -------------------------------------------------------------
def test_conv_box_sum():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 5))
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    assert np.allclose(ad.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x, k, b = rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.empty((3, 6, 6))
    for o in range(3):
        for i in range(6):
            for j in range(6):
                ref[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * k[o]) + b[o]
    assert np.allclose(out, ref)


def test_conv_output_size_and_errors():
    assert ad.conv2d(Tensor(np.zeros((1, 9, 9))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1).shape == (1, 5, 5)
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((1, 1, 2, 2))))


def test_conv_gradcheck_spec_shapes():
    rng = np.random.default_rng(3)
    x, k = leaf(rng.normal(size=(2, 8, 8))), leaf(rng.normal(size=(3, 2, 3, 3)))
    w = Tensor(rng.normal(size=(3, 8, 8)))
    rep = ad.grad_check(lambda: ad.tsum(ad.conv2d(x, k, padding=1) * w), [x, k])
    assert rep.max_rel_error < 1e-4


def test_max_pool_and_upsample():
    assert np.array_equal(ad.max_pool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2).data, [[[4.0]]])
    assert np.array_equal(ad.upsample2d(Tensor([[[5.0]]]), 2).data, np.full((1, 2, 2), 5.0))


def test_max_pool_ties_route_to_first_index():
    x = leaf(np.full((1, 2, 2), 7.0))
    ad.tsum(ad.max_pool2d(x, 2)).backward()
    assert np.array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_avg_pool_gradient_is_uniform():
    x = leaf(np.random.default_rng(0).normal(size=(1, 4, 4)))
    ad.tsum(ad.avg_pool2d(x, 2)).backward()
    assert np.allclose(x.grad, 0.25)


def test_pool_indivisible_rejected():
    with pytest.raises(ShapeError):
        ad.max_pool2d(Tensor(np.zeros((1, 3, 4))), 2)


# -- scatter / gather ----------------------------------------------------------
def test_scatter_max_empty_cell_is_zero():
    out = ad.scatter_max(Tensor([[1.0], [3.0]]), np.array([0, 0]), 2)
    assert np.array_equal(out.data, [[3.0], [0.0]])


def test_scatter_max_single_point_identity():
    out = ad.scatter_max(Tensor([[-2.0, 5.0]]), np.array([1]), 3)
    assert np.array_equal(out.data[1], [-2.0, 5.0])


def test_scatter_max_out_of_range():
    with pytest.raises(IndexError):
        ad.scatter_max(Tensor([[1.0]]), np.array([2]), 2)


def test_scatter_max_gradient_goes_to_argmax_only():
    x = leaf([[1.0], [3.0], [3.0], [0.5]])
    ad.tsum(ad.scatter_max(x, np.array([0, 0, 0, 1]), 2)).backward()
    # tie between rows 1 and 2: lowest index wins
    assert np.array_equal(x.grad[:, 0], [0.0, 1.0, 0.0, 1.0])


def test_scatter_then_gather_reproduces_cell_max():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(50, 3))
    idx = rng.integers(0, 7, size=50)
    cells = ad.scatter_max(Tensor(feats), idx, 7)
    back = ad.take_rows(cells, idx).data
    for c in np.unique(idx):
        assert np.array_equal(back[idx == c][0], feats[idx == c].max(axis=0))


def test_gather_bilinear_cell_center_and_midpoint():
    grid = np.arange(2 * 4 * 4, dtype=np.float64).reshape(2, 4, 4)
    centre = np.array([[(1 + 0.5) / 4, (2 + 0.5) / 4]])  # u -> column 1, v -> row 2
    assert np.allclose(ad.gather_bilinear(Tensor(grid), centre).data[0], grid[:, 2, 1])
    mid = np.array([[(1 + 1.0) / 4, (2 + 0.5) / 4]])
    assert np.allclose(ad.gather_bilinear(Tensor(grid), mid).data[0], 0.5 * (grid[:, 2, 1] + grid[:, 2, 2]))


def test_gather_bilinear_constant_grid():
    uv = np.random.default_rng(0).uniform(-0.2, 1.2, size=(20, 2))
    out = ad.gather_bilinear(Tensor(np.full((3, 5, 5), 2.5)), uv).data
    assert np.allclose(out, 2.5)


# -- backward -------------------------------------------------------------------
def test_sum_gradient_is_ones():
    w = leaf([1.0, 2.0, 3.0])
    ad.tsum(w).backward()
    assert np.array_equal(w.grad, [1.0, 1.0, 1.0])


def test_independent_loss_gives_zero_gradient():
    w, x = leaf([1.0, 2.0, 3.0]), leaf([1.0])
    ad.tsum(x * 2.0).backward()
    assert w.grad is None or np.array_equal(w.grad, np.zeros(3))


def test_non_scalar_backward_rejected():
    with pytest.raises(ShapeError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_backward_accumulates_and_is_linear():
    rng = np.random.default_rng(5)
    w = leaf(rng.normal(size=4))
    a, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    ad.tsum(ad.sin(w) * a).backward()
    g1 = w.grad.copy()
    w.zero_grad()
    ad.tsum(ad.relu(w) * b).backward()
    g2 = w.grad.copy()
    w.zero_grad()
    (ad.tsum(ad.sin(w) * a) + ad.tsum(ad.relu(w) * b)).backward()
    assert np.allclose(w.grad, g1 + g2)
    ad.tsum(ad.sin(w) * a).backward()  # no reset: accumulates
    assert np.allclose(w.grad, 2 * g1 + g2)


def test_composite_conv_relu_matmul_gradcheck():
    rng = np.random.default_rng(6)
    x, k, m = leaf(rng.normal(size=(2, 4, 4))), leaf(rng.normal(size=(2, 2, 3, 3))), leaf(rng.normal(size=(32, 3)))

    def loss():
        h = ad.relu(ad.conv2d(x, k, padding=1)).reshape(1, 32)
        return ad.tsum(ad.sigmoid(h @ m))

    assert ad.grad_check(loss, [x, k, m]).max_rel_error < 1e-4


def test_no_grad_records_nothing():
    w = leaf([1.0])
    with ad.no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_item_requires_single_element():
    assert Tensor([[4.0]]).item() == 4.0
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_precision_context_restores_default():
    with ad.precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64


# -- grad_check harness -----------------------------------------------------------
def test_gradcheck_linear_map_is_exact():
    rng = np.random.default_rng(7)
    x = leaf(rng.normal(size=5))
    c = Tensor(rng.normal(size=5))
    rep = ad.grad_check(lambda: ad.tsum(x * c), [x])
    assert rep.max_rel_error < 1e-9


def test_gradcheck_relu_away_from_kink():
    x = leaf([-1.0, -0.3, 0.4, 2.0])
    assert ad.grad_check(lambda: ad.tsum(ad.relu(x) * 1.5), [x]).passed


def test_gradcheck_detects_wrong_gradient():
    x = leaf([0.3, 0.7])

    def bad():
        out = ad.sin(x)
        out._backward = lambda g: (g * 2.0,)  # deliberately wrong rule
        return ad.tsum(out)

    assert not ad.grad_check(bad, [x]).passed
