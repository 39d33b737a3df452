import math

import numpy as np
import pytest

from dynplane import autodiff as ad
from dynplane.data import Box, Sphere, make_sample, sphere_box_union
from dynplane.geometry import rotation_xyz
from dynplane.meshing import Mesh
from dynplane.metrics import (
    EMPTY_PENALTY,
    MetricsReport,
    RotationEvalConfig,
    chamfer_l1,
    chamfer_points,
    evaluate_meshes,
    f_score,
    normal_consistency,
    pairwise_angles,
    plane_report,
    point_mesh_distance,
    rotated_oracle,
    rotation_eval,
    sample_mesh,
    shape_mesh,
    volumetric_iou,
    write_reports,
    write_rotation_table,
)
from dynplane.networks import DynamicPlaneONet, EncoderConfig


def square(z=0.0, flip=False, size=1.0):
    h = size / 2
    tri = [[0, 2, 1], [0, 3, 2]] if flip else [[0, 1, 2], [0, 2, 3]]
    return Mesh([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]], tri)


def wall(x=0.0):
    """Unit square in the plane x = const."""
    return Mesh([[x, -0.5, -0.5], [x, 0.5, -0.5], [x, 0.5, 0.5], [x, -0.5, 0.5]], [[0, 1, 2], [0, 2, 3]])


def transformed(mesh, rot, shift):
    return Mesh(mesh.vertices @ rot.T + shift, mesh.triangles)


# -- volumetric IoU -------------------------------------------------------------------------
def test_iou_identical_and_disjoint():
    a = Box([0, 0, 0], [0.2] * 3)
    assert volumetric_iou(a.occupancy, a.occupancy, 10_000) == 1.0
    b = Box([0.3, 0.3, 0.3], [0.1] * 3)
    assert volumetric_iou(a.occupancy, b.occupancy, 10_000) == 0.0


def test_iou_shifted_unit_box():
    a, b = Box([0, 0, 0], [0.5] * 3), Box([0.5, 0, 0], [0.5] * 3)
    iou = volumetric_iou(a.occupancy, b.occupancy, 100_000, domain=((-0.5, -0.5, -0.5), (1.0, 0.5, 0.5)))
    assert abs(iou - 1 / 3) < 0.01


def test_iou_empty_volumes_is_one():
    nothing = lambda p: np.zeros(len(p), bool)
    assert volumetric_iou(nothing, nothing, 1000) == 1.0


def test_iou_std_halves_with_four_times_points():
    a, b = Sphere([0, 0, 0], 0.3), Sphere([0.1, 0, 0], 0.3)
    small = np.std([volumetric_iou(a.occupancy, b.occupancy, 2_000, seed=s) for s in range(60)])
    large = np.std([volumetric_iou(a.occupancy, b.occupancy, 8_000, seed=s) for s in range(60)])
    # halving the deviation takes four times the points; allow a 2x band around the ratio
    assert 1.0 < small / large < 4.0


# -- sampling and distances ---------------------------------------------------------------------
def test_sample_mesh_on_surface_with_unit_normals():
    mesh = shape_mesh(Sphere([0, 0, 0], 0.3), 32)
    pts, normals = sample_mesh(mesh, 5000, seed=1)
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)
    assert point_mesh_distance(pts, mesh).max() < 1e-9


def test_point_mesh_distance_against_brute_force():
    from dynplane.metrics import _closest_on_triangles

    mesh = shape_mesh(Box([0, 0, 0], [0.2, 0.1, 0.15]), 8)
    q = np.random.default_rng(2).uniform(-0.5, 0.5, size=(100, 3))
    fast = point_mesh_distance(q, mesh)
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    exact = np.array([np.linalg.norm(_closest_on_triangles(np.broadcast_to(p, a.shape), a, b, c) - p, axis=1).min() for p in q])
    assert np.allclose(fast, exact, rtol=0, atol=1e-12)
    # dense samples only ever bound the distance from above
    dense, _ = sample_mesh(mesh, 2000, seed=3)
    assert np.all(fast <= np.min(np.linalg.norm(q[:, None] - dense[None], axis=2), axis=1) + 1e-12)


# -- chamfer -------------------------------------------------------------------------------------
def test_chamfer_point_sets():
    assert chamfer_points(np.zeros((1, 3)), np.array([[0.3, 0, 0]])) == pytest.approx(0.3)


def test_chamfer_identity_and_offset():
    m = square()
    assert chamfer_l1(m, m, 10_000) == 0.0
    assert abs(chamfer_l1(m, square(0.1), 100_000) - 0.1) < 0.005


def test_chamfer_empty_penalty(caplog):
    assert chamfer_l1(Mesh(), square(), 100) == EMPTY_PENALTY == math.sqrt(3)
    assert "empty" in caplog.text


def test_chamfer_symmetric():
    a, b = shape_mesh(Sphere([0, 0, 0], 0.3), 24), shape_mesh(Box([0.05, 0, 0], [0.25] * 3), 24)
    assert chamfer_l1(a, b, 20_000, seed=4) == chamfer_l1(b, a, 20_000, seed=4)


# -- normal consistency ---------------------------------------------------------------------------------
def test_normal_consistency_cases():
    m = square()
    assert normal_consistency(m, m, 10_000) == 1.0
    assert normal_consistency(m, square(0.05, flip=True), 10_000) == pytest.approx(1.0)
    assert normal_consistency(square(), wall(0.0), 10_000) < 1e-9
    assert normal_consistency(Mesh(), m, 10) == 0.0


# -- f-score ----------------------------------------------------------------------------------------------
def test_f_score_identity_boundary_and_far():
    m = square()
    assert f_score(m, m, 0.01, 10_000) == 1.0
    assert f_score(m, square(0.01), 0.01, 10_000) == pytest.approx(1.0)
    assert f_score(m, square(0.02), 0.01, 10_000) == 0.0
    assert f_score(Mesh(), m, 0.01, 10) == 0.0
    with pytest.raises(ValueError):
        f_score(m, m, 0.0)


def test_f_score_symmetric():
    a, b = shape_mesh(Sphere([0, 0, 0], 0.3), 24), shape_mesh(Sphere([0.005, 0, 0], 0.29), 24)
    assert f_score(a, b, 0.01, 5000, seed=5) == pytest.approx(f_score(b, a, 0.01, 5000, seed=5))


# -- rigid invariance ---------------------------------------------------------------------------------------
def test_surface_metrics_rigid_invariance():
    a, b = shape_mesh(Sphere([0, 0, 0], 0.25), 32), shape_mesh(Box([0.02, 0, 0], [0.2] * 3), 32)
    rot, shift = rotation_xyz(0.3, -0.7, 1.1), np.array([0.05, -0.02, 0.01])
    ra, rb = transformed(a, rot, shift), transformed(b, rot, shift)
    n = 20_000
    # same seed and same triangle order: samples map through the transform exactly
    assert chamfer_l1(ra, rb, n, 6) == pytest.approx(chamfer_l1(a, b, n, 6), rel=1e-6)
    assert normal_consistency(ra, rb, n, 6) == pytest.approx(normal_consistency(a, b, n, 6), rel=1e-6)
    assert f_score(ra, rb, 0.02, n, 6) == pytest.approx(f_score(a, b, 0.02, n, 6), abs=1e-3)


# -- reports -----------------------------------------------------------------------------------------------
def test_evaluate_meshes_identity(tmp_path):
    shape = sphere_box_union()
    mesh = shape_mesh(shape, 32)
    rep = evaluate_meshes(mesh, mesh, shape.occupancy, shape.occupancy, 5000, 5000)
    assert (rep.iou, rep.chamfer_l1, rep.normal_consistency, rep.f_score) == (1.0, 0.0, 1.0, 1.0)
    write_reports(tmp_path / "m.csv", ["a"], [rep])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("sample,iou") and lines[-1].startswith("mean,")


def test_gt_mesh_matches_shape():
    shape = Sphere([0.05, 0, 0], 0.3)
    mesh = shape_mesh(shape, 64)
    assert np.abs(shape.sdf(mesh.vertices)).max() < 1 / 64


# -- rotation protocol --------------------------------------------------------------------------------------
def test_gt_oracle_is_rotation_consistent():
    shape = sphere_box_union()
    for rot in (rotation_xyz(0.2, 0.5, -0.4), rotation_xyz(1.0, 0, 2.0)):
        oracle = rotated_oracle(shape, rot)
        assert volumetric_iou(oracle, oracle, 5000) == 1.0
        p = np.random.default_rng(7).uniform(-0.5, 0.5, size=(2000, 3))
        assert np.array_equal(oracle(p @ rot.T), shape.occupancy(p))


@pytest.fixture(scope="module")
def eval_setup():
    with ad.precision("float32"):
        m = DynamicPlaneONet(EncoderConfig(feature_dim=8, num_planes=3, plane_resolution=8), seed=0)
        rng = np.random.default_rng(0)
        for t in m.params.values():
            if not np.any(t.data):
                t.data[...] = rng.normal(0, 0.3, size=t.shape)
    recs = [make_sample(sphere_box_union(), 200, 16, seed=s) for s in range(2)]
    return m, recs


def test_zero_theta_equals_unrotated(eval_setup, tmp_path):
    from dynplane.metrics import model_occupancy, sample_seed

    m, recs = eval_setup
    cfg = RotationEvalConfig(theta_max=(0.0, 30.0), num_iou_points=3000)
    table = rotation_eval(m, recs, cfg)
    plain = np.mean([volumetric_iou(model_occupancy(m, r.input_cloud), r.shape.occupancy, 3000, sample_seed(0, i)) for i, r in enumerate(recs)])
    assert table[0] == (0.0, plain)
    write_rotation_table(tmp_path / "rot.csv", table)
    assert (tmp_path / "rot.csv").read_text().splitlines()[0] == "theta_max_deg,mean_iou"


# -- plane report -------------------------------------------------------------------------------------------
def test_pairwise_angles():
    s = math.sqrt(0.5)
    assert np.allclose(pairwise_angles(np.array([[1.0, 0, 0], [0, 1, 0], [s, s, 0]])), [90, 45, 45])


def test_plane_report_canonical_and_unit(eval_setup, tmp_path):
    _, recs = eval_setup
    canon = DynamicPlaneONet(EncoderConfig(feature_dim=8, num_planes=0, fixed_canonical_planes=3, plane_resolution=8))
    rep = plane_report(canon, recs)
    normals = np.array([r[2:5] for r in rep.rows])
    assert np.array_equal(normals, np.tile(np.eye(3), (len(recs), 1)))
    assert np.all(rep.pairwise_angles == 90.0) and rep.histogram.sum() == 3 * len(recs)
    m, _ = eval_setup
    dyn = plane_report(m, recs)
    assert np.allclose(np.linalg.norm(np.array([r[2:5] for r in dyn.rows]), axis=1), 1.0, atol=1e-6)
    assert {r[5] for r in dyn.rows} <= {1, -1}
    dyn.write(tmp_path / "planes.csv")
    assert (tmp_path / "planes_angles.csv").exists()
