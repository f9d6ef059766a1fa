import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mesh4d.errors import ValidationError
from mesh4d.mesh_core import MeshSequence, TriMesh, box_mesh, icosphere, sample_surface
from mesh4d.metrics import (
    AlignmentTransform,
    EvalConfig,
    chamfer,
    chamfer_brute,
    closest_point_on_triangles,
    cpd_rigid,
    evaluate_sequence,
    l2_corr,
    occupancy,
    p2s,
    point_mesh_distance,
    rotation_angle_deg,
    volumetric_iou,
)


def brute_point_mesh(points, mesh):
    """Loop over every triangle: plane projection if it lands inside, else nearest edge."""
    out = []
    for p in points:
        best = np.inf
        for f in mesh.faces:
            a, b, c = mesh.vertices[f]
            best = min(best, _tri_dist(p, a, b, c))
        out.append(best)
    return np.array(out)


def _seg(p, a, b):
    ab = b - a
    s = np.clip((p - a) @ ab / (ab @ ab), 0, 1)
    return np.linalg.norm(p - a - s * ab)


def _tri_dist(p, a, b, c):
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - ((p - a) @ n) * n
    # inside test by signed areas
    inside = all(np.cross(v1 - v0, q - v0) @ n >= 0 for v0, v1 in ((a, b), (b, c), (c, a)))
    if inside:
        return abs((p - a) @ n)
    return min(_seg(p, a, b), _seg(p, b, c), _seg(p, c, a))


def test_occupancy_unit_cube_and_half_box():
    cube = box_mesh()
    assert occupancy(cube, 4, ((0, 0, 0), (1, 1, 1))).bits.sum() == 64
    half = box_mesh((0, 0, 0), (0.5, 1, 1))
    assert occupancy(half, 8, ((0, 0, 0), (1, 1, 1))).bits.sum() == 256
    with pytest.raises(ValidationError):
        occupancy(cube, 4, ((0, 0, 0), (0, 1, 1)))


def test_parity_and_winding_agree_on_sphere():
    sphere = icosphere(2)
    bounds = ((-1.1,) * 3, (1.1,) * 3)
    a = occupancy(sphere, 32, bounds, "parity").bits
    b = occupancy(sphere, 32, bounds, "winding").bits
    assert np.array_equal(a, b)


def test_open_mesh_falls_back_to_winding():
    sphere = icosphere(1)
    open_mesh = TriMesh(sphere.vertices, sphere.faces[1:])
    assert occupancy(open_mesh, 8, ((-1.1,) * 3, (1.1,) * 3)).method == "winding"


def test_iou_identity_and_disjoint():
    cube = box_mesh()
    assert volumetric_iou(cube, cube, 32) == 1.0
    assert volumetric_iou(cube, box_mesh((2, 0, 0), (3, 1, 1)), 32) == 0.0


def test_closest_point_regions():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    pts = np.array([[0.2, 0.2, 1.0], [-1, -1, 0], [2, -0.5, 0], [1, 1, 0], [0.5, -1, 0.0]])
    expect = np.array([[0.2, 0.2, 0], [0, 0, 0], [1, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0]])
    got = closest_point_on_triangles(pts, a[None].repeat(5, 0), b[None].repeat(5, 0), c[None].repeat(5, 0))
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_point_mesh_distance_matches_bruteforce():
    rng = np.random.default_rng(0)
    mesh = icosphere(1)
    pts = rng.normal(size=(60, 3)) * 1.3
    np.testing.assert_allclose(point_mesh_distance(pts, mesh), brute_point_mesh(pts, mesh), atol=1e-12)


def test_p2s_cases():
    mesh = icosphere(2)
    on = sample_surface(mesh, 200, 0).positions[0]
    assert p2s(on, mesh) < 1e-9
    tri = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    assert abs(p2s(np.array([[0.25, 0.25, 0.7]]), tri) - 0.7) < 1e-15
    with pytest.raises(ValidationError):
        p2s(np.zeros((0, 3)), tri)


def test_chamfer_cases():
    a = np.random.default_rng(0).random((50, 3))
    assert chamfer(a, a) == 0.0
    assert abs(chamfer(np.zeros((1, 3)), np.array([[0.0, 0, 2.5]])) - 2.5) < 1e-15
    with pytest.raises(ValidationError):
        chamfer(a, np.zeros((0, 3)))


def _moving_seq(rng, T=4):
    base = icosphere(1)
    frames = [base.vertices + rng.normal(scale=0.05, size=base.vertices.shape) * (t > 0) for t in range(T)]
    return MeshSequence(base.faces, np.stack(frames))


def test_l2_corr_cases():
    rng = np.random.default_rng(1)
    gt = _moving_seq(rng)
    agg, per = l2_corr(gt, gt)
    assert agg == 0 and not per.any()
    shifted = gt.frames.copy()
    shifted[1] += [0.3, 0, 0]
    _, per = l2_corr(MeshSequence(gt.faces, shifted), gt)
    assert abs(per[1] - 0.3) < 1e-12
    perm = rng.permutation(gt.n_vertices)
    inv = np.argsort(perm)
    pred = MeshSequence(gt.faces, gt.frames + rng.normal(scale=0.01, size=gt.frames.shape))
    pred_perm = MeshSequence(inv[pred.faces], pred.frames[:, perm])
    assert abs(l2_corr(pred, gt)[0] - l2_corr(pred_perm, gt)[0]) < 1e-15


def test_cpd_identity_fixed_point():
    pts = np.random.default_rng(2).random((200, 3))
    res = cpd_rigid(pts, pts)
    tr = res.transform
    assert abs(tr.scale - 1) < 1e-6 and rotation_angle_deg(tr.rotation, np.eye(3)) < 1e-4
    assert np.abs(tr.translation).max() < 1e-6 and res.sigma2 < 1e-6


def test_cpd_nll_non_increasing_with_outliers():
    rng = np.random.default_rng(3)
    src = rng.random((300, 3))
    rot = Rotation.from_euler("z", 20, degrees=True).as_matrix()
    tgt = 0.8 * src @ rot.T + [0.1, 0, 0] + rng.normal(scale=0.02, size=src.shape)
    res = cpd_rigid(src, tgt, outlier_weight=0.1)
    nll = np.array(res.nll)
    assert np.all(np.diff(nll) <= 1e-9 * np.abs(nll[:-1]).max())
    assert rotation_angle_deg(res.transform.rotation, rot) < 2.0


def test_cpd_rejects_degenerate_input():
    flat = np.column_stack([np.random.default_rng(4).random((20, 2)), np.zeros(20)])
    with pytest.raises(ValidationError):
        cpd_rigid(flat, flat)
    with pytest.raises(ValidationError):
        cpd_rigid(np.eye(3)[:2], np.eye(3))


def test_alignment_transform_validation():
    AlignmentTransform.identity().validate()
    with pytest.raises(ValidationError):
        AlignmentTransform(1.0, np.diag([1.0, 1, -1]), np.zeros(3)).validate()


def test_evaluate_identical_and_scaled():
    rng = np.random.default_rng(5)
    gt = _moving_seq(rng, T=3)
    cfg = EvalConfig(grid=32, points=2000)
    same = evaluate_sequence(gt, gt, cfg)
    assert same.iou == 1.0 and max(same.p2s, same.chamfer, same.l2_corr) < 1e-9
    scaled = MeshSequence(gt.faces, gt.frames * 1.2)
    m = evaluate_sequence(scaled, gt, cfg)
    assert abs(m.iou - 1) < 1e-3 and m.p2s < 1e-3 and m.chamfer < 1e-3 and m.l2_corr < 1e-3
    assert json.loads(m.to_json())["grid_resolution"] == 32
    assert abs(m.iou - np.mean(m.per_frame["iou"])) < 1e-12


def test_evaluate_rejects_frame_mismatch():
    gt = _moving_seq(np.random.default_rng(6), T=3)
    with pytest.raises(ValidationError):
        evaluate_sequence(MeshSequence(gt.faces, gt.frames[:2]), gt)


def test_chamfer_equals_brute_small():
    rng = np.random.default_rng(7)
    a, b = rng.random((40, 3)), rng.random((30, 3))
    assert abs(chamfer(a, b) - chamfer_brute(a, b)) < 1e-12
