import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mesh4d.errors import ValidationError
from mesh4d.mesh_core import SurfaceSampleSet, TriMesh, sample_surface
from mesh4d.skeleton import (
    B_MAX,
    MASKED,
    Skeleton,
    SkinningWeights,
    interpolate_sample_weights,
    point_bone_mask,
    point_pair_mask,
    with_strongest_bone,
)


def random_weights(rng, m, active, b_max=B_MAX, sparsity=0.5):
    w = rng.random((m, active)) * (rng.random((m, active)) > sparsity)
    w[np.arange(m), rng.integers(active, size=m)] += 0.1
    full = np.zeros((m, b_max))
    full[:, :active] = w / w.sum(1, keepdims=True)
    return SkinningWeights(full)


def one_hot(bones, b_max=8):
    w = np.zeros((len(bones), b_max))
    w[np.arange(len(bones)), bones] = 1.0
    return SkinningWeights(w)


def only_sentinels(mask):
    return np.all((mask.values == 0.0) | (mask.values == MASKED))


def test_skeleton_padding_and_validation():
    heads = np.zeros((2, 3, 3))
    tails = heads + [0, 0, 1.0]
    sk = Skeleton.from_active(heads, tails)
    assert sk.heads.shape == (2, B_MAX, 3) and sk.active_bones == 3
    sk.validate()
    bad = Skeleton.from_active(heads, heads.copy())
    with pytest.raises(ValidationError):
        bad.validate()
    with pytest.raises(ValidationError):
        Skeleton.from_active(np.zeros((1, 70, 3)), np.ones((1, 70, 3)))


def test_transformed_leaves_padding_zero():
    sk = Skeleton.from_active(np.ones((1, 2, 3)), np.full((1, 2, 3), 2.0), b_max=4)
    out = sk.transformed(0.5, np.array([1.0, 1, 1]))
    np.testing.assert_allclose(out.tails[0, :2], 0.5)
    assert not out.heads[:, 2:].any()
    out.validate()


def test_weights_validation():
    SkinningWeights(np.array([[0.5, 0.5, 0.0]])).validate(active_bones=2)
    with pytest.raises(ValidationError):
        SkinningWeights(np.array([[0.5, 0.4, 0.1]])).validate(active_bones=2)
    with pytest.raises(ValidationError):
        SkinningWeights(np.array([[0.5, 0.4]])).validate()


def test_interpolate_at_vertex_and_centroid():
    mesh = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    vw = one_hot([0, 1, 2])
    s = SurfaceSampleSet(np.array([0, 0]), np.array([[1.0, 0, 0], [1 / 3, 1 / 3, 1 / 3]]),
                         np.zeros((1, 2, 3)), np.zeros((1, 2, 3)))
    w = interpolate_sample_weights(vw, s, mesh.faces).weights
    np.testing.assert_allclose(w[0], vw.weights[0])
    np.testing.assert_allclose(w[1, :3], 1 / 3)
    assert not w[1, 3:].any()


def test_interpolated_rows_sum_to_one():
    rng = np.random.default_rng(0)
    from mesh4d.mesh_core import icosphere
    mesh = icosphere(1)
    vw = random_weights(rng, mesh.n_vertices, 5)
    w = interpolate_sample_weights(vw, sample_surface(mesh, 300, 1), mesh.faces)
    np.testing.assert_allclose(w.weights.sum(1), 1.0, atol=1e-6)


def test_pair_mask_one_hot_cases():
    same = point_pair_mask(one_hot([2, 2]), 0.5)
    assert same.allowed.all()
    diff = point_pair_mask(one_hot([0, 1]), 0.0)
    assert not diff.allowed[0, 1] and not diff.allowed[1, 0]
    assert only_sentinels(diff)


@pytest.mark.parametrize("seed", range(20))
def test_pair_mask_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    w = random_weights(rng, 32, 6, b_max=8)
    tau = float(rng.uniform(0, 0.5))
    ref = np.empty((32, 32), bool)
    for i in range(32):
        for j in range(32):
            ref[i, j] = sum(w.weights[i, b] * w.weights[j, b] for b in range(8)) > tau
    mask = point_pair_mask(w, tau)
    assert np.array_equal(mask.allowed, ref)
    assert np.array_equal(mask.values, mask.values.T)


@pytest.mark.parametrize("seed", range(20))
def test_bone_mask_matches_threshold_scan(seed):
    rng = np.random.default_rng(seed)
    w = random_weights(rng, 40, 7, b_max=12)
    tau = float(rng.uniform(0, 0.6))
    ref = np.array([[w.weights[i, b] > tau for b in range(12)] for i in range(40)])
    mask = point_bone_mask(w, tau)
    assert np.array_equal(mask.allowed, ref)
    assert np.array_equal(mask.fully_masked_rows, np.flatnonzero(~ref.any(1)))


def test_bone_mask_one_hot_and_inactive_columns():
    mask = point_bone_mask(one_hot([0, 3, 1]), 0.5)
    assert mask.allowed.sum(1).tolist() == [1, 1, 1]
    assert not mask.allowed[:, 4:].any()


def test_strongest_bone_fallback():
    w = SkinningWeights(np.array([[0.3, 0.35, 0.35, 0.0], [0.02, 0.98, 0.0, 0.0]]))
    mask = point_bone_mask(w, 0.5)
    assert mask.fully_masked_rows.tolist() == [0]
    fixed = with_strongest_bone(mask, w)
    assert fixed.allowed[0].tolist() == [False, True, False, False]
    assert fixed.allowed.any(1).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_pair_mask_properties(seed, tau_a, tau_b):
    w = random_weights(np.random.default_rng(seed), 16, 4, b_max=6)
    lo, hi = sorted((tau_a, tau_b))
    m_lo, m_hi = point_pair_mask(w, lo), point_pair_mask(w, hi)
    assert np.array_equal(m_hi.values, m_hi.values.T)
    # raising the threshold only removes connections
    assert not (m_hi.allowed & ~m_lo.allowed).any()
    diag = (w.weights ** 2).sum(1) > hi
    assert np.array_equal(np.diag(m_hi.allowed), diag)
    assert not point_bone_mask(w, lo).allowed[:, 4:].any()
