import json

import numpy as np
import pytest

from mesh4d import io
from mesh4d.errors import ValidationError
from mesh4d.mesh_core import MeshSequence, TriMesh, icosphere
from mesh4d.synth import make_sample


@pytest.fixture(scope="module")
def sample():
    return make_sample(1010, total_frames=5, bone_range=(2, 3))


def test_m4ds_round_trip_with_skeleton(tmp_path, sample):
    path = tmp_path / "a.m4ds"
    io.write_m4ds(path, sample.sequence, sample.skeleton, sample.weights, "rig-1010")
    item = io.validate_m4ds(path)
    assert item.identifier == "rig-1010"
    assert np.array_equal(item.sequence.faces, sample.sequence.faces)
    np.testing.assert_allclose(item.sequence.frames, sample.sequence.frames, atol=1e-6)
    b = sample.skeleton.active_bones
    assert item.skeleton.active_bones == b
    np.testing.assert_allclose(item.skeleton.heads[:, :b], sample.skeleton.heads[:, :b], atol=1e-6)
    np.testing.assert_allclose(item.weights.weights, sample.weights.weights, atol=1e-6)
    # a second round trip is bit-exact once values are f32-representable
    io.write_m4ds(tmp_path / "b.m4ds", item.sequence, item.skeleton, item.weights, item.identifier)
    assert (tmp_path / "b.m4ds").read_bytes() == path.read_bytes()


def test_m4ds_plain_sequence(tmp_path):
    sphere = icosphere(1)
    seq = MeshSequence(sphere.faces, np.stack([sphere.vertices, sphere.vertices * 2]))
    io.write_m4ds(tmp_path / "s.m4ds", seq)
    item = io.read_m4ds(tmp_path / "s.m4ds")
    assert item.skeleton is None and item.identifier == ""
    assert np.array_equal(item.sequence.frames, seq.frames.astype(np.float32))


def test_m4ds_rejects_corruption(tmp_path, sample):
    path = tmp_path / "a.m4ds"
    io.write_m4ds(path, sample.sequence)
    raw = path.read_bytes()
    for bad, what in ((b"XXXX" + raw[4:], "magic"), (raw[:-5], "truncated"), (raw + b"\0", "trailing"),
                      (raw[:8], "truncated")):
        (tmp_path / "bad.m4ds").write_bytes(bad)
        with pytest.raises(ValidationError, match=what):
            io.read_m4ds(tmp_path / "bad.m4ds")
    with pytest.raises(ValidationError):
        io.write_m4ds(path, sample.sequence, sample.skeleton, None)


def test_obj_round_trip_and_polygons(tmp_path, sample):
    files = io.export_obj_sequence(tmp_path / "obj", sample.sequence, fps=12)
    assert len(files) == sample.sequence.T
    assert json.loads((tmp_path / "obj" / "manifest.json").read_text())["fps"] == 12
    back = io.import_obj_sequence(tmp_path / "obj")
    np.testing.assert_allclose(back.frames, sample.sequence.frames, atol=1e-6)
    (tmp_path / "quad.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    quad = io.read_obj(tmp_path / "quad.obj")
    assert quad.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_pgm_round_trip_and_comments(tmp_path):
    img = (np.random.default_rng(0).random((7, 11)) > 0.5).astype(np.uint8)
    io.write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(io.read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 200]))
    assert io.read_pgm(tmp_path / "c.pgm").tolist() == [[0, 1]]
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValidationError):
        io.read_pgm(tmp_path / "p2.pgm")


def test_latent_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {k: rng.normal(size=s).astype(np.float32)
              for k, s in zip(io.LATENT_FIELDS, [(2, 3, 4), (2, 3, 4), (2, 3, 4), (3, 3)])}
    io.write_latent(tmp_path / "z.bin", arrays, {"scale": 0.5})
    back, meta = io.read_latent(tmp_path / "z.bin")
    assert meta == {"scale": 0.5}
    for k in io.LATENT_FIELDS:
        assert np.array_equal(back[k], arrays[k])


def test_manifest_round_trip_and_missing_key(tmp_path):
    io.write_manifest(tmp_path / "m.json", ["a"], ["b"], {"train": [1]})
    assert io.read_manifest(tmp_path / "m.json")["test"] == ["b"]
    (tmp_path / "bad.json").write_text(json.dumps({"train": []}))
    with pytest.raises(ValidationError):
        io.read_manifest(tmp_path / "bad.json")
