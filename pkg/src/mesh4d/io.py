"""On-disk formats: the .m4ds sequence container, OBJ frame directories, PGM images, latent files."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh_core import MeshSequence, TriMesh
from .skeleton import B_MAX, Skeleton, SkinningWeights

MAGIC = b"M4DS"
VERSION = 1
FLAG_SKELETON = 1
FLAG_IDENTIFIER = 2
_HEADER = struct.Struct("<4sIIIII")


# ---------------------------------------------------------------- .m4ds

def write_m4ds(path, seq: MeshSequence, skeleton: Skeleton | None = None,
               weights: SkinningWeights | None = None, identifier: str = "") -> None:
    """Little-endian container: header, u32 faces, f32 frames, optional skeleton and identifier."""
    if (skeleton is None) != (weights is None):
        raise ValidationError("skeleton and weights must be written together")
    flags = (FLAG_SKELETON if skeleton is not None else 0) | (FLAG_IDENTIFIER if identifier else 0)
    parts = [_HEADER.pack(MAGIC, VERSION, seq.T, seq.n_vertices, len(seq.faces), flags),
             np.asarray(seq.faces, dtype="<u4").tobytes(),
             np.asarray(seq.frames, dtype="<f4").tobytes()]
    if skeleton is not None:
        b = skeleton.active_bones
        bones = np.concatenate([skeleton.heads[:, :b], skeleton.tails[:, :b]], axis=-1)
        parts += [struct.pack("<I", b), bones.astype("<f4").tobytes(),
                  np.asarray(weights.weights[:, :b], dtype="<f4").tobytes()]
    if identifier:
        raw = identifier.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    Path(path).write_bytes(b"".join(parts))


class M4ds:
    """Decoded container contents."""

    def __init__(self, sequence, skeleton=None, weights=None, identifier=""):
        self.sequence = sequence
        self.skeleton = skeleton
        self.weights = weights
        self.identifier = identifier


def read_m4ds(path, b_max: int = B_MAX) -> M4ds:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, T, nv, nf, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(data):
            raise ValidationError(f"{path}: truncated payload")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += size
        return arr

    faces = take("<u4", nf * 3).reshape(nf, 3).astype(np.int64)
    frames = take("<f4", T * nv * 3).reshape(T, nv, 3).astype(np.float64)
    seq = MeshSequence(faces, frames)
    skeleton = weights = None
    if flags & FLAG_SKELETON:
        b = int(take("<u4", 1)[0])
        bones = take("<f4", T * b * 6).reshape(T, b, 6).astype(np.float64)
        w = take("<f4", nv * b).reshape(nv, b).astype(np.float64)
        skeleton = Skeleton.from_active(bones[..., :3], bones[..., 3:], b_max)
        padded = np.zeros((nv, b_max))
        padded[:, :b] = w
        weights = SkinningWeights(padded)
    identifier = ""
    if flags & FLAG_IDENTIFIER:
        n = int(take("<u4", 1)[0])
        identifier = bytes(take("u1", n)).decode("utf-8")
    if off != len(data):
        raise ValidationError(f"{path}: {len(data) - off} trailing bytes")
    return M4ds(seq, skeleton, weights, identifier)


def validate_m4ds(path) -> M4ds:
    """Read and run every invariant check on the contents."""
    item = read_m4ds(path)
    item.sequence.validate()
    if item.skeleton is not None:
        item.skeleton.validate()
        if item.skeleton.T != item.sequence.T:
            raise ValidationError(f"{path}: skeleton frame count differs")
        # f32 storage: rows sum to 1 only to single precision
        item.weights.validate(item.skeleton.active_bones, atol=1e-4)
    return item


# ---------------------------------------------------------------- OBJ

def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def export_obj_sequence(out_dir, seq: MeshSequence, fps: float = 24.0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for t in range(seq.T):
        name = f"frame_{t:04d}.obj"
        write_obj(out / name, MeshSequence(seq.faces, seq.frames.astype(np.float32).astype(np.float64)).mesh(t))
        names.append(name)
    (out / "manifest.json").write_text(json.dumps({"frames": names, "fps": fps}, indent=2))
    return [out / n for n in names]


def import_obj_sequence(in_dir) -> MeshSequence:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    meshes = [read_obj(d / n) for n in manifest["frames"]]
    return MeshSequence(meshes[0].faces, np.stack([m.vertices for m in meshes]))


# ---------------------------------------------------------------- PGM

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5); nonzero pixels are written as 255."""
    img = np.where(np.asarray(image) > 0, 255, 0).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Returns a 0/1 uint8 image (threshold at half of maxval)."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValidationError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return (img > maxval // 2).astype(np.uint8)


# ---------------------------------------------------------------- latents

LATENT_FIELDS = ("mean", "log_variance", "sample", "fps_positions")


def write_latent(path, arrays: dict, meta: dict | None = None) -> None:
    """Raw little-endian f32 blobs back to back, described by ``<path>.json``."""
    layout, chunks, off = {}, [], 0
    for name in LATENT_FIELDS:
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        layout[name] = {"offset": off, "shape": list(a.shape)}
        chunks.append(a.tobytes())
        off += a.nbytes
    Path(path).write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps({"version": 1, "arrays": layout, "meta": meta or {}}, indent=2))


def read_latent(path) -> tuple[dict, dict]:
    side = json.loads(Path(str(path) + ".json").read_text())
    data = Path(path).read_bytes()
    out = {}
    for name, info in side["arrays"].items():
        count = int(np.prod(info["shape"]))
        out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=info["offset"]).reshape(info["shape"]).copy()
    return out, side.get("meta", {})


# ---------------------------------------------------------------- dataset manifest

def write_manifest(path, train: list[str], test: list[str], seeds: dict) -> None:
    Path(path).write_text(json.dumps({"train": train, "test": test, "seeds": seeds}, indent=2, sort_keys=True))


def read_manifest(path) -> dict:
    m = json.loads(Path(path).read_text())
    for key in ("train", "test", "seeds"):
        if key not in m:
            raise ValidationError(f"{path}: manifest missing {key!r}")
    return m
