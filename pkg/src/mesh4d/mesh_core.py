"""Triangle meshes, corresponding mesh sequences and surface samples.

Geometry here is float64 throughout. Sums over the three corners of a
triangle are written out explicitly so results are bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

MIN_FACE_AREA = 1e-12


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (N_v, 3)
    faces: np.ndarray  # (N_f, 3) int

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self, min_area: float = MIN_FACE_AREA) -> None:
        v, f = self.vertices, self.faces
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (N_v, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("vertices contain non-finite coordinates")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError("face index out of range")
        if len(f) and face_areas(v, f).min() <= min_area:
            raise ValidationError("mesh has a degenerate face")


@dataclass(frozen=True)
class MeshSequence:
    faces: np.ndarray  # (N_f, 3) int, shared by all frames
    frames: np.ndarray  # (T, N_v, 3)

    def __post_init__(self):
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[-1] != 3:
            raise ValidationError(f"frames must be (T, N_v, 3), got {frames.shape}")
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.frames.shape[1]

    def mesh(self, t: int) -> TriMesh:
        return TriMesh(self.frames[t], self.faces)

    def validate(self) -> None:
        if self.T < 1:
            raise ValidationError("empty sequence")
        for t in range(self.T):
            self.mesh(t).validate(min_area=0.0)


@dataclass(frozen=True)
class SurfaceSampleSet:
    face_index: np.ndarray  # (M,)
    barycentric: np.ndarray  # (M, 3)
    positions: np.ndarray  # (T, M, 3)
    normals: np.ndarray  # (T, M, 3)

    @property
    def count(self) -> int:
        return len(self.face_index)

    @property
    def T(self) -> int:
        return self.positions.shape[0]

    def subset(self, idx) -> "SurfaceSampleSet":
        return SurfaceSampleSet(
            self.face_index[idx], self.barycentric[idx], self.positions[:, idx], self.normals[:, idx]
        )


@dataclass(frozen=True)
class DeformationField:
    displacements: np.ndarray  # (T, N_v, 3)

    @property
    def T(self) -> int:
        return self.displacements.shape[0]

    @classmethod
    def from_sequence(cls, seq: MeshSequence) -> "DeformationField":
        return cls(seq.frames - seq.frames[0])


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    n = np.cross(v1 - v0, v2 - v0)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(length > 0, length, 1.0)


def _interpolate(vertices, faces, face_index, bary):
    tri = faces[face_index]
    return (
        bary[:, 0:1] * vertices[tri[:, 0]]
        + bary[:, 1:2] * vertices[tri[:, 1]]
        + bary[:, 2:3] * vertices[tri[:, 2]]
    )


def sample_surface(mesh: TriMesh, count: int, seed: int) -> SurfaceSampleSet:
    """Uniform area-weighted samples on ``mesh``.

    Faces are drawn by inverting the cumulative area distribution and the
    in-triangle position uses the square-root warp, so the density is
    uniform over the surface.
    """
    if count < 1:
        raise ValidationError("sample count must be >= 1")
    areas = face_areas(mesh.vertices, mesh.faces)
    total = areas.sum()
    if not total > MIN_FACE_AREA:
        raise ValidationError("degenerate mesh: total area below 1e-12")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    face_index = np.searchsorted(cdf, rng.random(count), side="right")
    face_index = np.minimum(face_index, len(areas) - 1)
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    positions = _interpolate(mesh.vertices, mesh.faces, face_index, bary)
    normals = face_normals(mesh.vertices, mesh.faces)[face_index]
    return SurfaceSampleSet(face_index, bary, positions[None], normals[None])


def transport_samples(samples: SurfaceSampleSet, seq: MeshSequence) -> SurfaceSampleSet:
    """Carry samples through every frame of a corresponding sequence."""
    if samples.count and samples.face_index.max() >= len(seq.faces):
        raise ValidationError("sample face index out of range for sequence")
    positions = np.stack(
        [_interpolate(f, seq.faces, samples.face_index, samples.barycentric) for f in seq.frames]
    )
    normals = np.stack([face_normals(f, seq.faces)[samples.face_index] for f in seq.frames])
    return SurfaceSampleSet(samples.face_index, samples.barycentric, positions, normals)


def barycentric_coordinates(point, triangle) -> np.ndarray:
    """Barycentric coordinates of ``point`` w.r.t. ``triangle`` (3x3, one vertex per row).

    Points off the triangle plane are projected onto it first.
    """
    p = np.asarray(point, dtype=np.float64)
    a, b, c = np.asarray(triangle, dtype=np.float64)
    e0, e1, ep = b - a, c - a, p - a
    d00, d01, d11 = e0 @ e0, e0 @ e1, e1 @ e1
    denom = d00 * d11 - d01 * d01
    if denom <= 1e-12 * max(d00 * d11, 1e-300):
        raise ValidationError("degenerate triangle")
    d20, d21 = ep @ e0, ep @ e1
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    return np.array([1.0 - v - w, v, w])


def apply_deformation(mesh: TriMesh, field: DeformationField) -> MeshSequence:
    d = np.asarray(field.displacements, dtype=np.float64)
    if d.ndim != 3 or d.shape[1:] != mesh.vertices.shape:
        raise ValidationError(
            f"field shape {d.shape} does not match mesh vertices {mesh.vertices.shape}"
        )
    return MeshSequence(mesh.faces.copy(), mesh.vertices[None] + d)


def vertex_normals(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted vertex normals.

    Returns ``(normals, isolated)`` where ``isolated`` flags vertices that
    belong to no face; their normal is the zero vector.
    """
    v, f = mesh.vertices, mesh.faces
    weighted = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # |n| = 2 * area
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], weighted)
    length = np.linalg.norm(acc, axis=1)
    isolated = length == 0.0
    normals = acc / np.where(isolated, 1.0, length)[:, None]
    return normals, isolated


def farthest_point_sampling(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset; ties go to the lowest index. Returns indices in pick order."""
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if count > m:
        raise ValidationError(f"cannot pick {count} points from {m}")
    if not 0 <= start < m:
        raise ValidationError("start index out of range")
    picked = np.empty(count, dtype=np.int64)
    if count == 0:
        return picked
    picked[0] = start
    diff = points - points[start]
    best = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
    for i in range(1, count):
        nxt = int(np.argmax(best))
        picked[i] = nxt
        diff = points - points[nxt]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(best, d, out=best)
    return picked


def normalize_sequence(seq: MeshSequence, margin: float = 0.9):
    """Center the frame-1 bounding box and scale it into [-margin, margin]^3.

    Returns ``(normalized, scale, center)``; original = normalized / scale + center.
    """
    if seq.T < 1 or seq.n_vertices == 0:
        raise ValidationError("empty sequence")
    lo, hi = seq.frames[0].min(axis=0), seq.frames[0].max(axis=0)
    half = 0.5 * (hi - lo).max()
    if not half > 0:
        raise ValidationError("zero-extent bounding box")
    center = 0.5 * (lo + hi)
    scale = margin / half
    return MeshSequence(seq.faces, (seq.frames - center) * scale), scale, center


def denormalize_points(points: np.ndarray, scale: float, center: np.ndarray) -> np.ndarray:
    return np.asarray(points) / scale + center


def is_watertight(faces: np.ndarray) -> bool:
    """Every undirected edge is shared by exactly two faces."""
    faces = np.asarray(faces)
    if len(faces) == 0:
        return False
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


# -- primitives used by tests, metrics and the synthetic generator ---------

def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    """Closed axis-aligned box, outward winding.

    The diagonals of the three faces touching ``hi`` pass through ``hi`` and
    the other three pass through ``lo``, so both corners have symmetric
    area-weighted normals.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    # corner index bits: x=1, y=2, z=4
    faces = [
        (0, 2, 6), (0, 6, 4),  # x = lo, through corner 0
        (0, 4, 5), (0, 5, 1),  # y = lo
        (0, 1, 3), (0, 3, 2),  # z = lo
        (7, 5, 4), (7, 4, 6),  # z = hi, through corner 7
        (7, 3, 1), (7, 1, 5),  # x = hi
        (7, 6, 2), (7, 2, 3),  # y = hi
    ]
    faces = np.array(faces)
    center = 0.5 * (lo + hi)
    outward = np.einsum(
        "ij,ij->i", face_normals(corners, faces), corners[faces].mean(axis=1) - center
    )
    faces[outward < 0] = faces[outward < 0][:, ::-1]
    return TriMesh(corners, faces)


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.array(verts) * radius, np.array(faces))
