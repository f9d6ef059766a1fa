"""Synthetic rigged tube chains animated with linear blend skinning.

Stand-in for curated rigged assets: every sample is a capped tube laid
along a chain of bones, skinned with a smooth distance falloff, and
posed per frame by forward kinematics.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .mesh_core import DeformationField, MeshSequence, TriMesh
from .skeleton import B_MAX, Skeleton, SkinningWeights

log = logging.getLogger(__name__)

MAX_JOINT_ANGLE = np.deg2rad(75.0)


@dataclass(frozen=True)
class OrthoCamera:
    """Frontal orthographic view looking down -z; image x = world x, image y = world y."""

    center: tuple[float, float] = (0.0, 0.0)
    half_extent: float = 2.0

    def to_pixels(self, xy: np.ndarray, resolution: int) -> np.ndarray:
        """World (x, y) -> continuous (col, row) pixel coordinates."""
        cx, cy = self.center
        e = self.half_extent
        col = (xy[..., 0] - (cx - e)) / (2 * e) * resolution
        row = ((cy + e) - xy[..., 1]) / (2 * e) * resolution
        return np.stack([col, row], axis=-1)


@dataclass(frozen=True)
class RigSpec:
    bone_lengths: np.ndarray  # (B,)
    radius: float = 0.08
    radial_segments: int = 12
    axial_segments: int = 6  # per bone
    amplitudes: np.ndarray | None = None  # (B,) radians
    frequencies: np.ndarray | None = None  # (B,) cycles per clip
    phases: np.ndarray | None = None  # (B,)
    axes: np.ndarray | None = None  # (B, 3) joint rotation axes

    @property
    def bone_count(self) -> int:
        return len(self.bone_lengths)

    def validate(self) -> None:
        b = self.bone_count
        if not 1 <= b <= B_MAX:
            raise ValidationError(f"bone count {b} outside [1, {B_MAX}]")
        if np.any(np.asarray(self.bone_lengths) <= 0):
            raise ValidationError("bone lengths must be positive")
        if self.amplitudes is not None and np.any(np.abs(self.amplitudes) > MAX_JOINT_ANGLE + 1e-12):
            raise ValidationError("joint amplitude above 75 degrees")

    def curves(self):
        b = self.bone_count
        amp = np.zeros(b) if self.amplitudes is None else np.asarray(self.amplitudes, float)
        freq = np.ones(b) if self.frequencies is None else np.asarray(self.frequencies, float)
        ph = np.zeros(b) if self.phases is None else np.asarray(self.phases, float)
        axes = np.tile([0.0, 0.0, 1.0], (b, 1)) if self.axes is None else np.asarray(self.axes, float)
        axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
        return amp, freq, ph, axes


@dataclass(frozen=True)
class SynthSample:
    sequence: MeshSequence
    skeleton: Skeleton
    weights: SkinningWeights  # per vertex
    camera: OrthoCamera = field(default_factory=OrthoCamera)
    identifier: str = ""
    frame_indices: np.ndarray | None = None

    def validate(self) -> None:
        self.sequence.validate()
        self.skeleton.validate()
        if self.skeleton.T != self.sequence.T:
            raise ValidationError("skeleton and sequence frame counts differ")
        if len(self.weights.weights) != self.sequence.n_vertices:
            raise ValidationError("weights rows do not match vertex count")
        self.weights.validate(self.skeleton.active_bones)


def random_rig_spec(seed: int, bone_range=(2, 5)) -> RigSpec:
    rng = np.random.default_rng(seed)
    b = int(rng.integers(bone_range[0], bone_range[1] + 1))
    amp = rng.uniform(np.deg2rad(20), np.deg2rad(60), b) * rng.choice([-1.0, 1.0], b)
    axes = np.column_stack([rng.uniform(-0.25, 0.25, (b, 2)), np.ones(b)])
    return RigSpec(
        bone_lengths=rng.uniform(0.3, 0.6, b),
        radius=float(rng.uniform(0.06, 0.1)),
        amplitudes=amp,
        frequencies=rng.uniform(0.5, 1.5, b),
        phases=rng.uniform(0, 2 * np.pi, b),
        axes=axes,
    )


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    s = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + s[:, None] * ab), axis=1)


def gen_chain_rig(spec: RigSpec, seed: int = 0):
    """Capped tube along a straight chain on +x, rest skeleton and vertex weights.

    ``seed`` drives a mild radius profile so rigs with equal specs but
    different seeds still differ in shape.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    lengths = np.asarray(spec.bone_lengths, float)
    joints = np.concatenate([[0.0], np.cumsum(lengths)])
    stations = [0.0]
    for b in range(spec.bone_count):
        stations += list(np.linspace(joints[b], joints[b + 1], spec.axial_segments + 1)[1:])
    stations = np.array(stations)
    wobble_phase = rng.uniform(0, 2 * np.pi)
    radii = spec.radius * (1.0 + 0.15 * np.sin(2 * np.pi * stations / joints[-1] * 1.5 + wobble_phase))
    s = spec.radial_segments
    phi = 2 * np.pi * np.arange(s) / s
    rings = np.stack(
        [np.column_stack([np.full(s, x), r * np.cos(phi), r * np.sin(phi)]) for x, r in zip(stations, radii)]
    )
    n_rings = len(stations)
    verts = np.concatenate([rings.reshape(-1, 3), [[0.0, 0.0, 0.0], [joints[-1], 0.0, 0.0]]])
    start_cap, end_cap = n_rings * s, n_rings * s + 1
    faces = []
    for i in range(n_rings - 1):
        for j in range(s):
            a, b = i * s + j, i * s + (j + 1) % s
            c, d = a + s, b + s
            faces += [(a, b, d), (a, d, c)]
    for j in range(s):
        faces.append((start_cap, (j + 1) % s, j))
        last = (n_rings - 1) * s
        faces.append((end_cap, last + j, last + (j + 1) % s))
    mesh = TriMesh(verts, np.array(faces))

    heads = np.column_stack([joints[:-1], np.zeros((spec.bone_count, 2))])
    tails = np.column_stack([joints[1:], np.zeros((spec.bone_count, 2))])
    skeleton = Skeleton.from_active(heads[None], tails[None])
    weights = skinning_weights(verts, heads, tails, spec.radius)
    return mesh, skeleton, weights


def skinning_weights(verts, heads, tails, radius) -> SkinningWeights:
    """exp(-(d/r)^2) over the two nearest bone segments, normalized."""
    nb = len(heads)
    d = np.stack([_segment_distance(verts, heads[b], tails[b]) for b in range(nb)], axis=1)
    w = np.zeros((len(verts), B_MAX))
    if nb == 1:
        w[:, 0] = 1.0
        return SkinningWeights(w)
    order = np.argsort(d, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(verts))[:, None]
    dn = d[rows, order]
    # shift by the nearest distance so far-from-bone cap vertices do not underflow
    falloff = np.exp(-((dn / radius) ** 2 - (dn[:, :1] / radius) ** 2))
    w[rows, order] = falloff / falloff.sum(axis=1, keepdims=True)
    return SkinningWeights(w)


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    x, y, z = np.asarray(axis, float) / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    C = 1 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def lbs_deform(rest: TriMesh, weights: SkinningWeights, rotations: np.ndarray,
               translations: np.ndarray) -> np.ndarray:
    """v' = sum_b w_vb (R_b v + t_b) over the given (B, 3, 3) / (B, 3) transforms.

    Evaluated as v + sum_b w_vb ((R_b - I) v + t_b), equal for normalized
    weights and exact for identity transforms.
    """
    v = rest.vertices
    nb = len(rotations)
    offset = np.zeros_like(v)
    for b in range(nb):
        wb = weights.weights[:, b]
        if not np.any(wb):
            continue
        offset += wb[:, None] * (v @ (rotations[b] - np.eye(3)).T + translations[b])
    return v + offset


def forward_kinematics(rest_heads: np.ndarray, rest_tails: np.ndarray, angles: np.ndarray,
                       axes: np.ndarray):
    """Posed heads/tails and per-bone rigid transforms for one frame.

    Joint b rotates bone b and everything after it about bone b's head.
    Returns (heads, tails, rotations, translations).
    """
    nb = len(rest_heads)
    heads, tails = np.zeros((nb, 3)), np.zeros((nb, 3))
    rots, trans = np.zeros((nb, 3, 3)), np.zeros((nb, 3))
    g = np.eye(3)
    head = rest_heads[0].copy()
    for b in range(nb):
        g = g @ axis_angle_matrix(axes[b], angles[b])
        heads[b] = head
        tails[b] = head + g @ (rest_tails[b] - rest_heads[b])
        rots[b] = g
        trans[b] = head - g @ rest_heads[b]
        head = tails[b]
    return heads, tails, rots, trans


def joint_angles(spec: RigSpec, tau: float, damping: float = 1.0) -> np.ndarray:
    amp, freq, ph, _ = spec.curves()
    return damping * amp * np.sin(2 * np.pi * freq * tau + ph)


def _self_intersects(heads, tails, radius) -> bool:
    """Bounding-sphere test between points on non-adjacent bones."""
    nb = len(heads)
    pts = []
    for b in range(nb):
        n = max(2, int(np.ceil(np.linalg.norm(tails[b] - heads[b]) / radius)) + 1)
        pts.append(heads[b] + np.linspace(0, 1, n)[:, None] * (tails[b] - heads[b]))
    for i in range(nb):
        for j in range(i + 2, nb):
            d = np.linalg.norm(pts[i][:, None] - pts[j][None], axis=-1)
            if d.min() < 2.2 * radius:
                return True
    return False


def animate(spec: RigSpec, total_frames: int, seed: int = 0, identifier: str = "",
            max_retries: int = 8) -> SynthSample:
    if total_frames < 2:
        raise ValidationError("need at least 2 frames")
    rest, rest_skel, weights = gen_chain_rig(spec, seed)
    b = spec.bone_count
    rh, rt = rest_skel.heads[0, :b], rest_skel.tails[0, :b]
    _, _, _, axes = spec.curves()
    damping = 1.0
    for attempt in range(max_retries + 1):
        frames, heads, tails = [], [], []
        clash = False
        for f in range(total_frames):
            tau = f / (total_frames - 1)
            h, t, r, tr = forward_kinematics(rh, rt, joint_angles(spec, tau, damping), axes)
            if _self_intersects(h, t, spec.radius):
                clash = True
                break
            frames.append(lbs_deform(rest, weights, r, tr))
            heads.append(h)
            tails.append(t)
        if not clash:
            break
        damping *= 0.7
        log.info("rig %s self-intersects; damping amplitudes to %.3f", identifier or seed, damping)
    else:
        raise ValidationError(f"rig {identifier or seed} still self-intersects after damping")
    seq = MeshSequence(rest.faces, np.stack(frames))
    skel = Skeleton.from_active(np.stack(heads), np.stack(tails))
    return SynthSample(seq, skel, weights, OrthoCamera(), identifier or f"rig{seed}",
                       np.arange(total_frames))


def feasible_strides(total_frames: int, T: int, strides=(1, 2, 3, 4)) -> list[int]:
    return [s for s in strides if (T - 1) * s + 1 <= total_frames]


def subsample_frames(sample: SynthSample, T: int, seed: int, strides=(1, 2, 3, 4)) -> SynthSample:
    """Evenly strided T-frame window; stride uniform over the feasible strides."""
    total = sample.sequence.T
    options = feasible_strides(total, T, strides)
    if not options:
        raise ValidationError(f"sequence of {total} frames too short for {T} frames at stride 1")
    rng = np.random.default_rng(seed)
    stride = int(options[rng.integers(len(options))])
    start = int(rng.integers(total - (T - 1) * stride))
    return select_frames(sample, start + stride * np.arange(T))


def select_frames(sample: SynthSample, idx) -> SynthSample:
    idx = np.asarray(idx)
    seq = MeshSequence(sample.sequence.faces, sample.sequence.frames[idx])
    base = sample.frame_indices if sample.frame_indices is not None else np.arange(sample.sequence.T)
    return replace(sample, sequence=seq, skeleton=sample.skeleton.frames(idx), frame_indices=base[idx])


def interpolate_deformation(field: DeformationField, factor: int) -> DeformationField:
    """Insert ``factor`` linearly interpolated frames between consecutive frames."""
    if factor < 0:
        raise ValidationError("factor must be >= 0")
    d = field.displacements
    if factor == 0 or len(d) < 2:
        return DeformationField(d.copy())
    out = []
    for t in range(len(d) - 1):
        for k in range(factor + 1):
            a = k / (factor + 1)
            out.append(d[t] if k == 0 else (1 - a) * d[t] + a * d[t + 1])
    out.append(d[-1])
    return DeformationField(np.stack(out))


def render_silhouette(mesh: TriMesh, camera: OrthoCamera, resolution: int) -> np.ndarray:
    """Binary (resolution, resolution) uint8 coverage mask; both facings count."""
    img = np.zeros((resolution, resolution), dtype=np.uint8)
    if mesh.n_faces == 0:
        return img
    px = camera.to_pixels(mesh.vertices[:, :2], resolution)
    tri = px[mesh.faces]  # (F, 3, 2)
    centers = np.arange(resolution) + 0.5
    for a, b, c in tri:
        lo = np.floor(np.minimum(np.minimum(a, b), c) - 0.5).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c) - 0.5).astype(int)
        c0, r0 = max(lo[0], 0), max(lo[1], 0)
        c1, r1 = min(hi[0], resolution - 1), min(hi[1], resolution - 1)
        if c0 > c1 or r0 > r1:
            continue
        xs, ys = np.meshgrid(centers[c0:c1 + 1], centers[r0:r1 + 1])
        den = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        if abs(den) < 1e-14:
            continue
        l0 = ((b[1] - c[1]) * (xs - c[0]) + (c[0] - b[0]) * (ys - c[1])) / den
        l1 = ((c[1] - a[1]) * (xs - c[0]) + (a[0] - c[0]) * (ys - c[1])) / den
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        img[r0:r1 + 1, c0:c1 + 1] |= inside.astype(np.uint8)
    return img


@dataclass(frozen=True)
class Benchmark:
    train: list[SynthSample]
    test: list[SynthSample]
    seeds: dict


TRAIN_SEED_BASE = 1000
TEST_SEED_BASE = 2000


def make_sample(seed: int, total_frames: int = 24, bone_range=(2, 5)) -> SynthSample:
    return animate(random_rig_spec(seed, bone_range), total_frames, seed, identifier=f"rig{seed}")


def make_benchmark(n_train: int = 64, n_test: int = 8, total_frames: int = 24) -> Benchmark:
    train_seeds = [TRAIN_SEED_BASE + i for i in range(n_train)]
    test_seeds = [TEST_SEED_BASE + i for i in range(n_test)]
    return Benchmark(
        [make_sample(s, total_frames) for s in train_seeds],
        [make_sample(s, total_frames) for s in test_seeds],
        {"train": train_seeds, "test": test_seeds, "total_frames": total_frames},
    )


def normalize_sample(sample: SynthSample) -> tuple[SynthSample, float, np.ndarray]:
    """Normalize by the frame-1 bounding box; skeleton follows the same map."""
    from .mesh_core import normalize_sequence

    seq, scale, center = normalize_sequence(sample.sequence)
    return replace(sample, sequence=seq, skeleton=sample.skeleton.transformed(scale, center)), scale, center


def training_window(sample: SynthSample, T: int, seed: int) -> SynthSample:
    """Random strided T-frame window, normalized so its first frame is canonical."""
    return normalize_sample(subsample_frames(sample, T, seed))[0]


def evaluation_window(sample: SynthSample, T: int, seed: int = 0) -> SynthSample:
    """Fixed held-out window: stride drawn once from ``seed``."""
    return training_window(sample, T, seed)
