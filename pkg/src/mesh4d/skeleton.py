"""Skeletons, skinning weights and the skinning-derived attention masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .mesh_core import MeshSequence, SurfaceSampleSet

B_MAX = 64
MASKED = np.finfo(np.float64).min  # additive stand-in for -inf


@dataclass(frozen=True)
class Skeleton:
    heads: np.ndarray  # (T, B_max, 3)
    tails: np.ndarray  # (T, B_max, 3)
    active_bones: int

    @property
    def T(self) -> int:
        return self.heads.shape[0]

    @property
    def b_max(self) -> int:
        return self.heads.shape[1]

    @classmethod
    def from_active(cls, heads, tails, b_max: int = B_MAX) -> "Skeleton":
        """Pad (T, B, 3) head/tail arrays with zero rows up to ``b_max``."""
        heads, tails = np.asarray(heads, float), np.asarray(tails, float)
        t, b, _ = heads.shape
        if b > b_max:
            raise ValidationError(f"{b} bones exceed B_max={b_max}")
        ph, pt = np.zeros((t, b_max, 3)), np.zeros((t, b_max, 3))
        ph[:, :b], pt[:, :b] = heads, tails
        return cls(ph, pt, b)

    def frames(self, idx) -> "Skeleton":
        return Skeleton(self.heads[idx], self.tails[idx], self.active_bones)

    def transformed(self, scale: float, center) -> "Skeleton":
        """Apply the ``(x - center) * scale`` map of ``normalize_sequence`` to active rows."""
        b = self.active_bones
        heads, tails = self.heads.copy(), self.tails.copy()
        heads[:, :b] = (heads[:, :b] - center) * scale
        tails[:, :b] = (tails[:, :b] - center) * scale
        return Skeleton(heads, tails, b)

    def validate(self) -> None:
        b = self.active_bones
        if not 1 <= b <= self.b_max:
            raise ValidationError("active bone count out of range")
        if np.any(self.heads[:, b:]) or np.any(self.tails[:, b:]):
            raise ValidationError("inactive bone rows must be zero")
        if not (np.all(np.isfinite(self.heads)) and np.all(np.isfinite(self.tails))):
            raise ValidationError("non-finite bone coordinates")
        lengths = np.linalg.norm(self.tails[:, :b] - self.heads[:, :b], axis=-1)
        if lengths.min() <= 1e-9:
            raise ValidationError("zero-length active bone")


@dataclass(frozen=True)
class SkinningWeights:
    weights: np.ndarray  # (M, B_max)

    def validate(self, active_bones: int | None = None, atol: float = 1e-4) -> None:
        w = self.weights
        if np.any(w < 0) or np.any(w > 1 + 1e-9) or not np.all(np.isfinite(w)):
            raise ValidationError("skinning weights must lie in [0, 1]")
        if active_bones is not None and np.any(w[:, active_bones:]):
            raise ValidationError("inactive bone columns must be zero")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > atol):
            raise ValidationError("skinning weight rows must sum to 1")


@dataclass(frozen=True)
class AttentionMask:
    values: np.ndarray  # entries are 0.0 or MASKED
    fully_masked_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def allowed(self) -> np.ndarray:
        return self.values == 0.0


def _mask_from(allowed: np.ndarray) -> AttentionMask:
    values = np.where(allowed, 0.0, MASKED)
    rows = np.flatnonzero(~allowed.any(axis=1))
    return AttentionMask(values, rows)


def interpolate_sample_weights(vertex_weights: SkinningWeights, samples: SurfaceSampleSet,
                               faces: np.ndarray) -> SkinningWeights:
    w, b = vertex_weights.weights, samples.barycentric
    tri = np.asarray(faces)[samples.face_index]
    rows = b[:, 0:1] * w[tri[:, 0]] + b[:, 1:2] * w[tri[:, 1]] + b[:, 2:3] * w[tri[:, 2]]
    total = rows.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise ValidationError("sample lies on a face with no skinning influence")
    return SkinningWeights(rows / total)


def point_pair_mask(w: SkinningWeights, tau_s: float = 0.05) -> AttentionMask:
    """Unmask pair (i, j) iff the skinning similarity w_i . w_j exceeds ``tau_s``."""
    sim = w.weights @ w.weights.T
    return _mask_from(sim > tau_s)


def point_bone_mask(w: SkinningWeights, tau_b: float = 0.05) -> AttentionMask:
    """Unmask (point, bone) iff the bone's weight on the point exceeds ``tau_b``.

    Rows with no bone above threshold are left fully masked and listed in
    ``fully_masked_rows``; see :func:`with_strongest_bone`.
    """
    return _mask_from(w.weights > tau_b)


def with_strongest_bone(mask: AttentionMask, w: SkinningWeights) -> AttentionMask:
    """Unmask the argmax-weight bone on every fully-masked row."""
    if len(mask.fully_masked_rows) == 0:
        return mask
    allowed = mask.allowed.copy()
    rows = mask.fully_masked_rows
    allowed[rows, np.argmax(w.weights[rows], axis=1)] = True
    return AttentionMask(np.where(allowed, 0.0, MASKED), mask.fully_masked_rows)


def skeleton_for_sequence(skel: Skeleton, seq: MeshSequence) -> None:
    if skel.T != seq.T:
        raise ValidationError(f"skeleton has {skel.T} frames, sequence has {seq.T}")
