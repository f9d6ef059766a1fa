"""Geometry and tracking metrics: volumetric IoU, P2S, Chamfer, l2-Corr, and CPD alignment."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .errors import NumericError, ValidationError
from .mesh_core import MeshSequence, TriMesh, is_watertight, sample_surface

log = logging.getLogger(__name__)

PADDING = 0.05
HIT_EPS = 1e-12
JITTER = 1e-6


# ---------------------------------------------------------------- occupancy / IoU

@dataclass(frozen=True)
class OccupancyGrid:
    resolution: int
    origin: np.ndarray  # lower corner of the grid
    cell: np.ndarray  # (3,) cell size per axis
    bits: np.ndarray  # (R, R, R) bool indexed [ix, iy, iz]
    method: str = "parity"

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.resolution) + 0.5) * self.cell[axis]


def padded_bounds(*meshes: TriMesh, padding: float = PADDING) -> tuple[np.ndarray, np.ndarray]:
    pts = np.concatenate([m.vertices for m in meshes if m.n_vertices])
    lo, hi = pts.min(0), pts.max(0)
    pad = padding * np.maximum(hi - lo, 1e-9)
    return lo - pad, hi + pad


def _ray_hits(mesh: TriMesh, ys: np.ndarray, zs: np.ndarray):
    """Intersections of +x rays through every (y, z) pair with all triangles.

    Returns (ray index, hit x, ambiguous flag) arrays; ray index = iy * len(zs) + iz.
    """
    tri = mesh.vertices[mesh.faces]
    ray_ids, xs_hit, ambiguous = [], [], []
    dy, dz = ys[1] - ys[0] if len(ys) > 1 else 1.0, zs[1] - zs[0] if len(zs) > 1 else 1.0
    for a, b, c in tri:
        ylo, yhi = min(a[1], b[1], c[1]), max(a[1], b[1], c[1])
        zlo, zhi = min(a[2], b[2], c[2]), max(a[2], b[2], c[2])
        iy = np.nonzero((ys >= ylo - 1e-9 * dy) & (ys <= yhi + 1e-9 * dy))[0]
        iz = np.nonzero((zs >= zlo - 1e-9 * dz) & (zs <= zhi + 1e-9 * dz))[0]
        if not len(iy) or not len(iz):
            continue
        py, pz = np.meshgrid(ys[iy], zs[iz], indexing="ij")
        den = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2])
        if abs(den) < 1e-18:
            continue  # triangle parallel to the ray
        l1 = ((py - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (pz - a[2])) / den
        l2 = ((b[1] - a[1]) * (pz - a[2]) - (py - a[1]) * (b[2] - a[2])) / den
        l0 = 1.0 - l1 - l2
        lmin = np.minimum(np.minimum(l0, l1), l2)
        inside = lmin >= -HIT_EPS
        if not inside.any():
            continue
        x = l0 * a[0] + l1 * b[0] + l2 * c[0]
        rid = (iy[:, None] * len(zs) + iz[None, :])
        ray_ids.append(rid[inside])
        xs_hit.append(x[inside])
        ambiguous.append(lmin[inside] <= HIT_EPS)
    if not ray_ids:
        return np.zeros(0, int), np.zeros(0), np.zeros(0, bool)
    return np.concatenate(ray_ids), np.concatenate(xs_hit), np.concatenate(ambiguous)


def _parity_column(mesh: TriMesh, y: float, z: float, xs: np.ndarray) -> np.ndarray:
    hits_r, hits_x, amb = _ray_hits(mesh, np.array([y]), np.array([z]))
    if amb.any():
        return None
    return (np.searchsorted(np.sort(hits_x), xs, side="right") - len(hits_x)) % 2 == 1


def _parity_occupancy(mesh: TriMesh, xs, ys, zs) -> np.ndarray:
    R = len(xs)
    rays, hx, amb = _ray_hits(mesh, ys, zs)
    toggles = np.zeros((len(ys) * len(zs), R + 1), dtype=np.int64)
    k = np.searchsorted(xs, hx, side="left")  # cells with centre < hit
    np.add.at(toggles, (rays, np.zeros_like(k)), 1)
    np.add.at(toggles, (rays, k), -1)
    occ = (np.cumsum(toggles, axis=1)[:, :R] % 2 == 1)
    scale = max(np.ptp(ys) if len(ys) > 1 else 1.0, np.ptp(zs) if len(zs) > 1 else 1.0, 1e-9)
    for r in np.unique(rays[amb]):
        iy, iz = divmod(int(r), len(zs))
        # Exact edge/vertex hit: recast this ray slightly off the lattice.
        for attempt in range(1, 6):
            col = _parity_column(mesh, ys[iy] + JITTER * scale * 0.7071 * attempt,
                                 zs[iz] + JITTER * scale * 0.5377 * attempt, xs)
            if col is not None:
                occ[r] = col
                break
    return occ.reshape(len(ys), len(zs), R).transpose(2, 0, 1)


def winding_number(mesh: TriMesh, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Generalized winding number (solid-angle sum / 4 pi) of ``points``."""
    tri = mesh.vertices[mesh.faces]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, None, :]
        d = tri[None] - p  # (K, F, 3, 3)
        a, b, c = d[..., 0, :], d[..., 1, :], d[..., 2, :]
        la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (a, b, c))
        num = np.einsum("kfi,kfi->kf", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("kfi,kfi->kf", a, b) * lc
               + np.einsum("kfi,kfi->kf", b, c) * la + np.einsum("kfi,kfi->kf", c, a) * lb)
        out[s:s + chunk] = 2.0 * np.arctan2(num, den).sum(-1) / (4 * np.pi)
    return out


def occupancy(mesh: TriMesh, resolution: int, bounds, method: str | None = None) -> OccupancyGrid:
    """Cell-centre inside test on an R^3 grid spanning ``bounds`` = (lo, hi).

    Watertight meshes use +x ray parity; others fall back to winding number >= 0.5.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(hi <= lo):
        raise ValidationError("occupancy bounds must be finite with hi > lo")
    if resolution < 1:
        raise ValidationError("resolution must be positive")
    cell = (hi - lo) / resolution
    xs, ys, zs = (lo[i] + (np.arange(resolution) + 0.5) * cell[i] for i in range(3))
    if mesh.n_faces == 0:
        return OccupancyGrid(resolution, lo, cell, np.zeros((resolution,) * 3, bool), "empty")
    if method is None:
        method = "parity" if is_watertight(mesh.faces) else "winding"
        if method == "winding":
            log.warning("mesh is not watertight; using winding-number occupancy")
    if method == "parity":
        bits = _parity_occupancy(mesh, xs, ys, zs)
    elif method == "winding":
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), -1).reshape(-1, 3)
        bits = (winding_number(mesh, grid) >= 0.5).reshape((resolution,) * 3)
    else:
        raise ValidationError(f"unknown occupancy method {method!r}")
    return OccupancyGrid(resolution, lo, cell, bits, method)


def volumetric_iou(a: TriMesh, b: TriMesh, resolution: int = 64) -> float:
    if a.n_faces == 0 and b.n_faces == 0:
        log.warning("both meshes empty; IoU defined as 1")
        return 1.0
    bounds = padded_bounds(*(m for m in (a, b) if m.n_vertices))
    oa, ob = occupancy(a, resolution, bounds).bits, occupancy(b, resolution, bounds).bits
    union = np.logical_or(oa, ob).sum()
    if union == 0:
        log.warning("both occupancies empty; IoU defined as 1")
        return 1.0
    return float(np.logical_and(oa, ob).sum() / union)


# ---------------------------------------------------------------- distances

def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Region-based closest point; all arguments (K, 3), paired row-wise."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = (ab * ap).sum(-1), (ac * ap).sum(-1)
    bp = p - b
    d3, d4 = (ab * bp).sum(-1), (ac * bp).sum(-1)
    cp = p - c
    d5, d6 = (ab * cp).sum(-1), (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v_face, w_face = vb * denom, vc * denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    out = a + ab * v_face[:, None] + ac * w_face[:, None]
    cases = [
        ((d1 <= 0) & (d2 <= 0), a),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[:, None]),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[:, None]),
        ((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + (c - b) * t_bc[:, None]),
    ]
    done = np.zeros(len(p), bool)
    for cond, val in cases:
        sel = cond & ~done
        out[sel] = val[sel]
        done |= sel
    return out


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    return np.linalg.norm(p - closest_point_on_triangles(p, a, b, c), axis=-1)


def point_mesh_distance(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Exact distance from each point to the closest triangle.

    Candidate triangles are pruned with a KD-tree over centroids: a triangle
    whose centroid is farther than (nearest-vertex distance + its own radius)
    cannot be closest, so the result equals the brute-force minimum.
    """
    points = np.asarray(points, dtype=np.float64)
    tri = mesh.vertices[mesh.faces]
    cent = tri.mean(1)
    radius = np.linalg.norm(tri - cent[:, None], axis=-1).max(1)
    upper, _ = cKDTree(mesh.vertices).query(points)
    rmax = radius.max()
    cand = cKDTree(cent).query_ball_point(points, upper + rmax + 1e-12)
    lens = np.fromiter((len(c) for c in cand), int, len(cand))
    pi = np.repeat(np.arange(len(points)), lens)
    fi = np.concatenate([np.asarray(c, int) for c in cand]) if len(pi) else np.zeros(0, int)
    d = point_triangle_distance(points[pi], tri[fi, 0], tri[fi, 1], tri[fi, 2])
    best = np.minimum(upper, np.inf)
    np.minimum.at(best, pi, d)
    return best


def p2s(points: np.ndarray, mesh: TriMesh) -> float:
    if len(points) < 1:
        raise ValidationError("p2s needs at least one point")
    return float(point_mesh_distance(points, mesh).mean())


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|), unsquared."""
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("chamfer needs non-empty clouds")
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return float(0.5 * (dab.mean() + dba.mean()))


def chamfer_brute(a: np.ndarray, b: np.ndarray) -> float:
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return float(0.5 * (d.min(1).mean() + d.min(0).mean()))


def l2_corr(pred: MeshSequence, gt: MeshSequence) -> tuple[float, np.ndarray]:
    """Frame-1 nearest-neighbour matching gt -> pred, then per-frame mean distance.

    Returns (mean over frames t >= 2, per-frame values); entry 0 is the
    matching residual.
    """
    if pred.n_vertices == 0 or gt.n_vertices == 0:
        raise ValidationError("l2_corr needs non-empty meshes")
    if pred.T != gt.T:
        raise ValidationError(f"frame counts differ: {pred.T} vs {gt.T}")
    _, match = cKDTree(pred.frames[0]).query(gt.frames[0])
    per = np.linalg.norm(pred.frames[:, match] - gt.frames, axis=-1).mean(1)
    agg = float(per[1:].mean()) if gt.T > 1 else float(per[0])
    return agg, per


# ---------------------------------------------------------------- CPD

@dataclass(frozen=True)
class AlignmentTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "AlignmentTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def validate(self) -> None:
        r = self.rotation
        if self.scale <= 0:
            raise ValidationError("alignment scale must be positive")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-8 or abs(np.linalg.det(r) - 1) > 1e-8:
            raise ValidationError("alignment rotation is not a proper rotation")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}


@dataclass
class CpdResult:
    transform: AlignmentTransform
    sigma2: float
    nll: list[float] = field(default_factory=list)
    iterations: int = 0
    collapsed: bool = False


def _check_rank(x: np.ndarray, name: str) -> None:
    s = np.linalg.svd(x - x.mean(0), compute_uv=False)
    if len(x) < 3 or s[-1] <= 1e-9 * max(s[0], 1e-300):
        raise ValidationError(f"{name} point set is degenerate (rank < 3)")


def cpd_rigid(source: np.ndarray, target: np.ndarray, outlier_weight: float = 0.0,
              max_iter: int = 100, tol: float = 1e-8) -> CpdResult:
    """Rigid+scale Coherent Point Drift moving ``source`` (GMM centroids) onto ``target``."""
    Y = np.asarray(source, dtype=np.float64)
    X = np.asarray(target, dtype=np.float64)
    if len(Y) < 3 or len(X) < 3:
        raise ValidationError("cpd needs at least 3 points on each side")
    _check_rank(Y, "source")
    _check_rank(X, "target")
    if not 0.0 <= outlier_weight < 1.0:
        raise ValidationError("outlier weight must lie in [0, 1)")
    N, M, D = len(X), len(Y), 3
    R, s, t = np.eye(3), 1.0, np.zeros(3)
    sigma2 = float(((X[:, None] - Y[None]) ** 2).sum() / (D * M * N))
    w = outlier_weight
    res = CpdResult(AlignmentTransform.identity(), sigma2)

    def log_terms(sig2):
        TY = s * Y @ R.T + t
        d2 = ((X[:, None] - TY[None]) ** 2).sum(-1)  # (N, M)
        log_gauss = -d2 / (2 * sig2) - 0.5 * D * np.log(2 * np.pi * sig2) + np.log((1 - w) / M)
        if w > 0:
            log_out = np.full((N, 1), np.log(w / N))
            return log_gauss, logsumexp(np.concatenate([log_gauss, log_out], 1), axis=1)
        return log_gauss, logsumexp(log_gauss, axis=1)

    for it in range(max_iter):
        log_gauss, log_norm = log_terms(sigma2)
        P = np.exp(log_gauss - log_norm[:, None]).T  # (M, N)
        Np = P.sum()
        mu_x = X.T @ P.sum(0) / Np
        mu_y = Y.T @ P.sum(1) / Np
        Xh, Yh = X - mu_x, Y - mu_y
        A = Xh.T @ P.T @ Yh
        U, _, Vt = np.linalg.svd(A)
        C = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
        R = U @ C @ Vt
        tr_ar = np.trace(A.T @ R)
        s = tr_ar / ((Yh ** 2).sum(1) @ P.sum(1))
        t = mu_x - s * R @ mu_y
        new_sigma2 = ((Xh ** 2).sum(1) @ P.sum(0) - s * tr_ar) / (Np * D)
        res.iterations = it + 1
        if new_sigma2 < 1e-12:
            log.warning("cpd: sigma^2 collapsed below 1e-12 at iteration %d; stopping", it + 1)
            res.collapsed = True
            sigma2 = max(new_sigma2, 0.0)
            break
        delta = abs(new_sigma2 - sigma2)
        sigma2 = new_sigma2
        res.nll.append(float(-log_terms(sigma2)[1].sum()))
        if delta < tol:
            break
    if not np.all(np.isfinite(R)) or not np.isfinite(s):
        raise NumericError("cpd produced a non-finite transform")
    res.transform = AlignmentTransform(float(s), R, t)
    res.sigma2 = float(sigma2)
    return res


def rotation_angle_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# ---------------------------------------------------------------- sequences

@dataclass(frozen=True)
class EvalConfig:
    grid: int = 64
    points: int = 10000
    align: bool = True
    outlier_weight: float = 0.0
    max_cpd_points: int = 2000
    seed: int = 0


@dataclass
class ReconMetrics:
    iou: float
    p2s: float
    chamfer: float
    l2_corr: float
    per_frame: dict
    alignment: dict
    grid_resolution: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def evaluate_sequence(pred: MeshSequence, gt: MeshSequence, cfg: EvalConfig = EvalConfig()) -> ReconMetrics:
    """Align pred frame 1 to gt frame 1 (CPD), apply to all frames, then per-frame metrics."""
    if pred.T != gt.T:
        raise ValidationError(f"frame counts differ: {pred.T} vs {gt.T}")
    transform = AlignmentTransform.identity()
    if cfg.align:
        rng = np.random.default_rng(cfg.seed)

        def cloud(v):
            return v if len(v) <= cfg.max_cpd_points else v[np.sort(rng.choice(len(v), cfg.max_cpd_points, False))]

        transform = cpd_rigid(cloud(pred.frames[0]), cloud(gt.frames[0]), cfg.outlier_weight).transform
    aligned = MeshSequence(pred.faces, transform.apply(pred.frames))
    ious, p2ss, chams = [], [], []
    for t in range(gt.T):
        gm, pm = gt.mesh(t), aligned.mesh(t)
        ious.append(volumetric_iou(gm, pm, cfg.grid))
        gpts = sample_surface(gm, cfg.points, cfg.seed).positions[0]
        ppts = sample_surface(pm, cfg.points, cfg.seed).positions[0]
        p2ss.append(p2s(gpts, pm))
        chams.append(chamfer(ppts, gpts))
    corr, per_corr = l2_corr(aligned, gt)
    return ReconMetrics(
        float(np.mean(ious)), float(np.mean(p2ss)), float(np.mean(chams)), corr,
        {"iou": ious, "p2s": p2ss, "chamfer": chams, "l2_corr": per_corr.tolist()},
        transform.to_dict(), cfg.grid,
    )
