"""Flow-matching generator over deformation latents.

The velocity model sees the noisy latent (T, N, c_o), the timestep, and a
condition bundle: canonical-shape tokens, per-frame silhouette features and
the frame-1 positions of the N FPS points (spatial embedding).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .config import FlowConfig, VaeConfig
from .errors import NumericError, ValidationError
from .mesh_core import MeshSequence, TriMesh, farthest_point_sampling, sample_surface
from .numeric.autodiff import Tape
from .numeric.checkpoint import load_checkpoint, load_into_module, module_arrays, save_checkpoint
from .numeric.ops import MLP, LayerNorm, Linear, MultiHeadAttention, fourier_positional_embedding
from .numeric.optim import ParameterSet, adamw_step, cosine_lr
from .synth import OrthoCamera, SynthSample, render_silhouette, training_window
from .vae import DeformationVAE, collate, pe_width, prepare_sequence

log = logging.getLogger(__name__)

POOL = 8  # occupancy grid side; frame tokens = POOL**2
SHAPE_PROJECTION_SEED = 7919
FEATURE_RESOLUTION = 64


# ---------------------------------------------------------------- conditions

@dataclass
class ConditionBundle:
    shape_tokens: np.ndarray  # (N_s, c_s)
    frame_features: np.ndarray  # (T, F, c_v)
    spatial_embedding: np.ndarray  # (N, 3)
    frame_indices: np.ndarray  # (T,)

    @property
    def T(self) -> int:
        return len(self.frame_features)

    def validate(self, T: int | None = None) -> None:
        if len(self.frame_indices) != self.T:
            raise ValidationError("frame_indices length differs from frame_features")
        if T is not None and self.T != T:
            raise ValidationError(f"condition has {self.T} frames, latent has {T}")
        if self.spatial_embedding.ndim != 2 or self.spatial_embedding.shape[1] != 3:
            raise ValidationError("spatial_embedding must be (N, 3)")
        for name in ("shape_tokens", "frame_features", "spatial_embedding"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite values in {name}")


def silhouette_features(image: np.ndarray) -> tuple[np.ndarray, bool]:
    """Binary image -> (POOL**2, 9) tokens [occupancy, u, v, area, cx, cy, mu20, mu02, mu11].

    Coordinates are in [0, 1] image units (u along columns, v along rows).
    Returns the tokens and whether the silhouette was empty.
    """
    img = (np.asarray(image) > 0).astype(np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1] or img.shape[0] < POOL:
        raise ValidationError(f"silhouette must be square and at least {POOL} px")
    res = img.shape[0]
    cell = (np.arange(res) * POOL) // res
    occ = np.zeros((POOL, POOL))
    np.add.at(occ, (cell[:, None], cell[None, :]), img)
    counts = np.bincount(cell, minlength=POOL).astype(float)
    occ /= counts[:, None] * counts[None, :]
    centers = (np.arange(POOL) + 0.5) / POOL
    vv, uu = np.meshgrid(centers, centers, indexing="ij")
    area = img.mean()
    if area == 0:
        return np.zeros((POOL * POOL, 9)), True
    rows, cols = np.nonzero(img)
    u = (cols + 0.5) / res
    v = (rows + 0.5) / res
    cx, cy = u.mean(), v.mean()
    moments = np.array([area, cx, cy, ((u - cx) ** 2).mean(), ((v - cy) ** 2).mean(),
                        ((u - cx) * (v - cy)).mean()])
    tokens = np.concatenate([occ.reshape(-1, 1), uu.reshape(-1, 1), vv.reshape(-1, 1),
                             np.broadcast_to(moments, (POOL * POOL, 6))], axis=1)
    return tokens, False


def synth_frame_features(seq: MeshSequence, camera: OrthoCamera = OrthoCamera(),
                         resolution: int = FEATURE_RESOLUTION) -> np.ndarray:
    """Render each frame's silhouette and featurize it: (T, POOL**2, 9)."""
    return features_from_images([render_silhouette(seq.mesh(t), camera, resolution) for t in range(seq.T)])


def features_from_images(images: Sequence[np.ndarray]) -> np.ndarray:
    out = []
    for t, img in enumerate(images):
        feats, empty = silhouette_features(img)
        if empty:
            log.warning("frame %d: empty silhouette, using zero features", t)
        out.append(feats)
    return np.stack(out)


def shape_tokens(points: np.ndarray, c_s: int, num_freqs: int) -> np.ndarray:
    """Fixed seeded projection of PE(points): a frozen stand-in for a shape encoder."""
    pe = fourier_positional_embedding(torch.as_tensor(points, dtype=torch.float64), num_freqs).numpy()
    w = np.random.default_rng(SHAPE_PROJECTION_SEED).standard_normal((pe.shape[1], c_s))
    return pe @ w / np.sqrt(pe.shape[1])


def build_condition(canonical: TriMesh, frames, vcfg: VaeConfig, fcfg: FlowConfig, seed: int,
                    fps_positions: np.ndarray | None = None,
                    frame_indices: np.ndarray | None = None) -> ConditionBundle:
    """Condition bundle for a (normalized) canonical mesh.

    ``frames`` is either a list of binary silhouettes or a ready (T, F, c_v)
    feature array. ``fps_positions`` (training) replaces the inference-time
    FPS over fresh surface samples; both use the same sampling seed, so they
    agree when the canonical mesh is the training frame-1 mesh.
    """
    if frames is None or len(frames) == 0:
        raise ValidationError("condition frames are missing")
    canonical.validate()
    if isinstance(frames, np.ndarray) and frames.ndim == 3 and frames.shape[-1] == fcfg.c_v \
            and frames.shape[1] == fcfg.frame_tokens:
        feats = frames.astype(np.float64)
    else:
        feats = features_from_images(frames)
    if feats.shape[1:] != (fcfg.frame_tokens, fcfg.c_v):
        raise ValidationError(f"frame features {feats.shape[1:]} != ({fcfg.frame_tokens}, {fcfg.c_v})")
    if fps_positions is None:
        pts = sample_surface(canonical, vcfg.M, seed).positions[0]
        fps_positions = pts[farthest_point_sampling(pts, vcfg.N, 0)]
    second = sample_surface(canonical, vcfg.M, seed + 1).positions[0]
    shape_pts = second[farthest_point_sampling(second, fcfg.N_s, 0)]
    idx = np.arange(len(feats)) if frame_indices is None else np.asarray(frame_indices)
    bundle = ConditionBundle(shape_tokens(shape_pts, fcfg.c_s, fcfg.num_freqs), feats,
                             np.asarray(fps_positions, dtype=np.float64), idx)
    bundle.validate()
    return bundle


@dataclass
class ConditionBatch:
    shape: Tensor  # (B, N_s, c_s)
    frames: Tensor  # (B, T, F, c_v)
    spatial: Tensor  # (B, N, 3)

    @classmethod
    def stack(cls, bundles: Sequence[ConditionBundle], dtype=torch.float32) -> "ConditionBatch":
        def s(name):
            return torch.as_tensor(np.stack([getattr(b, name) for b in bundles]), dtype=dtype)

        return cls(s("shape_tokens"), s("frame_features"), s("spatial_embedding"))

    def index(self, ids) -> "ConditionBatch":
        return ConditionBatch(self.shape[ids], self.frames[ids], self.spatial[ids])


# ---------------------------------------------------------------- flow math

def make_flow_sample(z, noise, t):
    """(z_t, v) with z_t = t z + (1 - t) noise and v = z - noise.

    ``t`` is a scalar or broadcasts against ``z`` from the left (one value per
    batch element).
    """
    if z.shape != noise.shape:
        raise ValidationError(f"latent {tuple(z.shape)} and noise {tuple(noise.shape)} differ")
    tt = t if np.isscalar(t) else t.reshape(t.shape + (1,) * (z.ndim - t.ndim))
    lo, hi = (float(t), float(t)) if np.isscalar(t) else (float(t.min()), float(t.max()))
    if lo < 0.0 or hi > 1.0:
        raise ValidationError("flow time must lie in [0, 1]")
    return tt * z + (1 - tt) * noise, z - noise


def cfg_velocity(v_cond, v_uncond, w: float):
    return v_uncond + w * (v_cond - v_uncond)


def euler_integrate(velocity: Callable, z0, steps: int):
    """First-order Euler from t=0 to t=1 with uniform steps; ``velocity(z, t)``."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    z, dt = z0, 1.0 / steps
    for k in range(steps):
        z = z + dt * velocity(z, k * dt)
    return z


# ---------------------------------------------------------------- model

class FlowBlock(nn.Module):
    """Spatial self-attention, temporal attention (RoPE), shape and frame cross-attention, MLP.

    Every pre-norm is modulated by the timestep embedding (adaptive norm).
    Attention/MLP submodule names match the VAE block so its weights can
    seed this one.
    """

    N_NORMS = 5

    def __init__(self, c: int, heads: int, zero_out: bool = True):
        super().__init__()
        self.norm_s = LayerNorm(c)
        self.spatial = MultiHeadAttention(c, heads, zero_out=zero_out)
        self.norm_t = LayerNorm(c)
        self.temporal = MultiHeadAttention(c, heads, zero_out=zero_out)
        self.norm_shape = LayerNorm(c)
        self.shape_attn = MultiHeadAttention(c, heads, zero_out=True)
        self.norm_frame = LayerNorm(c)
        self.frame_attn = MultiHeadAttention(c, heads, zero_out=True)
        self.norm_m = LayerNorm(c)
        self.mlp = MLP(c, zero_out=zero_out)
        self.ada = Linear(c, 2 * self.N_NORMS * c, zero=True)

    def forward(self, x: Tensor, temb: Tensor, shape_ctx: Tensor, frame_ctx: Tensor) -> Tensor:
        B, T, N, c = x.shape
        mods = self.ada(nn.functional.silu(temb)).reshape(B, 1, 1, self.N_NORMS, 2, c)

        def norm(layer, h, i):
            return layer(h) * (1 + mods[..., i, 0, :]) + mods[..., i, 1, :]

        pos = torch.arange(T, dtype=x.dtype)
        x = x + self.spatial(norm(self.norm_s, x, 0))
        y = norm(self.norm_t, x, 1).transpose(1, 2)  # (B, N, T, c)
        x = x + self.temporal(y, q_pos=pos, k_pos=pos).transpose(1, 2)
        x = x + self.shape_attn(norm(self.norm_shape, x, 2), shape_ctx)
        x = x + self.frame_attn(norm(self.norm_frame, x, 3), frame_ctx)
        return x + self.mlp(norm(self.norm_m, x, 4))


class VelocityModel(nn.Module):
    def __init__(self, fcfg: FlowConfig, vcfg: VaeConfig):
        super().__init__()
        fcfg.validate()
        self.fcfg, self.vcfg = fcfg, vcfg
        c = fcfg.c
        self.latent_in = Linear(vcfg.c_o, c)
        self.spatial_embed = Linear(pe_width(fcfg.num_freqs), c, zero=True)
        self.time_in = Linear(2 * fcfg.num_freqs + 1, c)
        self.time_out = Linear(c, c)
        self.shape_in = Linear(fcfg.c_s, c)
        self.frame_in = Linear(fcfg.c_v, c)
        self.null_shape = nn.Parameter(torch.zeros(fcfg.N_s, c))
        self.null_frame = nn.Parameter(torch.zeros(fcfg.frame_tokens, c))
        self.blocks = nn.ModuleList(FlowBlock(c, fcfg.heads) for _ in range(fcfg.layers))
        self.norm_out = LayerNorm(c)
        self.head = Linear(c, vcfg.c_o, zero=True)

    def time_embedding(self, t: Tensor) -> Tensor:
        pe = fourier_positional_embedding(t[:, None], self.fcfg.num_freqs)
        return self.time_out(nn.functional.silu(self.time_in(pe)))

    def forward(self, z_t: Tensor, t: Tensor, cond: ConditionBatch, drop: Tensor | None = None) -> Tensor:
        """z_t (B, T, N, c_o), t (B,) -> velocity (B, T, N, c_o).

        ``drop`` (B,) bool swaps the shape and frame conditions for the
        learned null tokens; the spatial embedding is always kept.
        """
        B, T, N, _ = z_t.shape
        if cond.frames.shape[1] != T:
            raise ValidationError(f"condition has {cond.frames.shape[1]} frames, latent has {T}")
        if cond.spatial.shape[1] != N:
            raise ValidationError(f"spatial embedding has {cond.spatial.shape[1]} rows, latent has {N}")
        x = self.latent_in(z_t)
        x = x + self.spatial_embed(fourier_positional_embedding(cond.spatial, self.fcfg.num_freqs))[:, None]
        temb = self.time_embedding(t)
        shape_ctx = self.shape_in(cond.shape)
        frame_ctx = self.frame_in(cond.frames)
        if drop is not None:
            d = drop.to(x.dtype)
            shape_ctx = shape_ctx * (1 - d[:, None, None]) + self.null_shape * d[:, None, None]
            frame_ctx = frame_ctx * (1 - d[:, None, None, None]) + self.null_frame * d[:, None, None, None]
        shape_ctx = shape_ctx[:, None].expand(-1, T, -1, -1)
        for blk in self.blocks:
            x = blk(x, temb, shape_ctx, frame_ctx)
        return self.head(self.norm_out(x))


SHARED_BLOCK_PARTS = ("norm_s", "spatial", "norm_t", "temporal", "norm_m", "mlp")


@torch.no_grad()
def init_from_vae(model: VelocityModel, vae: DeformationVAE) -> list[str]:
    """Copy the latent projection and the attention/MLP weights shared with the VAE decoder.

    The residual output projections are zeroed again afterwards, so the copied blocks start as
    the identity like a fresh model does while keeping the decoder's query/key/value and hidden
    MLP features.
    """
    if model.fcfg.c != vae.cfg.c:
        raise ValidationError(f"flow width {model.fcfg.c} != VAE width {vae.cfg.c}")
    copied = []
    model.latent_in.load_state_dict(vae.decoder.latent_in.state_dict())
    copied.append("latent_in")
    for i, (dst, src) in enumerate(zip(model.blocks, vae.decoder.blocks)):
        for part in SHARED_BLOCK_PARTS:
            getattr(dst, part).load_state_dict(getattr(src, part).state_dict())
            copied.append(f"blocks.{i}.{part}")
        with torch.no_grad():
            for out in (dst.spatial.out, dst.temporal.out, dst.mlp.fc2):
                out.weight.zero_()
                out.bias.zero_()
    return copied


# ---------------------------------------------------------------- training

def flow_loss(model: VelocityModel, z: Tensor, noise: Tensor, t: Tensor, cond: ConditionBatch,
              drop: Tensor | None = None) -> Tensor:
    z_t, target = make_flow_sample(z, noise, t)
    return ((model(z_t, t, cond, drop) - target) ** 2).mean()


@dataclass
class FlowDataset:
    """Encoded training windows: scaled posterior samples plus their conditions."""

    latents: Tensor  # (K, T, N, c_o), already multiplied by latent_scale
    cond: ConditionBatch
    latent_scale: float
    identifiers: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.latents)


def encode_windows(vae: DeformationVAE, samples: Sequence[SynthSample], fcfg: FlowConfig,
                   windows_per_sample: int, seed: int,
                   resolution: int = FEATURE_RESOLUTION) -> tuple[list[np.ndarray], list[ConditionBundle], list[str]]:
    vcfg = vae.cfg
    dtype = vae.decoder.head.weight.dtype
    latents, bundles, ids = [], [], []
    for si, sample in enumerate(samples):
        for k in range(windows_per_sample):
            rng = np.random.default_rng([seed, si, k])
            window = training_window(sample, vcfg.T, int(rng.integers(2**31)))
            pseed = int(rng.integers(2**31))
            prep = prepare_sequence(window.sequence, window.skeleton, window.weights, vcfg, pseed)
            with torch.no_grad():
                # the decoder is trained on posterior samples, so the flow targets them too
                _, _, z = vae.encode(collate([prep], dtype), seed=pseed)
            feats = synth_frame_features(window.sequence, window.camera, resolution)
            bundles.append(build_condition(window.sequence.mesh(0), feats, vcfg, fcfg, pseed,
                                           fps_positions=prep.fps_positions))
            latents.append(z[0].double().numpy())
            ids.append(f"{sample.identifier}#{k}")
    return latents, bundles, ids


def make_flow_dataset(vae: DeformationVAE, samples: Sequence[SynthSample], fcfg: FlowConfig,
                      windows_per_sample: int = 4, seed: int = 0, dtype=torch.float32) -> FlowDataset:
    """Encode windows with the frozen VAE; scale latents to unit standard deviation."""
    latents, bundles, ids = encode_windows(vae, samples, fcfg, windows_per_sample, seed)
    stacked = np.stack(latents)
    scale = float(1.0 / max(stacked.std(), 1e-8))
    return FlowDataset(torch.as_tensor(stacked * scale, dtype=dtype), ConditionBatch.stack(bundles, dtype),
                       scale, ids)


@dataclass
class FlowState:
    model: VelocityModel
    params: ParameterSet
    latent_scale: float = 1.0
    pretrained_init: bool = False
    log: list[dict] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.params.step


def new_flow_state(fcfg: FlowConfig, vcfg: VaeConfig, seed: int, vae: DeformationVAE | None = None,
                   latent_scale: float = 1.0, dtype=torch.float32) -> FlowState:
    torch.manual_seed(seed)
    model = VelocityModel(fcfg, vcfg).to(dtype)
    if vae is not None:
        init_from_vae(model, vae)
    return FlowState(model, ParameterSet.from_module(model), latent_scale, vae is not None)


def flow_batch(data: FlowDataset, fcfg: FlowConfig, rng: np.random.Generator):
    ids = rng.integers(len(data), size=fcfg.batch_size)
    z = data.latents[ids]
    dtype = z.dtype
    noise = torch.as_tensor(rng.standard_normal(z.shape), dtype=dtype)
    t = torch.as_tensor(rng.uniform(0.0, 1.0, size=len(ids)), dtype=dtype)
    drop = torch.as_tensor(rng.uniform(size=len(ids)) < fcfg.condition_dropout_prob)
    return ids, z, noise, t, drop


def train_flow(data: FlowDataset, fcfg: FlowConfig, steps: int, seed: int, state: FlowState,
               log_file=None, callback: Callable[[dict], None] | None = None) -> FlowState:
    model, params = state.model, state.params
    fh = open(log_file, "a") if log_file else None
    try:
        for _ in range(steps):
            step = params.step
            rng = np.random.default_rng([seed, step])
            ids, z, noise, t, drop = flow_batch(data, fcfg, rng)
            tape = Tape(params.params)
            loss = flow_loss(model, z, noise, t, data.cond.index(ids), drop)
            if not torch.isfinite(loss):
                names = [data.identifiers[i] for i in ids] if data.identifiers else ids.tolist()
                raise NumericError(f"non-finite flow loss at step {step}, batch {names}")
            lr = cosine_lr(fcfg.lr, step, fcfg.lr_decay_steps, fcfg.lr_floor)
            adamw_step(params, tape.backward(loss), lr=lr, weight_decay=fcfg.weight_decay)
            entry = {"step": step, "loss": loss.item()}
            state.log.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
            if callback:
                callback(entry)
    finally:
        if fh:
            fh.close()
    return state


@torch.no_grad()
def evaluate_flow_loss(model: VelocityModel, data: FlowDataset, seed: int = 0, draws: int = 4,
                       batch: int = 64) -> float:
    """Flow loss over every dataset item with fixed noise, t on an even grid, and no dropout."""
    rng = np.random.default_rng(seed)
    dtype = data.latents.dtype
    total, count = 0.0, 0
    for d in range(draws):
        for lo in range(0, len(data), batch):
            ids = np.arange(lo, min(lo + batch, len(data)))
            z = data.latents[ids]
            noise = torch.as_tensor(rng.standard_normal(z.shape), dtype=dtype)
            t = torch.as_tensor((np.arange(len(ids)) + (d + 0.5) / draws) / len(ids), dtype=dtype)
            total += flow_loss(model, z, noise, t, data.cond.index(ids)).item() * len(ids)
            count += len(ids)
    return total / count


# ---------------------------------------------------------------- sampling

@torch.no_grad()
def euler_sample(model: VelocityModel, cond: ConditionBundle, fcfg: FlowConfig, seed: int,
                 steps: int | None = None, cfg_weight: float | None = None) -> np.ndarray:
    """Integrate the learned velocity from seeded noise; returns the (T, N, c_o) latent (model scale).

    Guidance is used when ``cfg_weight`` is given, or when the config enables it.
    """
    steps = fcfg.euler_steps if steps is None else steps
    if cfg_weight is None and fcfg.cfg_enabled:
        cfg_weight = fcfg.cfg_weight
    if cfg_weight is not None and cfg_weight < 0:
        raise ValidationError("cfg weight must be >= 0")
    vcfg = model.vcfg
    cond.validate()
    dtype = model.head.weight.dtype
    batch = ConditionBatch.stack([cond], dtype)
    shape = (1, cond.T, len(cond.spatial_embedding), vcfg.c_o)
    eps = torch.as_tensor(np.random.default_rng(seed).standard_normal(shape), dtype=dtype)
    keep, dropped = torch.zeros(1, dtype=torch.bool), torch.ones(1, dtype=torch.bool)

    def velocity(z, t):
        tt = torch.full((1,), t, dtype=dtype)
        v = model(z, tt, batch, keep)
        if cfg_weight is not None:
            v = cfg_velocity(v, model(z, tt, batch, dropped), cfg_weight)
        return v

    z = euler_integrate(velocity, eps, steps)
    if not torch.isfinite(z).all():
        raise NumericError("non-finite latent after Euler integration")
    return z[0].double().numpy()


def sample_sequence(vae: DeformationVAE, state: FlowState, canonical: TriMesh, frames, fcfg: FlowConfig,
                    seed: int, steps: int | None = None, cfg_weight: float | None = None) -> MeshSequence:
    """Canonical mesh (normalized coordinates) + frame conditions -> deformed sequence."""
    cond = build_condition(canonical, frames, vae.cfg, fcfg, seed)
    if cond.T != vae.cfg.T:
        raise ValidationError(f"got {cond.T} condition frames, model expects {vae.cfg.T}")
    z = euler_sample(state.model, cond, fcfg, seed, steps, cfg_weight) / state.latent_scale
    disp = vae.decode_field(z, canonical.vertices)
    disp[0] = 0.0  # frame 1 is the canonical frame by definition
    return MeshSequence(canonical.faces, canonical.vertices[None] + disp)


def save_flow(path, state: FlowState, fcfg: FlowConfig, vcfg: VaeConfig, extra: dict | None = None) -> None:
    arrays = module_arrays(state.model)
    arrays.update({k: v.detach().numpy() for k, v in state.params.state_tensors().items()})
    meta = {"kind": "flow", "flow_config": asdict(fcfg), "vae_config": asdict(vcfg), "step": state.step,
            "latent_scale": state.latent_scale, "pretrained_init": state.pretrained_init, **(extra or {})}
    save_checkpoint(path, arrays, meta)


def load_flow(path, dtype=torch.float32) -> tuple[FlowState, FlowConfig, VaeConfig, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise ValidationError(f"{path} is not a flow checkpoint")
    fcfg, vcfg = FlowConfig(**meta["flow_config"]), VaeConfig(**meta["vae_config"])
    model = VelocityModel(fcfg, vcfg).to(dtype)
    load_into_module(model, arrays)
    params = ParameterSet.from_module(model)
    if any(k.startswith("adam.") for k in arrays):
        params.load_state_tensors({k: torch.as_tensor(v) for k, v in arrays.items()}, meta.get("step", 0))
    state = FlowState(model, params, meta["latent_scale"], meta.get("pretrained_init", False))
    return state, fcfg, vcfg, meta
