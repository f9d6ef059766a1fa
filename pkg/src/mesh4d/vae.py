"""Skeleton-guided spatio-temporal deformation VAE.

Encoder: point-pair embedding -> skinning-masked self-attention and bone
cross-attention -> FPS cross-attention compression -> spatio-temporal
blocks -> mean / log-variance heads. Decoder: latent projection ->
spatio-temporal blocks -> cross-attention from embedded canonical vertices
-> per-vertex displacement.

Tensors are batched: points (B, T, M, 3), tokens (B, T, N, c).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .config import VaeConfig
from .errors import ValidationError
from .mesh_core import (
    MeshSequence,
    farthest_point_sampling,
    sample_surface,
    transport_samples,
)
from .numeric.ops import (
    MLP,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    fourier_positional_embedding,
    kl_standard_normal,
    mask_bias,
    reparameterize,
)
from .skeleton import (
    Skeleton,
    SkinningWeights,
    interpolate_sample_weights,
    point_bone_mask,
    point_pair_mask,
    with_strongest_bone,
)


def with_own_seed(factory):
    """Build a module from a freshly drawn seed, advancing the global RNG by one draw only.

    Keeps the init of later modules independent of which optional parts earlier ones contain.
    """
    seed = int(torch.randint(0, 2**62, (1,)))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def pe_width(num_freqs: int) -> int:
    return 3 * (2 * num_freqs + 1)


@dataclass
class EncoderInput:
    """One batch of prepared sequences, all tensors."""

    positions: Tensor  # (B, T, M, 3)
    normals: Tensor  # (B, T, M, 3)
    fps_index: Tensor  # (B, N) long
    pair_allowed: Tensor  # (B, M, M) bool
    bone_allowed: Tensor  # (B, M, B_max) bool
    bone_heads: Tensor  # (B, T, B_max, 3)
    bone_tails: Tensor  # (B, T, B_max, 3)

    def to(self, dtype) -> "EncoderInput":
        return EncoderInput(
            self.positions.to(dtype), self.normals.to(dtype), self.fps_index,
            self.pair_allowed, self.bone_allowed, self.bone_heads.to(dtype), self.bone_tails.to(dtype),
        )


@dataclass
class PreparedSequence:
    """Numpy-side encoder inputs for one normalized sequence."""

    positions: np.ndarray
    normals: np.ndarray
    fps_index: np.ndarray
    pair_allowed: np.ndarray
    bone_allowed: np.ndarray
    bone_heads: np.ndarray
    bone_tails: np.ndarray
    fully_masked_bone_rows: int = 0

    @property
    def fps_positions(self) -> np.ndarray:
        return self.positions[0, self.fps_index]


def prepare_sequence(seq: MeshSequence, skeleton: Skeleton, vertex_weights: SkinningWeights,
                     cfg: VaeConfig, seed: int) -> PreparedSequence:
    """Sample, transport, build masks and pick FPS indices for one sequence."""
    if seq.T != cfg.T:
        raise ValidationError(f"sequence has {seq.T} frames, config expects {cfg.T}")
    if skeleton.T != seq.T:
        raise ValidationError("skeleton frame count differs from sequence")
    samples = transport_samples(sample_surface(seq.mesh(0), cfg.M, seed), seq)
    w = interpolate_sample_weights(vertex_weights, samples, seq.faces)
    w = SkinningWeights(w.weights[:, : cfg.B_max])
    pair = point_pair_mask(w, cfg.tau_s)
    bone = point_bone_mask(w, cfg.tau_b)
    bone = with_strongest_bone(bone, w)
    fps = farthest_point_sampling(samples.positions[0], cfg.N, 0)
    return PreparedSequence(
        samples.positions, samples.normals, fps, pair.allowed, bone.allowed,
        skeleton.heads[:, : cfg.B_max], skeleton.tails[:, : cfg.B_max], len(bone.fully_masked_rows),
    )


def collate(items: list[PreparedSequence], dtype=torch.float32) -> EncoderInput:
    def stack(name, dt=dtype):
        return torch.as_tensor(np.stack([getattr(i, name) for i in items]), dtype=dt)

    return EncoderInput(
        stack("positions"), stack("normals"), stack("fps_index", torch.long),
        stack("pair_allowed", torch.bool), stack("bone_allowed", torch.bool),
        stack("bone_heads"), stack("bone_tails"),
    )


class SkeletonInjection(nn.Module):
    """Skinning-masked self-attention then masked cross-attention to bone tokens, both residual."""

    def __init__(self, c: int, heads: int):
        super().__init__()
        self.norm_self = LayerNorm(c)
        self.self_attn = MultiHeadAttention(c, heads, zero_out=True)
        self.norm_query = LayerNorm(c)
        self.norm_bones = LayerNorm(c)
        self.bone_attn = MultiHeadAttention(c, heads, zero_out=True)

    def forward(self, h: Tensor, pair_bias: Tensor, bone_bias: Tensor, bone_feats: Tensor) -> Tensor:
        # h (B, T, M, c); biases broadcast over (B, T, heads, ...)
        h_hat = h + self.self_attn(self.norm_self(h), bias=pair_bias)
        return h_hat + self.bone_attn(self.norm_query(h_hat), self.norm_bones(bone_feats), bias=bone_bias)


class SpatioTemporalBlock(nn.Module):
    """Temporal -> global -> spatial self-attention, then MLP; pre-norm residuals.

    Temporal and global attention rotate queries/keys by frame index.
    """

    def __init__(self, c: int, heads: int, temporal_global: bool = True, zero_out: bool = True):
        super().__init__()
        self.temporal_global = temporal_global
        # optional parts are built last so ablated variants share the init of everything else
        self.norm_s = LayerNorm(c)
        self.spatial = MultiHeadAttention(c, heads, zero_out=zero_out)
        self.norm_m = LayerNorm(c)
        self.mlp = MLP(c, zero_out=zero_out)
        if temporal_global:
            self.norm_t = LayerNorm(c)
            self.temporal = MultiHeadAttention(c, heads, zero_out=zero_out)
            self.norm_g = LayerNorm(c)
            self.global_ = MultiHeadAttention(c, heads, zero_out=zero_out)

    def forward(self, x: Tensor, frame_pos: Tensor | None = None) -> Tensor:
        *lead, T, N, c = x.shape
        if frame_pos is None:
            frame_pos = torch.arange(T, dtype=x.dtype)
        if self.temporal_global:
            y = self.norm_t(x).transpose(-2, -3)  # (..., N, T, c)
            x = x + self.temporal(y, q_pos=frame_pos, k_pos=frame_pos).transpose(-2, -3)
            flat_pos = frame_pos.repeat_interleave(N)
            y = self.norm_g(x).reshape(*lead, T * N, c)
            x = x + self.global_(y, q_pos=flat_pos, k_pos=flat_pos).reshape(x.shape)
        x = x + self.spatial(self.norm_s(x))
        return x + self.mlp(self.norm_m(x))


class DeformationEncoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        pe = pe_width(cfg.num_freqs)
        self.point_embed = Linear(2 * (pe + 3), cfg.c)
        self.fps_norm = LayerNorm(cfg.c)
        self.fps_attn = MultiHeadAttention(cfg.c, cfg.heads)
        self.blocks = nn.ModuleList(
            with_own_seed(lambda: SpatioTemporalBlock(cfg.c, cfg.heads, cfg.use_temporal_global))
            for _ in range(cfg.L_enc)
        )
        self.norm_out = LayerNorm(cfg.c)
        self.mean_head = Linear(cfg.c, cfg.c_o)
        self.logvar_head = Linear(cfg.c, cfg.c_o)
        if cfg.use_skeleton:
            self.bone_embed = Linear(4 * pe, cfg.c)
            self.inject = SkeletonInjection(cfg.c, cfg.heads)

    def embed_point_pairs(self, positions: Tensor, normals: Tensor) -> Tensor:
        """(..., T, M, 3) -> (..., T, M, c); frame 0 is paired with every frame."""
        nf = self.cfg.num_freqs
        first = torch.cat([fourier_positional_embedding(positions[..., :1, :, :], nf), normals[..., :1, :, :]], -1)
        cur = torch.cat([fourier_positional_embedding(positions, nf), normals], -1)
        return self.point_embed(torch.cat([first.expand_as(cur), cur], -1))

    def embed_bones(self, heads: Tensor, tails: Tensor) -> Tensor:
        """(..., T, B_max, 3) head/tail -> (..., T, B_max, c), order tail_1, head_1, tail_t, head_t."""
        nf = self.cfg.num_freqs

        def pe(x):
            return fourier_positional_embedding(x, nf)

        first = torch.cat([pe(tails[..., :1, :, :]), pe(heads[..., :1, :, :])], -1)
        cur = torch.cat([pe(tails), pe(heads)], -1)
        return self.bone_embed(torch.cat([first.expand_as(cur), cur], -1))

    def fps_compress(self, h: Tensor, fps_index: Tensor) -> Tensor:
        """Cross-attention from the FPS-selected rows to all rows, per frame, no residual."""
        hn = self.fps_norm(h)
        idx = fps_index[:, None, :, None].expand(-1, h.shape[1], -1, h.shape[-1])
        queries = torch.gather(hn, 2, idx)
        return self.fps_attn(queries, hn)

    def forward(self, inp: EncoderInput) -> tuple[Tensor, Tensor]:
        dtype = self.point_embed.weight.dtype
        h = self.embed_point_pairs(inp.positions, inp.normals)
        if self.cfg.use_skeleton:
            bones = self.embed_bones(inp.bone_heads, inp.bone_tails)
            pair_bias = mask_bias(inp.pair_allowed, dtype)[:, None, None]
            bone_bias = mask_bias(inp.bone_allowed, dtype)[:, None, None]
            h = self.inject(h, pair_bias, bone_bias, bones)
        x = self.fps_compress(h, inp.fps_index)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm_out(x)
        return self.mean_head(x), self.logvar_head(x)


class DeformationDecoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.latent_in = Linear(cfg.c_o, cfg.c)
        self.blocks = nn.ModuleList(
            with_own_seed(lambda: SpatioTemporalBlock(cfg.c, cfg.heads, cfg.use_temporal_global))
            for _ in range(cfg.L_dec)
        )
        self.norm_tokens = LayerNorm(cfg.c)
        self.query_embed = Linear(pe_width(cfg.num_freqs), cfg.c)
        self.norm_query = LayerNorm(cfg.c)
        self.cross = MultiHeadAttention(cfg.c, cfg.heads)
        self.norm_mlp = LayerNorm(cfg.c)
        self.mlp = MLP(cfg.c)
        self.norm_out = LayerNorm(cfg.c)
        self.head = Linear(cfg.c, 3, zero=True)

    def tokens(self, z: Tensor) -> Tensor:
        x = self.latent_in(z)
        for blk in self.blocks:
            x = blk(x)
        return self.norm_tokens(x)

    def forward(self, z: Tensor, queries: Tensor) -> Tensor:
        """z (B, T, N, c_o), canonical query vertices (B, Q, 3) -> displacements (B, T, Q, 3)."""
        kv = self.tokens(z)
        q = self.query_embed(fourier_positional_embedding(queries, self.cfg.num_freqs))
        q = q[:, None].expand(-1, z.shape[1], -1, -1)
        y = q + self.cross(self.norm_query(q), kv)
        y = y + self.mlp(self.norm_mlp(y))
        return self.head(self.norm_out(y))


@dataclass
class DeformationLatent:
    mean: np.ndarray  # (T, N, c_o)
    log_variance: np.ndarray
    sample: np.ndarray
    fps_positions: np.ndarray  # (N, 3)


class DeformationVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = with_own_seed(lambda: DeformationEncoder(cfg))
        self.decoder = with_own_seed(lambda: DeformationDecoder(cfg))

    def encode(self, inp: EncoderInput, generator: torch.Generator | None = None, seed: int = 0):
        mean, logvar = self.encoder(inp)
        return mean, logvar, reparameterize(mean, logvar, seed, generator)

    def decode(self, z: Tensor, queries: Tensor) -> Tensor:
        return self.decoder(z, queries)

    @torch.no_grad()
    def encode_sequence(self, seq: MeshSequence, skeleton: Skeleton, weights: SkinningWeights,
                        seed: int) -> DeformationLatent:
        prep = prepare_sequence(seq, skeleton, weights, self.cfg, seed)
        dtype = self.decoder.head.weight.dtype
        mean, logvar, sample = self.encode(collate([prep], dtype), seed=seed)
        return DeformationLatent(mean[0].numpy(), logvar[0].numpy(), sample[0].numpy(), prep.fps_positions)

    @torch.no_grad()
    def decode_field(self, latent: np.ndarray, query_vertices: np.ndarray) -> np.ndarray:
        """(T, N, c_o) latent + (Q, 3) canonical vertices -> (T, Q, 3) displacements."""
        dtype = self.decoder.head.weight.dtype
        z = torch.as_tensor(latent, dtype=dtype)[None]
        q = torch.as_tensor(query_vertices, dtype=dtype)[None]
        return self.decode(z, q)[0].double().numpy()


def vae_loss(pred: Tensor, target: Tensor, mean: Tensor, log_variance: Tensor,
             lambda_kl: float) -> tuple[Tensor, Tensor, Tensor]:
    """Sum over frames of the per-vertex mean squared displacement error, plus weighted KL.

    ``pred``/``target`` are (B, T, S, 3) over the sampled vertex subset; the
    reconstruction term is averaged over the batch. Returns (loss, recon, kl).
    """
    sq = ((target - pred) ** 2).sum(-1)  # (B, T, S)
    recon = sq.mean(-1).sum(-1).mean()
    kl = kl_standard_normal(mean, log_variance)
    return recon + lambda_kl * kl, recon, kl


def zero_output_projections(module: nn.Module) -> None:
    """Zero every attention output projection and MLP second layer inside ``module``."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, MultiHeadAttention):
                m.out.weight.zero_()
                m.out.bias.zero_()
            elif isinstance(m, MLP):
                m.fc2.weight.zero_()
                m.fc2.bias.zero_()


def randomize_(module: nn.Module, seed: int, scale: float = 0.3) -> None:
    """Overwrite every parameter with seeded noise (gradient-check helper)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(module.named_parameters()):
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
