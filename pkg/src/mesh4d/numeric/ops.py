"""Differentiable building blocks on torch tensors.

Everything works in whatever floating dtype the inputs carry; the
gradient checks run the same code in float64.
"""
from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from ..errors import ValidationError

LN_EPS = 1e-5
ROPE_BASE = 10000.0
EXP_FLOOR = -80.0  # exp stays a normal float32 above this


def neg_sentinel(dtype: torch.dtype) -> float:
    return torch.finfo(dtype).min


def mask_bias(allowed: Tensor, dtype: torch.dtype) -> Tensor:
    """Boolean ``allowed`` -> additive bias of 0 / most-negative-finite."""
    zero = torch.zeros((), dtype=dtype)
    return torch.where(allowed, zero, torch.tensor(neg_sentinel(dtype), dtype=dtype))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis; ``weight`` is (d_in, d_out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValidationError(f"linear: trailing extent {x.shape[-1]} != d_in {weight.shape[0]}")
    y = x @ weight
    return y if bias is None else y + bias


def fourier_positional_embedding(coords: Tensor, num_freqs: int = 8) -> Tensor:
    """``coords`` (..., D) -> (..., D * (2 * num_freqs + 1)).

    Layout: raw coordinates, then sin of every (frequency, axis), then cos,
    frequencies 2^k * pi for k < num_freqs.
    """
    freqs = (2.0 ** torch.arange(num_freqs, dtype=coords.dtype)) * math.pi
    angles = (coords[..., None, :] * freqs[:, None]).flatten(-2)
    return torch.cat([coords, torch.sin(angles), torch.cos(angles)], dim=-1)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def rope_temporal(x: Tensor, positions: Tensor, base: float = ROPE_BASE) -> Tensor:
    """Rotate channel pairs (2k, 2k+1) by ``positions * base**(-2k/c)``.

    ``positions`` must broadcast against ``x.shape[:-1]``, e.g. shape (T, 1)
    for tokens laid out (T, N, c).
    """
    c = x.shape[-1]
    if c % 2:
        raise ValidationError("rope needs an even channel count")
    inv = base ** (-torch.arange(0, c, 2, dtype=x.dtype) / c)
    ang = positions.to(x.dtype)[..., None] * inv
    cos, sin = torch.cos(ang), torch.sin(ang)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], dim=-1)
    return out.flatten(-2)


def masked_softmax_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v over the last two axes.

    A row whose bias is entirely the sentinel collapses to equal logits and
    so to the uniform average of ``v``.
    """
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if bias is None:
        z = logits - logits.amax(dim=-1, keepdim=True).detach()
        w = torch.exp(z.clamp_min(EXP_FLOOR))
        return (w / w.sum(dim=-1, keepdim=True)) @ v
    # Sentinel entries get weight exactly 0 by multiplication rather than by
    # exp of a huge negative number (that path is very slow on CPU).
    keep = (bias > 0.5 * neg_sentinel(bias.dtype)).to(logits.dtype)
    logits = logits + bias * keep
    empty = (keep.sum(dim=-1, keepdim=True) == 0).to(logits.dtype)
    shift = (logits + (keep - 1.0 + empty) * 1e4).amax(dim=-1, keepdim=True).detach()
    w = torch.exp((logits - shift).clamp(EXP_FLOOR, 0.0)) * keep
    w = w + empty  # fully masked rows -> uniform
    return (w / w.sum(dim=-1, keepdim=True)) @ v


def fused_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same contract as :func:`masked_softmax_attention` via torch's fused kernel.

    With a 0 / sentinel bias the two agree: adding the sentinel swamps the
    logit entirely, so a fully masked row again sees equal logits.
    """
    if bias is not None:
        bias = bias.to(q.dtype)
        live = (bias > 0.5 * neg_sentinel(q.dtype)).any(dim=-1, keepdim=True)
        if not bool(live.all()):
            # Fully masked rows: zero logits (uniform weights) and no gradient into q.
            bias = bias * live
            q = q * live.to(q.dtype)
    return nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=bias)


def fully_masked_rows(bias: Tensor) -> Tensor:
    return ~(bias == 0).any(dim=-1)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero: bool = False, gain: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        if zero:
            nn.init.zeros_(self.weight)
        else:
            nn.init.normal_(self.weight, std=gain / math.sqrt(d_in))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, affine: bool = True):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim)) if affine else None
        self.bias = nn.Parameter(torch.zeros(dim)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(nn.Module):
    """Linear -> SiLU -> Linear, hidden width ``ratio * dim``; residual left to the caller."""

    def __init__(self, dim: int, ratio: int = 4, zero_out: bool = False):
        super().__init__()
        self.fc1 = Linear(dim, ratio * dim)
        self.fc2 = Linear(ratio * dim, dim, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(nn.functional.silu(self.fc1(x)))


def mlp_block(x: Tensor, params: MLP) -> Tensor:
    return params(x)


class MultiHeadAttention(nn.Module):
    """Multi-head attention with learned projections and an additive mask.

    ``bias`` broadcasts against (..., heads, S_q, S_k). ``q_pos``/``k_pos``
    switch on rotary encoding of queries and keys (per head).
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, zero_out: bool = False):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = Linear(dim, dim, bias=False)
        self.k = Linear(kv_dim, dim, bias=False)
        self.v = Linear(kv_dim, dim, bias=False)
        self.out = Linear(dim, dim, zero=zero_out)
        self.last_fully_masked = 0
        self.fused = True

    def _split(self, x: Tensor) -> Tensor:
        *lead, s, c = x.shape
        return x.reshape(*lead, s, self.heads, c // self.heads).transpose(-2, -3)

    def forward(self, x: Tensor, context: Tensor | None = None, bias: Tensor | None = None,
                q_pos: Tensor | None = None, k_pos: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        if torch.isnan(x).any() or torch.isnan(context).any():
            raise ValidationError("NaN in attention input")
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        if q_pos is not None:
            q = rope_temporal(q, q_pos)
        if k_pos is not None:
            k = rope_temporal(k, k_pos)
        if bias is not None:
            self.last_fully_masked = int(fully_masked_rows(bias).sum())
        y = (fused_attention if self.fused else masked_softmax_attention)(q, k, v, bias)
        y = y.transpose(-2, -3).flatten(-2)
        return self.out(y)


def masked_multihead_attention(queries: Tensor, keys: Tensor, values: Tensor,
                               mask: Tensor | None, heads: int) -> Tensor:
    """Projection-free multi-head attention over (S, c) arrays.

    Channels are split into ``heads`` groups; ``mask`` is an additive
    (S_q, S_k) bias shared by all heads.
    """
    c = queries.shape[-1]
    if c % heads:
        raise ValidationError(f"width {c} not divisible by {heads} heads")

    def split(x):
        return x.reshape(*x.shape[:-1], heads, c // heads).transpose(-2, -3)

    y = masked_softmax_attention(split(queries), split(keys), split(values), mask)
    return y.transpose(-2, -3).flatten(-2)


def reparameterize(mean: Tensor, log_variance: Tensor, noise_seed: int | None = None,
                   generator: torch.Generator | None = None) -> Tensor:
    if generator is None:
        generator = torch.Generator().manual_seed(int(noise_seed or 0))
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * log_variance) * eps


def kl_standard_normal(mean: Tensor, log_variance: Tensor) -> Tensor:
    """Mean over entries of KL(N(mean, exp(lv)) || N(0, 1))."""
    # expm1(lv) >= lv holds after rounding, so the result is never negative
    return 0.5 * (torch.expm1(log_variance) - log_variance + mean * mean).mean()
