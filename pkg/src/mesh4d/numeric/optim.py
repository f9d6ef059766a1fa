"""Named parameter sets and a decoupled-weight-decay Adam optimizer."""
from __future__ import annotations

import math
from typing import Mapping

import torch
from torch import Tensor, nn


class ParameterSet:
    """Named tensors plus per-parameter first/second moments."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.params = dict(params)
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step = 0

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterSet":
        return cls(dict(module.named_parameters()))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {}
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: Mapping[str, Tensor], step: int) -> None:
        for n in self.params:
            self.m[n] = torch.as_tensor(tensors[f"adam.m.{n}"]).to(self.params[n].dtype).clone()
            self.v[n] = torch.as_tensor(tensors[f"adam.v.{n}"]).to(self.params[n].dtype).clone()
        self.step = step


def cosine_lr(base: float, step: int, decay_steps: int, floor: float = 0.01) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``decay_steps``; constant if 0."""
    if decay_steps <= 0:
        return base
    frac = min(step, decay_steps) / decay_steps
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@torch.no_grad()
def adamw_step(params: ParameterSet, grads: Mapping[str, Tensor], lr: float = 1e-5,
               weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
               step: int | None = None, eps: float = 1e-8) -> ParameterSet:
    """One AdamW update in place; ``step`` defaults to ``params.step + 1``."""
    step = params.step + 1 if step is None else step
    b1, b2 = betas
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    for name, p in params.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m = params.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
        v = params.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    params.step = step
    return params
