"""Reverse-mode gradients and the central-difference checker.

Recording is delegated to torch autograd; :class:`Tape` only enforces the
single-use contract and returns zero gradients for untouched parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
from torch import Tensor


class TapeConsumedError(RuntimeError):
    pass


class Tape:
    def __init__(self, params: Mapping[str, Tensor]):
        self.params = dict(params)
        self._consumed = False

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        if self._consumed:
            raise TapeConsumedError("backward already ran on this tape")
        self._consumed = True
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        return {
            n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, tensors, grads)
        }


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return Tape(params).backward(loss)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, b: float) -> float:
    # below 1e-6 the central difference of an O(1) objective is mostly float64 roundoff,
    # so tiny gradients are compared on an absolute scale
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def finite_difference_check(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                            epsilon: float = 1e-5, max_entries_per_param: int | None = 6,
                            seed: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``f``.

    ``f`` re-runs the forward pass from the current parameter values and
    returns a scalar. Parameters must be float64 leaves with requires_grad.
    Up to ``max_entries_per_param`` randomly chosen entries per tensor are
    perturbed (all entries when None).
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"{name}: gradient checks need float64, got {p.dtype}")
    analytic = backward(f(), params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0)
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            if max_entries_per_param is None or n <= max_entries_per_param:
                idx = np.arange(n)
            else:
                idx = rng.choice(n, size=max_entries_per_param, replace=False)
            g = analytic[name].reshape(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = f().item()
                flat[i] = orig - epsilon
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                worst = max(worst, relative_error(g[i].item(), numeric))
            report.per_param[name] = worst
            report.checked_entries += len(idx)
            report.max_rel_error = max(report.max_rel_error, worst)
    return report
