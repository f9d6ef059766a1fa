"""Model and run configurations plus the key = value config-file reader."""
from __future__ import annotations

import ast
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ValidationError


@dataclass(frozen=True)
class VaeConfig:
    M: int = 2048  # surface samples
    N: int = 256  # compressed tokens
    c: int = 1024
    c_o: int = 64
    L_enc: int = 8
    L_dec: int = 16
    T: int = 6
    B_max: int = 64
    heads: int = 16
    tau_s: float = 0.05
    tau_b: float = 0.05
    lambda_kl: float = 5e-5
    num_freqs: int = 8
    loss_subset: int = 1024
    use_skeleton: bool = True
    use_temporal_global: bool = True
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 80
    lr_decay_steps: int = 0  # cosine decay to lr_floor * lr over this many steps; 0 keeps lr constant
    lr_floor: float = 0.01

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ValidationError(f"{f.name} must be non-negative")
        if self.N > self.M:
            raise ValidationError("N must not exceed M")
        if self.c % self.heads:
            raise ValidationError("c must be divisible by heads")
        if (self.c // self.heads) % 2:
            raise ValidationError("per-head width must be even for rotary encoding")
        if min(self.M, self.N, self.c, self.c_o, self.T, self.heads) < 1:
            raise ValidationError("sizes must be positive")

    @classmethod
    def toy(cls, **overrides) -> "VaeConfig":
        base = cls(M=256, N=32, c=64, c_o=8, T=4, L_enc=2, L_dec=4, heads=4, lr=1e-3,
                   batch_size=4)
        return replace(base, **overrides)

    @classmethod
    def gradcheck(cls, **overrides) -> "VaeConfig":
        base = cls(M=16, N=4, c=16, c_o=4, T=2, L_enc=1, L_dec=1, heads=2, B_max=8)
        return replace(base, **overrides)


@dataclass(frozen=True)
class FlowConfig:
    euler_steps: int = 50
    cfg_weight: float = 5.0
    cfg_enabled: bool = False
    condition_dropout_prob: float = 0.1
    c: int = 1024
    layers: int = 16
    heads: int = 16
    N_s: int = 256  # shape tokens
    c_s: int = 64
    frame_tokens: int = 64
    c_v: int = 9
    num_freqs: int = 8
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 80
    lr_decay_steps: int = 0
    lr_floor: float = 0.01

    def validate(self) -> None:
        if self.euler_steps < 1:
            raise ValidationError("euler_steps must be >= 1")
        if self.cfg_weight < 0:
            raise ValidationError("cfg_weight must be >= 0")
        if not 0.0 <= self.condition_dropout_prob <= 1.0:
            raise ValidationError("condition_dropout_prob must lie in [0, 1]")
        if self.c % self.heads or (self.c // self.heads) % 2:
            raise ValidationError("c must split into even-width heads")

    @classmethod
    def toy(cls, **overrides) -> "FlowConfig":
        base = cls(c=64, layers=4, heads=4, N_s=32, c_s=16, lr=1e-3, batch_size=8)
        return replace(base, **overrides)

    @classmethod
    def gradcheck(cls, **overrides) -> "FlowConfig":
        base = cls(c=16, layers=1, heads=2, N_s=4, c_s=4, frame_tokens=4)
        return replace(base, **overrides)


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_kv_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def write_kv_file(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v!r}\n" for k, v in values.items()))


def apply_overrides(cfg, values: dict):
    names = {f.name for f in fields(cfg)}
    unknown = set(values) - names
    if unknown:
        raise ValidationError(f"unknown config keys for {type(cfg).__name__}: {sorted(unknown)}")
    return replace(cfg, **values)


def to_json(cfg) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
