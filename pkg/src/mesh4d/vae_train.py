"""Training loop and reconstruction evaluation for the deformation VAE."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import VaeConfig
from .errors import NumericError
from .numeric.autodiff import Tape
from .numeric.checkpoint import load_checkpoint, load_into_module, module_arrays, save_checkpoint
from .numeric.optim import ParameterSet, adamw_step, cosine_lr
from .synth import SynthSample, training_window
from .vae import DeformationVAE, collate, prepare_sequence, vae_loss

log = logging.getLogger(__name__)


def set_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainState:
    model: DeformationVAE
    params: ParameterSet
    log: list[dict] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.params.step


def new_state(cfg: VaeConfig, seed: int, dtype=torch.float32) -> TrainState:
    torch.manual_seed(seed)
    model = DeformationVAE(cfg).to(dtype)
    return TrainState(model, ParameterSet.from_module(model))


def make_batch(dataset: Sequence[SynthSample], cfg: VaeConfig, rng: np.random.Generator, dtype):
    """Draw windows, prepare encoder inputs and the vertex-subset targets."""
    ids = rng.integers(len(dataset), size=cfg.batch_size)
    windows = [training_window(dataset[i], cfg.T, int(rng.integers(2**31))) for i in ids]
    prepared = [prepare_sequence(w.sequence, w.skeleton, w.weights, cfg, int(rng.integers(2**31)))
                for w in windows]
    s = min(cfg.loss_subset, min(w.sequence.n_vertices for w in windows))
    queries, targets = [], []
    for w in windows:
        sub = rng.choice(w.sequence.n_vertices, size=s, replace=False)
        frames = w.sequence.frames[:, sub]
        queries.append(frames[0])
        targets.append(frames - frames[0])
    batch_ids = [dataset[i].identifier for i in ids]
    return (collate(prepared, dtype), torch.as_tensor(np.stack(queries), dtype=dtype),
            torch.as_tensor(np.stack(targets), dtype=dtype), batch_ids)


def train_vae(dataset: Sequence[SynthSample], cfg: VaeConfig, steps: int, seed: int,
              state: TrainState | None = None, log_file=None,
              callback: Callable[[dict], None] | None = None) -> TrainState:
    """Run ``steps`` AdamW steps; continues from ``state`` (and its step counter) if given."""
    state = state or new_state(cfg, seed)
    model, params = state.model, state.params
    dtype = model.decoder.head.weight.dtype
    fh = open(log_file, "a") if log_file else None
    try:
        for _ in range(steps):
            step = params.step
            rng = np.random.default_rng([seed, step])
            inp, queries, targets, batch_ids = make_batch(dataset, cfg, rng, dtype)
            gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
            tape = Tape(params.params)
            mean, logvar, z = model.encode(inp, generator=gen)
            pred = model.decode(z, queries)
            loss, recon, kl = vae_loss(pred, targets, mean, logvar, cfg.lambda_kl)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite VAE loss at step {step}, batch {batch_ids}")
            grads = tape.backward(loss)
            lr = cosine_lr(cfg.lr, step, cfg.lr_decay_steps, cfg.lr_floor)
            adamw_step(params, grads, lr=lr, weight_decay=cfg.weight_decay)
            entry = {"step": step, "loss": loss.item(), "recon": recon.item(), "kl": kl.item()}
            state.log.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
            if callback:
                callback(entry)
    finally:
        if fh:
            fh.close()
    return state


def save_state(path, state: TrainState, cfg: VaeConfig, extra: dict | None = None) -> None:
    arrays = module_arrays(state.model)
    arrays.update({k: v.detach().numpy() for k, v in state.params.state_tensors().items()})
    meta = {"kind": "vae", "config": asdict(cfg), "step": state.step, **(extra or {})}
    save_checkpoint(path, arrays, meta)


def load_state(path, dtype=torch.float32) -> tuple[TrainState, VaeConfig, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = VaeConfig(**meta["config"])
    model = DeformationVAE(cfg).to(dtype)
    load_into_module(model, arrays)
    params = ParameterSet.from_module(model)
    if any(k.startswith("adam.") for k in arrays):
        params.load_state_tensors({k: torch.as_tensor(v) for k, v in arrays.items()}, meta.get("step", 0))
    return TrainState(model, params), cfg, meta


@torch.no_grad()
def reconstruction_error(model: DeformationVAE, window: SynthSample, seed: int = 0,
                         use_mean: bool = False) -> dict:
    """Encode a normalized window and decode all its vertices.

    Decodes the seeded posterior sample by default (``use_mean`` decodes the
    mean instead). Returns the mean per-vertex Euclidean error over all
    frames, in object units and as a fraction of the frame-1 bounding-box
    diagonal.
    """
    cfg = model.cfg
    dtype = model.decoder.head.weight.dtype
    seq = window.sequence
    prep = prepare_sequence(seq, window.skeleton, window.weights, cfg, seed)
    mean, _, z = model.encode(collate([prep], dtype), seed=seed)
    latent = mean if use_mean else z
    pred = model.decode(latent, torch.as_tensor(seq.frames[0][None], dtype=dtype))[0].double().numpy()
    target = seq.frames - seq.frames[0]
    err = np.linalg.norm(pred - target, axis=-1)
    diag = float(np.linalg.norm(seq.frames[0].max(0) - seq.frames[0].min(0)))
    return {"mean_error": float(err.mean()), "diag": diag, "relative": float(err.mean() / diag),
            "per_frame": err.mean(axis=1).tolist(), "frame0_deviation": float(np.abs(pred[0]).max())}


def write_log(path, entries) -> None:
    Path(path).write_text("".join(json.dumps(e) + "\n" for e in entries))
