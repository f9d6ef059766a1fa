"""Shared drivers for the toy-benchmark ablations and the end-to-end sampler check.

Used by the acceptance tests and by the scripts in ``scripts/``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .config import FlowConfig, VaeConfig
from .flow import (FlowState, make_flow_dataset, new_flow_state, sample_sequence, synth_frame_features,
                   train_flow)
from .mesh_core import MeshSequence
from .metrics import l2_corr
from .synth import Benchmark, SynthSample, evaluation_window
from .vae import DeformationVAE
from .vae_train import reconstruction_error, train_vae

VARIANTS = ("full", "no_skeleton", "no_temporal_global")


def variant_config(base: VaeConfig, name: str) -> VaeConfig:
    if name == "full":
        return base
    if name == "no_skeleton":
        return replace(base, use_skeleton=False)
    if name == "no_temporal_global":
        return replace(base, use_temporal_global=False)
    raise ValueError(f"unknown variant {name!r}")


def eval_windows(samples: Sequence[SynthSample], T: int, seed: int = 0) -> list[SynthSample]:
    return [evaluation_window(s, T, seed) for s in samples]


def rig_error(model: DeformationVAE, window: SynthSample, seeds: Sequence[int] = (0, 1, 2)) -> float:
    """Relative reconstruction error averaged over a few posterior draws."""
    return float(np.mean([reconstruction_error(model, window, s)["relative"] for s in seeds]))


@dataclass
class AblationResult:
    errors: dict  # variant -> per-rig relative errors
    models: dict

    def wins(self, a: str, b: str) -> int:
        return int(np.sum(np.asarray(self.errors[a]) <= np.asarray(self.errors[b])))

    def mean(self, name: str) -> float:
        return float(np.mean(self.errors[name]))


def run_vae_ablation(bench: Benchmark, base: VaeConfig, steps: int, seed: int = 0,
                     variants: Sequence[str] = VARIANTS, callback=None) -> AblationResult:
    windows = eval_windows(bench.test, base.T)
    errors, models = {}, {}
    for name in variants:
        cfg = variant_config(base, name)
        state = train_vae(bench.train, cfg, steps, seed, callback=callback)
        state.model.eval()
        models[name] = state.model
        errors[name] = [rig_error(state.model, w) for w in windows]
    return AblationResult(errors, models)


def frozen_sequence(seq: MeshSequence) -> MeshSequence:
    return MeshSequence(seq.faces, np.repeat(seq.frames[:1], seq.T, axis=0))


def train_flow_on(vae: DeformationVAE, samples: Sequence[SynthSample], fcfg: FlowConfig, steps: int,
                  seed: int = 0, pretrained: bool = True, windows_per_sample: int = 4,
                  dtype=torch.float32, data=None) -> FlowState:
    for p in vae.parameters():
        p.requires_grad_(False)
    data = data or make_flow_dataset(vae, samples, fcfg, windows_per_sample, seed, dtype)
    state = new_flow_state(fcfg, vae.cfg, seed, vae if pretrained else None, data.latent_scale, dtype)
    return train_flow(data, fcfg, steps, seed, state)


def pipeline_l2_corr(vae: DeformationVAE, state: FlowState, fcfg: FlowConfig, samples: Sequence[SynthSample],
                     seed: int = 0, steps: int | None = None, cfg_weight: float | None = None) -> list[dict]:
    """Sample each held-out window from its silhouettes and compare with the frozen baseline."""
    out = []
    for w in eval_windows(samples, vae.cfg.T):
        feats = synth_frame_features(w.sequence, w.camera)
        pred = sample_sequence(vae, state, w.sequence.mesh(0), feats, fcfg, seed, steps, cfg_weight)
        out.append({"id": w.identifier, "pred": l2_corr(pred, w.sequence)[0],
                    "frozen": l2_corr(frozen_sequence(w.sequence), w.sequence)[0]})
    return out
