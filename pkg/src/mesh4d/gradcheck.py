"""Central-difference gradient suites for every differentiable primitive and the toy models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .config import FlowConfig, VaeConfig
from .numeric.autodiff import GradCheckReport, finite_difference_check
from .numeric.ops import (
    MLP,
    MultiHeadAttention,
    fourier_positional_embedding,
    fused_attention,
    kl_standard_normal,
    layer_norm,
    linear,
    mask_bias,
    masked_softmax_attention,
    reparameterize,
    rope_temporal,
)

TOLERANCE = 1e-3
F64 = torch.float64


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed(TOLERANCE)

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.report.max_rel_error, "passed": self.passed,
                "checked_entries": self.report.checked_entries}


def _leaf(g: torch.Generator, *shape, scale: float = 1.0) -> torch.Tensor:
    return (torch.randn(*shape, generator=g, dtype=F64) * scale).requires_grad_(True)


def _weighted(out: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """Scalar probe sum(out * r) with fixed random r, so every output entry matters."""
    r = torch.randn(out.shape, generator=g, dtype=F64)
    return (out * r).sum()


def _check(f: Callable[[], torch.Tensor], params: dict, seed: int, entries: int | None) -> GradCheckReport:
    return finite_difference_check(f, params, epsilon=1e-5, max_entries_per_param=entries, seed=seed)


def primitive_suites(seed: int = 0) -> dict[str, Callable[[], GradCheckReport]]:
    def linear_suite():
        g = torch.Generator().manual_seed(seed)
        x, w, b = _leaf(g, 4, 5), _leaf(g, 5, 3), _leaf(g, 3)
        r = torch.randn(4, 3, generator=g, dtype=F64)
        return _check(lambda: (linear(x, w, b) * r).sum(), {"x": x, "w": w, "b": b}, seed, None)

    def layer_norm_suite():
        g = torch.Generator().manual_seed(seed)
        x, gain, bias = _leaf(g, 3, 6), _leaf(g, 6), _leaf(g, 6)
        r = torch.randn(3, 6, generator=g, dtype=F64)
        return _check(lambda: (layer_norm(x, gain, bias) * r).sum(), {"x": x, "gain": gain, "bias": bias},
                      seed, None)

    def fourier_suite():
        g = torch.Generator().manual_seed(seed)
        x = _leaf(g, 5, 3, scale=0.5)
        r = torch.randn(5, 3 * 9, generator=g, dtype=F64)
        return _check(lambda: (fourier_positional_embedding(x, 4) * r).sum(), {"x": x}, seed, None)

    def rope_suite():
        g = torch.Generator().manual_seed(seed)
        x = _leaf(g, 3, 2, 8)
        pos = torch.arange(3, dtype=F64)[:, None]
        r = torch.randn(3, 2, 8, generator=g, dtype=F64)
        return _check(lambda: (rope_temporal(x, pos) * r).sum(), {"x": x}, seed, None)

    def attention_suite(fn):
        def run():
            g = torch.Generator().manual_seed(seed)
            q, k, v = _leaf(g, 2, 5, 4), _leaf(g, 2, 6, 4), _leaf(g, 2, 6, 4)
            allowed = torch.rand(2, 5, 6, generator=g) > 0.4
            allowed[:, :, 0] = True
            allowed[1, 2] = False  # one fully masked row
            bias = mask_bias(allowed, F64)
            r = torch.randn(2, 5, 4, generator=g, dtype=F64)
            return _check(lambda: (fn(q, k, v, bias) * r).sum(), {"q": q, "k": k, "v": v}, seed, None)
        return run

    def mlp_suite():
        torch.manual_seed(seed)
        m = MLP(6, ratio=2).to(F64)
        g = torch.Generator().manual_seed(seed)
        x = _leaf(g, 3, 6)
        r = torch.randn(3, 6, generator=g, dtype=F64)
        params = {"x": x, **dict(m.named_parameters())}
        return _check(lambda: (m(x) * r).sum(), params, seed, None)

    def mha_suite():
        torch.manual_seed(seed)
        m = MultiHeadAttention(8, 2).to(F64)
        m.fused = False
        g = torch.Generator().manual_seed(seed)
        x = _leaf(g, 3, 5, 8)
        pos = torch.arange(5, dtype=F64)
        r = torch.randn(3, 5, 8, generator=g, dtype=F64)
        params = {"x": x, **dict(m.named_parameters())}
        return _check(lambda: (m(x, q_pos=pos, k_pos=pos) * r).sum(), params, seed, 6)

    def kl_suite():
        g = torch.Generator().manual_seed(seed)
        mu, lv = _leaf(g, 4, 3), _leaf(g, 4, 3, scale=0.5)
        return _check(lambda: kl_standard_normal(mu, lv), {"mean": mu, "log_variance": lv}, seed, None)

    def reparam_suite():
        g = torch.Generator().manual_seed(seed)
        mu, lv = _leaf(g, 4, 3), _leaf(g, 4, 3, scale=0.5)
        r = torch.randn(4, 3, generator=g, dtype=F64)
        return _check(lambda: (reparameterize(mu, lv, noise_seed=seed) * r).sum(),
                      {"mean": mu, "log_variance": lv}, seed, None)

    return {
        "linear": linear_suite,
        "layer_norm": layer_norm_suite,
        "fourier_embedding": fourier_suite,
        "rope_temporal": rope_suite,
        "masked_attention": attention_suite(masked_softmax_attention),
        "fused_attention": attention_suite(fused_attention),
        "mlp": mlp_suite,
        "multihead_attention": mha_suite,
        "kl_standard_normal": kl_suite,
        "reparameterize": reparam_suite,
    }


def _toy_vae_inputs(cfg: VaeConfig, seed: int):
    from .synth import evaluation_window, make_sample
    from .vae import collate, prepare_sequence

    window = evaluation_window(make_sample(seed + 1000, total_frames=8, bone_range=(2, 3)), cfg.T, seed)
    prep = prepare_sequence(window.sequence, window.skeleton, window.weights, cfg, seed)
    queries = torch.as_tensor(window.sequence.frames[0][None, :10], dtype=F64)
    return collate([prep], F64), queries


def model_suites(seed: int = 0, entries: int = 3) -> dict[str, Callable[[], GradCheckReport]]:
    from .flow import ConditionBatch, VelocityModel
    from .vae import DeformationVAE, randomize_

    def encoder_suite():
        cfg = VaeConfig.gradcheck()
        torch.manual_seed(seed)
        model = DeformationVAE(cfg).to(F64)
        randomize_(model.encoder, seed)
        inp, _ = _toy_vae_inputs(cfg, seed)
        g = torch.Generator().manual_seed(seed)
        r = torch.randn(1, cfg.T, cfg.N, cfg.c_o, generator=g, dtype=F64)

        def f():
            mean, logvar = model.encoder(inp)
            return (mean * r).sum() + (logvar * r).sum()

        return _check(f, dict(model.encoder.named_parameters()), seed, entries)

    def decoder_suite():
        cfg = VaeConfig.gradcheck()
        torch.manual_seed(seed)
        model = DeformationVAE(cfg).to(F64)
        randomize_(model.decoder, seed)
        _, queries = _toy_vae_inputs(cfg, seed)
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(1, cfg.T, cfg.N, cfg.c_o, generator=g, dtype=F64)
        r = torch.randn(1, cfg.T, queries.shape[1], 3, generator=g, dtype=F64)
        return _check(lambda: (model.decoder(z, queries) * r).sum(), dict(model.decoder.named_parameters()),
                      seed, entries)

    def velocity_suite():
        vcfg, fcfg = VaeConfig.gradcheck(), FlowConfig.gradcheck()
        torch.manual_seed(seed)
        model = VelocityModel(fcfg, vcfg).to(F64)
        randomize_(model, seed)
        g = torch.Generator().manual_seed(seed)
        cond = ConditionBatch(torch.randn(2, fcfg.N_s, fcfg.c_s, generator=g, dtype=F64),
                              torch.randn(2, vcfg.T, fcfg.frame_tokens, fcfg.c_v, generator=g, dtype=F64),
                              torch.rand(2, vcfg.N, 3, generator=g, dtype=F64) - 0.5)
        z = torch.randn(2, vcfg.T, vcfg.N, vcfg.c_o, generator=g, dtype=F64)
        t = torch.tensor([0.3, 0.8], dtype=F64)
        drop = torch.tensor([False, True])
        r = torch.randn(2, vcfg.T, vcfg.N, vcfg.c_o, generator=g, dtype=F64)
        return _check(lambda: (model(z, t, cond, drop) * r).sum(), dict(model.named_parameters()), seed, entries)

    return {"encoder": encoder_suite, "decoder": decoder_suite, "velocity": velocity_suite}


COMPONENTS = ("primitives", "encoder", "decoder", "velocity", "all")


def run_gradcheck(component: str = "all", seed: int = 0) -> list[SuiteResult]:
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")
    suites: dict[str, Callable] = {}
    if component in ("primitives", "all"):
        suites.update(primitive_suites(seed))
    models = model_suites(seed)
    for name in ("encoder", "decoder", "velocity"):
        if component in (name, "all"):
            suites[name] = models[name]
    results = []
    for name, fn in suites.items():
        with torch.random.fork_rng():
            results.append(SuiteResult(name, fn()))
    return results


def relative_error_table(results: list[SuiteResult]) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(f"{r.name:<{width}}  {r.report.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}"
                     for r in results)


def sign_flip_detected(seed: int = 0) -> bool:
    """Mutation check: a deliberately wrong gradient must be caught by the checker."""
    g = torch.Generator().manual_seed(seed)
    x = _leaf(g, 5)

    class Flip(torch.autograd.Function):
        @staticmethod
        def forward(ctx, inp):
            ctx.save_for_backward(inp)
            return inp ** 3

        @staticmethod
        def backward(ctx, grad):
            (inp,) = ctx.saved_tensors
            return -3 * inp ** 2 * grad  # wrong sign on purpose

    rep = finite_difference_check(lambda: Flip.apply(x).sum(), {"x": x}, max_entries_per_param=None, seed=seed)
    return not rep.passed(TOLERANCE)


__all__ = ["run_gradcheck", "SuiteResult", "relative_error_table", "sign_flip_detected", "TOLERANCE",
           "primitive_suites", "model_suites", "COMPONENTS"]
