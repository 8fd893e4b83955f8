"""Seeded gradient-check suite over every layer species and both losses.

Shared by the CLI ``grad-check`` subcommand and the acceptance tests: each
entry builds a small seeded module, runs the central-difference oracle
against reverse-mode gradients, and reports the max relative error.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .ctc import ctc_loss, posterior_from_logits
from .layers import AttentionConfig, CrossLayer, EncoderLayer, SelfLayer, VanillaDecoderLayer
from .model import ModelParams
from .numerics import GradCheckReport, Tensor
from .training import ce_loss


def _collect(params: ModelParams, extra: dict) -> dict:
    named = {path: t for path, t in params.items()}
    named.update(extra)
    return named


def gradient_suite(h: float = 1e-5, tol: float = 1e-4,
                   d_model: int = 32, n_heads: int = 4, d_ff: int = 64,
                   seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Run every check at the given step and tolerance; returns (name, report)."""
    cfg = AttentionConfig(d_model, n_heads, d_ff)
    rng = np.random.default_rng(seed)
    L, Te = 4, 5
    results = []

    def check_layer(name, build, forward):
        params = ModelParams(seed)
        layer = build(params)
        x = Tensor(rng.normal(size=(L, d_model)), requires_grad=True)
        enc = Tensor(rng.normal(size=(Te, d_model)), requires_grad=True)

        def f():
            return nm.mean_all(forward(layer, x, enc))

        named = _collect(params, {"input": x, "enc": enc})
        results.append((name, nm.grad_check(f, named, h=h, tol=tol)))

    check_layer("self_layer", lambda p: SelfLayer(p, "l", cfg), lambda l, x, e: l(x))
    check_layer("cross_layer", lambda p: CrossLayer(p, "l", cfg), lambda l, x, e: l(x, e))
    check_layer("vanilla_decoder_layer", lambda p: VanillaDecoderLayer(p, "l", cfg),
                lambda l, x, e: l(x, e))
    check_layer("encoder_layer", lambda p: EncoderLayer(p, "l", cfg), lambda l, x, e: l(x))

    V = 5
    logits_ce = Tensor(rng.normal(size=(4, V)), requires_grad=True)
    targets = [int(t) for t in rng.integers(0, V, size=4)]

    def f_ce():
        return ce_loss(logits_ce, targets, 0.0)

    results.append(("ce_loss", nm.grad_check(f_ce, {"logits": logits_ce}, h=h, tol=tol)))

    logits_ce_s = Tensor(rng.normal(size=(4, V)), requires_grad=True)

    def f_ce_smooth():
        return ce_loss(logits_ce_s, targets, 0.1)

    results.append(("ce_loss_smoothed",
                    nm.grad_check(f_ce_smooth, {"logits": logits_ce_s}, h=h, tol=tol)))

    logits_ctc = Tensor(rng.normal(size=(6, 4)), requires_grad=True)  # V=3 + blank

    def f_ctc():
        return ctc_loss(posterior_from_logits(logits_ctc), [0, 2])

    results.append(("ctc_loss", nm.grad_check(f_ctc, {"logits": logits_ctc}, h=h, tol=tol)))

    return results
