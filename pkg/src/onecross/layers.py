"""Transformer building blocks: the three decoder-side layer species plus the
bidirectional encoder layer.

All stacks are pre-norm with residual connections. A self layer carries only
causal self-attention + feed-forward; a cross layer carries only
cross-attention + feed-forward; the vanilla decoder layer carries both. The
vanilla layer's cross-attention sub-layer is pre-normed WITHOUT learnable
gain/bias so that it exceeds a self layer by exactly one attention block
(4*d_model^2 + projection biases) in the parameter accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    d_ff: int
    dropout: float = 0.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


# analytic parameter accounting -------------------------------------------------

def attention_param_count(cfg: AttentionConfig) -> int:
    """4 projections of d x d plus their biases."""
    return 4 * cfg.d_model * cfg.d_model + 4 * cfg.d_model


def ffn_param_count(cfg: AttentionConfig) -> int:
    return 2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_model


def norm_param_count(cfg: AttentionConfig) -> int:
    return 2 * cfg.d_model


def self_layer_param_count(cfg: AttentionConfig) -> int:
    return attention_param_count(cfg) + ffn_param_count(cfg) + 2 * norm_param_count(cfg)


cross_layer_param_count = self_layer_param_count
encoder_layer_param_count = self_layer_param_count


def vanilla_layer_param_count(cfg: AttentionConfig) -> int:
    return self_layer_param_count(cfg) + attention_param_count(cfg)


# parameter groups ---------------------------------------------------------------


class AttentionBlock:
    """Per-head projections + output projection around the attention core."""

    def __init__(self, params, prefix: str, cfg: AttentionConfig):
        d = cfg.d_model
        self.cfg = cfg
        self.wq = params.tensor(f"{prefix}.wq", (d, d), "xavier")
        self.bq = params.tensor(f"{prefix}.bq", (d,), "zeros")
        self.wk = params.tensor(f"{prefix}.wk", (d, d), "xavier")
        self.bk = params.tensor(f"{prefix}.bk", (d,), "zeros")
        self.wv = params.tensor(f"{prefix}.wv", (d, d), "xavier")
        self.bv = params.tensor(f"{prefix}.bv", (d,), "zeros")
        self.wo = params.tensor(f"{prefix}.wo", (d, d), "xavier")
        self.bo = params.tensor(f"{prefix}.bo", (d,), "zeros")

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, mask: str | None) -> Tensor:
        return multi_head_attention(self, q_in, k_in, v_in, mask)


def multi_head_attention(block: AttentionBlock, q_in: Tensor, k_in: Tensor,
                         v_in: Tensor, mask: str | None) -> Tensor:
    """Project the three streams, attend per head, project the concat back."""
    if mask not in (None, "causal"):
        raise ShapeError(f"unknown attention mask kind: {mask!r}")
    q = nm.add(nm.matmul(q_in, block.wq), block.bq)
    k = nm.add(nm.matmul(k_in, block.wk), block.bk)
    v = nm.add(nm.matmul(v_in, block.wv), block.bv)
    ctx = nm.attention_core(q, k, v, block.cfg.n_heads, causal=(mask == "causal"))
    return nm.add(nm.matmul(ctx, block.wo), block.bo)


class FeedForward:
    def __init__(self, params, prefix: str, cfg: AttentionConfig):
        d, f = cfg.d_model, cfg.d_ff
        self.w1 = params.tensor(f"{prefix}.w1", (d, f), "xavier")
        self.b1 = params.tensor(f"{prefix}.b1", (f,), "zeros")
        self.w2 = params.tensor(f"{prefix}.w2", (f, d), "xavier")
        self.b2 = params.tensor(f"{prefix}.b2", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        h = nm.gelu(nm.add(nm.matmul(x, self.w1), self.b1))
        return nm.add(nm.matmul(h, self.w2), self.b2)


class Norm:
    def __init__(self, params, prefix: str, cfg: AttentionConfig):
        d = cfg.d_model
        self.eps = cfg.eps
        self.gain = params.tensor(f"{prefix}.gain", (d,), "ones")
        self.bias = params.tensor(f"{prefix}.bias", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gain, self.bias, self.eps)


def _maybe_drop(x: Tensor, cfg: AttentionConfig, rng) -> Tensor:
    if cfg.dropout == 0.0:
        return x
    return nm.dropout(x, cfg.dropout, rng)


# layer species ------------------------------------------------------------------


class SelfLayer:
    """Causal self-attention + feed-forward; no cross-attention parameters."""

    def __init__(self, params, prefix: str, cfg: AttentionConfig):
        self.cfg = cfg
        self.norm_attn = Norm(params, f"{prefix}.norm_attn", cfg)
        self.attn = AttentionBlock(params, f"{prefix}.attn", cfg)
        self.norm_ffn = Norm(params, f"{prefix}.norm_ffn", cfg)
        self.ffn = FeedForward(params, f"{prefix}.ffn", cfg)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = self.norm_attn(x)
        x = nm.add(x, _maybe_drop(self.attn(h, h, h, "causal"), self.cfg, rng))
        x = nm.add(x, _maybe_drop(self.ffn(self.norm_ffn(x)), self.cfg, rng))
        return x


class CrossLayer:
    """Cross-attention (queries from the decoder stream, keys/values from the
    encoder output) + feed-forward; no self-attention parameters."""

    def __init__(self, params, prefix: str, cfg: AttentionConfig):
        self.cfg = cfg
        self.norm_attn = Norm(params, f"{prefix}.norm_attn", cfg)
        self.attn = AttentionBlock(params, f"{prefix}.attn", cfg)
        self.norm_ffn = Norm(params, f"{prefix}.norm_ffn", cfg)
        self.ffn = FeedForward(params, f"{prefix}.ffn", cfg)

    def __call__(self, x: Tensor, enc_out: Tensor, rng=None) -> Tensor:
        h = self.norm_attn(x)
        x = nm.add(x, _maybe_drop(self.attn(h, enc_out, enc_out, None), self.cfg, rng))
        x = nm.add(x, _maybe_drop(self.ffn(self.norm_ffn(x)), self.cfg, rng))
        return x


class VanillaDecoderLayer:
    """Causal self-attention + cross-attention + feed-forward."""

    def __init__(self, params, prefix: str, cfg: AttentionConfig):
        self.cfg = cfg
        self.norm_self = Norm(params, f"{prefix}.norm_self", cfg)
        self.self_attn = AttentionBlock(params, f"{prefix}.self_attn", cfg)
        # Affine-free pre-norm: keeps the species exactly one attention block
        # heavier than SelfLayer.
        self.cross_attn = AttentionBlock(params, f"{prefix}.cross_attn", cfg)
        self.norm_ffn = Norm(params, f"{prefix}.norm_ffn", cfg)
        self.ffn = FeedForward(params, f"{prefix}.ffn", cfg)

    def __call__(self, x: Tensor, enc_out: Tensor, rng=None) -> Tensor:
        h = self.norm_self(x)
        x = nm.add(x, _maybe_drop(self.self_attn(h, h, h, "causal"), self.cfg, rng))
        h = nm.layer_norm(x, None, None, self.cfg.eps)
        x = nm.add(x, _maybe_drop(self.cross_attn(h, enc_out, enc_out, None), self.cfg, rng))
        x = nm.add(x, _maybe_drop(self.ffn(self.norm_ffn(x)), self.cfg, rng))
        return x


class EncoderLayer:
    """Bidirectional self-attention + feed-forward (no mask)."""

    def __init__(self, params, prefix: str, cfg: AttentionConfig):
        self.cfg = cfg
        self.norm_attn = Norm(params, f"{prefix}.norm_attn", cfg)
        self.attn = AttentionBlock(params, f"{prefix}.attn", cfg)
        self.norm_ffn = Norm(params, f"{prefix}.norm_ffn", cfg)
        self.ffn = FeedForward(params, f"{prefix}.ffn", cfg)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = self.norm_attn(x)
        x = nm.add(x, _maybe_drop(self.attn(h, h, h, None), self.cfg, rng))
        x = nm.add(x, _maybe_drop(self.ffn(self.norm_ffn(x)), self.cfg, rng))
        return x


# positions ----------------------------------------------------------------------


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    """Interleaved sin/cos table; row 0 is [0, 1, 0, 1, ...]."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(0, d_model, 2).astype(np.float64)
    angles = pos / np.power(10000.0, i / d_model)[None, :]
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : table[:, 1::2].shape[1]])
    return table


def positional_encoding(length: int, d_model: int, kind: str, max_len: int,
                        table: Tensor | None = None) -> Tensor:
    """Rows 0..length-1 of either the fixed sinusoidal table or a learned one."""
    if length > max_len:
        raise ShapeError(f"position length {length} exceeds configured maximum {max_len}")
    if kind == "sinusoidal":
        return Tensor(sinusoidal_positions(length, d_model))
    if kind == "learned":
        if table is None:
            raise ValueError("learned positions need the trainable table")
        if table.shape[0] < max_len:
            raise ShapeError(f"learned table has {table.shape[0]} rows < max_len {max_len}")
        return nm.embedding(table, np.arange(length))
    raise ValueError(f"unknown positional encoding kind: {kind!r}")
