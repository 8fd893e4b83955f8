"""Model assembly: acoustic encoder with a frozen conv frontend, the decoder
variants, the CTC head, and the causal LM used as an initialization donor and
fusion scorer.

Every parameter lives in a flat ModelParams registry under a dotted path; the
paths are the stable ABI of checkpoints and freeze policies:

    encoder.conv.{i}.{w,b}
    encoder.context.{i}.{norm_attn,attn,norm_ffn,ffn}.*
    encoder.norm.{gain,bias}
    decoder.emb.{tok,pos}
    decoder.self.{i}.*            (one-cross / two-cross)
    decoder.cross.{j}.*           (one-cross / two-cross)
    decoder.stack.{i}.*           (vanilla)
    decoder.norm.{gain,bias}
    decoder.out.{w,b}
    ctc_head.{w,b}

A standalone causal LM uses the decoder's donor-group paths with the
``decoder.`` prefix stripped (emb.tok, self.0..., norm.*), so its checkpoint
is exactly the donor file format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .layers import (
    AttentionConfig,
    CrossLayer,
    EncoderLayer,
    SelfLayer,
    VanillaDecoderLayer,
    attention_param_count,
    ffn_param_count,
    norm_param_count,
    positional_encoding,
    self_layer_param_count,
    vanilla_layer_param_count,
)
from .numerics import ShapeError, Tensor


class InitError(ValueError):
    """Donor checkpoint does not match the target parameter group."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int          # characters + SOS + EOS
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    enc_layers: int = 2
    dec_layers: int = 2      # self layers (one/two-cross) or full layers (vanilla)
    decoder_kind: str = "onecross"   # onecross | twocross | vanilla
    d_feat: int = 8
    max_len: int = 48
    conv_layers: int = 2
    conv_kernel: int = 3
    conv_stride: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        if self.decoder_kind not in ("onecross", "twocross", "vanilla"):
            raise ValueError(f"unknown decoder_kind: {self.decoder_kind!r}")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd (length contract ceil(T/stride))")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.d_ff, self.dropout)

    @property
    def total_stride(self) -> int:
        return self.conv_stride ** self.conv_layers

    @property
    def blank_id(self) -> int:
        return self.vocab_size

    @property
    def sos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1


def full_scale_config(decoder_kind: str) -> ModelConfig:
    """Reference dims (768/3072/12, 12 encoder + 6 decoder layers, 4233-way
    output). Used for parameter accounting, not for training or tests; both
    decoder kinds share the same encoder shape so totals differ only by
    decoder species."""
    return ModelConfig(
        vocab_size=4233,
        d_model=768,
        n_heads=12,
        d_ff=3072,
        enc_layers=12,
        dec_layers=6,
        decoder_kind=decoder_kind,
        d_feat=80,
        max_len=512,
        conv_layers=7,
    )


# ---------------------------------------------------------------------------
# parameter registry


class ModelParams:
    """Flat dotted-path -> Tensor map with per-path freeze flags."""

    def __init__(self, seed: int = 0):
        self._tensors: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}
        self.rng = np.random.default_rng(seed)

    def tensor(self, path: str, shape: tuple, init) -> Tensor:
        if path in self._tensors:
            raise ValueError(f"duplicate parameter path: {path}")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "xavier":
            if len(shape) == 2:
                fan_in, fan_out = shape
            elif len(shape) == 3:  # conv [out, in, k]
                fan_in, fan_out = shape[1] * shape[2], shape[0]
            else:
                raise ValueError(f"xavier init needs rank 2 or 3, got {shape}")
            std = math.sqrt(2.0 / (fan_in + fan_out))
            data = self.rng.normal(0.0, std, size=shape)
        elif isinstance(init, tuple) and init[0] == "normal":
            data = self.rng.normal(0.0, init[1], size=shape)
        else:
            raise ValueError(f"unknown init spec: {init!r}")
        t = Tensor(data, requires_grad=True)
        self._tensors[path] = t
        self._frozen[path] = False
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def paths(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def set_frozen(self, path: str, flag: bool):
        if path not in self._tensors:
            raise KeyError(f"unknown parameter path: {path}")
        self._frozen[path] = flag

    def freeze_matching(self, prefix: str, flag: bool) -> int:
        n = 0
        for path in self._tensors:
            if path.startswith(prefix):
                self._frozen[path] = flag
                n += 1
        return n

    def is_frozen(self, path: str) -> bool:
        return self._frozen[path]

    def trainable_items(self):
        return [(p, t) for p, t in self._tensors.items() if not self._frozen[p]]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        """Overwrite every registered parameter from state (exact path match)."""
        missing = [p for p in self._tensors if p not in state]
        extra = [p for p in state if p not in self._tensors]
        if missing or extra:
            raise InitError(
                f"checkpoint path set mismatch: missing {sorted(missing)[:4]}, "
                f"unexpected {sorted(extra)[:4]}"
            )
        for p, t in self._tensors.items():
            arr = np.asarray(state[p], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise InitError(
                    f"shape mismatch at {p}: checkpoint {arr.shape} vs model {t.data.shape}"
                )
            t.data = arr.copy()

    def param_count(self, selector: str = "") -> int:
        return sum(t.data.size for p, t in self._tensors.items() if p.startswith(selector))


def param_count(params: ModelParams, selector: str = "") -> int:
    """Exact scalar count of parameters whose path starts with selector."""
    n = params.param_count(selector)
    if n == 0 and selector:
        raise KeyError(f"selector {selector!r} matches no parameters")
    return n


# ---------------------------------------------------------------------------
# encoder


class AcousticEncoder:
    """Strided conv frontend (always frozen during fine-tuning) + bidirectional
    transformer context network + final norm. Output length is ceil(T/stride)."""

    def __init__(self, params: ModelParams, cfg: ModelConfig, prefix: str = "encoder"):
        self.cfg = cfg
        acfg = cfg.attention
        self.conv = []
        in_ch = cfg.d_feat
        for i in range(cfg.conv_layers):
            w = params.tensor(f"{prefix}.conv.{i}.w", (cfg.d_model, in_ch, cfg.conv_kernel), "xavier")
            b = params.tensor(f"{prefix}.conv.{i}.b", (cfg.d_model,), "zeros")
            self.conv.append((w, b))
            in_ch = cfg.d_model
        self.context = [
            EncoderLayer(params, f"{prefix}.context.{i}", acfg) for i in range(cfg.enc_layers)
        ]
        self.norm_gain = params.tensor(f"{prefix}.norm.gain", (cfg.d_model,), "ones")
        self.norm_bias = params.tensor(f"{prefix}.norm.bias", (cfg.d_model,), "zeros")

    def __call__(self, feats: Tensor, rng=None) -> Tensor:
        if feats.data.ndim != 2 or feats.shape[1] != self.cfg.d_feat:
            raise ShapeError(f"features must be [T x {self.cfg.d_feat}], got {feats.shape}")
        t_in = feats.shape[0]
        if t_in < self.cfg.total_stride:
            raise ShapeError(
                f"need at least {self.cfg.total_stride} frames (total stride), got {t_in}"
            )
        x = feats
        pad = (self.cfg.conv_kernel - 1) // 2
        for w, b in self.conv:
            x = nm.gelu(nm.conv1d(x, w, b, self.cfg.conv_stride, pad))
        pos = positional_encoding(x.shape[0], self.cfg.d_model, "sinusoidal", x.shape[0])
        x = nm.add(x, Tensor(pos.data))
        for layer in self.context:
            x = layer(x, rng)
        return nm.layer_norm(x, self.norm_gain, self.norm_bias)

    def out_len(self, t_in: int) -> int:
        return math.ceil(t_in / self.cfg.total_stride)


class CtcHead:
    """Single projection from encoder width to vocab+1; blank is the last index."""

    def __init__(self, params: ModelParams, cfg: ModelConfig, prefix: str = "ctc_head"):
        self.cfg = cfg
        self.w = params.tensor(f"{prefix}.w", (cfg.d_model, cfg.vocab_size + 1), "xavier")
        self.b = params.tensor(f"{prefix}.b", (cfg.vocab_size + 1,), "zeros")

    def __call__(self, enc_out: Tensor) -> Tensor:
        return nm.add(nm.matmul(enc_out, self.w), self.b)


# ---------------------------------------------------------------------------
# decoders


class _TokenStream:
    """Shared embedding + learned-position front end for decoder-side stacks."""

    def __init__(self, params: ModelParams, cfg: ModelConfig, prefix: str):
        self.cfg = cfg
        self.tok = params.tensor(f"{prefix}.emb.tok", (cfg.vocab_size, cfg.d_model), ("normal", 0.1))
        self.pos = params.tensor(f"{prefix}.emb.pos", (cfg.max_len, cfg.d_model), ("normal", 0.1))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size == 0:
            raise ShapeError("token prefix must be nonempty")
        emb = nm.embedding(self.tok, ids)
        pos = positional_encoding(len(ids), self.cfg.d_model, "learned", self.cfg.max_len, self.pos)
        return nm.add(emb, pos)


class OneCrossDecoder:
    """N causal self layers followed by exactly one cross layer.

    Everything before the cross layer (embedding, positions, self stack, final
    norm) forms the donor-initializable group.
    """

    n_cross = 1

    def __init__(self, params: ModelParams, cfg: ModelConfig, prefix: str = "decoder"):
        self.cfg = cfg
        self.prefix = prefix
        acfg = cfg.attention
        self.stream = _TokenStream(params, cfg, prefix)
        self.self_layers = [
            SelfLayer(params, f"{prefix}.self.{i}", acfg) for i in range(cfg.dec_layers)
        ]
        self.cross_layers = [
            CrossLayer(params, f"{prefix}.cross.{j}", acfg) for j in range(self.n_cross)
        ]
        self.norm_gain = params.tensor(f"{prefix}.norm.gain", (cfg.d_model,), "ones")
        self.norm_bias = params.tensor(f"{prefix}.norm.bias", (cfg.d_model,), "zeros")
        self.out_w = params.tensor(f"{prefix}.out.w", (cfg.d_model, cfg.vocab_size), "xavier")
        self.out_b = params.tensor(f"{prefix}.out.b", (cfg.vocab_size,), "zeros")

    def __call__(self, enc_out: Tensor, prefix_ids, rng=None) -> Tensor:
        x = self.stream(prefix_ids)
        for layer in self.self_layers:
            x = layer(x, rng)
        for layer in self.cross_layers:
            x = layer(x, enc_out, rng)
        x = nm.layer_norm(x, self.norm_gain, self.norm_bias)
        return nm.add(nm.matmul(x, self.out_w), self.out_b)

    def lm_group_relative_paths(self, params: ModelParams) -> list[str]:
        """Donor-group paths relative to this decoder's prefix."""
        pre = self.prefix + "."
        rels = []
        for path in params.paths():
            if not path.startswith(pre):
                continue
            rel = path[len(pre):]
            if rel.startswith(("emb.", "self.", "norm.")):
                rels.append(rel)
        return rels


class TwoCrossDecoder(OneCrossDecoder):
    """Ablation variant: identical to the one-cross decoder except two cross
    layers follow the self stack."""

    n_cross = 2


class VanillaDecoder:
    """M full decoder layers, each with self- and cross-attention."""

    def __init__(self, params: ModelParams, cfg: ModelConfig, prefix: str = "decoder"):
        self.cfg = cfg
        self.prefix = prefix
        acfg = cfg.attention
        self.stream = _TokenStream(params, cfg, prefix)
        self.stack = [
            VanillaDecoderLayer(params, f"{prefix}.stack.{i}", acfg) for i in range(cfg.dec_layers)
        ]
        self.norm_gain = params.tensor(f"{prefix}.norm.gain", (cfg.d_model,), "ones")
        self.norm_bias = params.tensor(f"{prefix}.norm.bias", (cfg.d_model,), "zeros")
        self.out_w = params.tensor(f"{prefix}.out.w", (cfg.d_model, cfg.vocab_size), "xavier")
        self.out_b = params.tensor(f"{prefix}.out.b", (cfg.vocab_size,), "zeros")

    def __call__(self, enc_out: Tensor, prefix_ids, rng=None) -> Tensor:
        x = self.stream(prefix_ids)
        for layer in self.stack:
            x = layer(x, enc_out, rng)
        x = nm.layer_norm(x, self.norm_gain, self.norm_bias)
        return nm.add(nm.matmul(x, self.out_w), self.out_b)


def build_decoder(params: ModelParams, cfg: ModelConfig, prefix: str = "decoder"):
    cls = {
        "onecross": OneCrossDecoder,
        "twocross": TwoCrossDecoder,
        "vanilla": VanillaDecoder,
    }[cfg.decoder_kind]
    return cls(params, cfg, prefix)


# ---------------------------------------------------------------------------
# causal LM (donor + fusion scorer)


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_layers: int = 2
    max_len: int = 48
    dropout: float = 0.0

    @classmethod
    def matching(cls, cfg: ModelConfig) -> "LmConfig":
        """LM shaped to donate into cfg's decoder group."""
        return cls(cfg.vocab_size, cfg.d_model, cfg.n_heads, cfg.d_ff,
                   cfg.dec_layers, cfg.max_len, cfg.dropout)

    @property
    def sos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1


class CausalLanguageModel:
    """Embedding + learned positions + N self layers + final norm, with the
    output projection tied to the token embedding. Parameter paths are exactly
    the decoder donor group (no prefix), so a checkpoint of this model is a
    donor file and vice versa."""

    def __init__(self, params: ModelParams, cfg: LmConfig):
        self.cfg = cfg
        self.params = params
        acfg = AttentionConfig(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout)
        self.tok = params.tensor("emb.tok", (cfg.vocab_size, cfg.d_model), ("normal", 0.1))
        self.pos = params.tensor("emb.pos", (cfg.max_len, cfg.d_model), ("normal", 0.1))
        self.self_layers = [
            SelfLayer(params, f"self.{i}", acfg) for i in range(cfg.n_layers)
        ]
        self.norm_gain = params.tensor("norm.gain", (cfg.d_model,), "ones")
        self.norm_bias = params.tensor("norm.bias", (cfg.d_model,), "zeros")

    def __call__(self, prefix_ids, rng=None) -> Tensor:
        """Logits [L x V] over the next token at every prefix position."""
        ids = np.asarray(prefix_ids, dtype=np.intp)
        if ids.size == 0:
            raise ShapeError("token prefix must be nonempty")
        emb = nm.embedding(self.tok, ids)
        pos = positional_encoding(len(ids), self.cfg.d_model, "learned", self.cfg.max_len, self.pos)
        x = nm.add(emb, pos)
        for layer in self.self_layers:
            x = layer(x, rng)
        x = nm.layer_norm(x, self.norm_gain, self.norm_bias)
        return nm.matmul_tb(x, self.tok)

    def next_log_probs(self, prefix_ids) -> np.ndarray:
        """Log-probabilities over the next token given the full prefix."""
        with nm.no_grad():
            logits = self(prefix_ids)
            return nm.log_softmax(logits, axis=-1).data[-1]


# ---------------------------------------------------------------------------
# full recognizer


class Recognizer:
    """Encoder + decoder + CTC head sharing one parameter registry."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ModelParams(seed)
        self.encoder = AcousticEncoder(self.params, cfg)
        self.decoder = build_decoder(self.params, cfg)
        self.ctc_head = CtcHead(self.params, cfg)

    def encode(self, feats: Tensor, rng=None) -> Tensor:
        return self.encoder(feats, rng)

    def forward(self, feats: Tensor, prefix_ids, rng=None):
        """(ctc_logits [T' x V+1], dec_logits [L x V]) for one utterance."""
        ids = list(prefix_ids)
        if feats.data.size == 0:
            raise ShapeError("empty features")
        if not ids or ids[0] != self.cfg.sos_id:
            raise ShapeError("target prefix must begin with the start-of-sequence token")
        enc_out = self.encode(feats, rng)
        ctc_logits = self.ctc_head(enc_out)
        dec_logits = self.decoder(enc_out, ids, rng)
        return ctc_logits, dec_logits


# ---------------------------------------------------------------------------
# donor initialization and freeze policies


def init_from_lm(recognizer: Recognizer, donor_state: dict[str, np.ndarray]):
    """Copy the donor group (embedding, positions, self layers, final norm)
    into the decoder, bitwise. Cross layers and the output projection keep
    their fresh initialization. Idempotent."""
    decoder = recognizer.decoder
    if not isinstance(decoder, OneCrossDecoder):
        raise InitError(f"{type(decoder).__name__} has no donor-initializable group")
    params = recognizer.params
    for rel in decoder.lm_group_relative_paths(params):
        if rel not in donor_state:
            raise InitError(f"donor checkpoint is missing tensor {rel!r}")
        src = np.asarray(donor_state[rel], dtype=np.float64)
        dst = params[f"{decoder.prefix}.{rel}"]
        if src.shape != dst.data.shape:
            raise InitError(
                f"shape mismatch at {decoder.prefix}.{rel}: donor {src.shape} vs model {dst.data.shape}"
            )
        dst.data = src.copy()


def load_encoder_group(recognizer: Recognizer, state: dict[str, np.ndarray]):
    """Initialize the whole encoder (conv frontend + context + norm) from a
    checkpoint. Accepts either encoder-relative paths or a full-model
    checkpoint (paths starting with ``encoder.``)."""
    params = recognizer.params
    enc_paths = [p for p in params.paths() if p.startswith("encoder.")]
    for path in enc_paths:
        rel = path[len("encoder."):]
        if path in state:
            src = state[path]
        elif rel in state:
            src = state[rel]
        else:
            raise InitError(f"encoder donor is missing tensor {path!r}")
        src = np.asarray(src, dtype=np.float64)
        dst = params[path]
        if src.shape != dst.data.shape:
            raise InitError(f"shape mismatch at {path}: donor {src.shape} vs model {dst.data.shape}")
        dst.data = src.copy()


FREEZE_POLICIES = ("fixed", "last1", "last3", "all")


def apply_freeze_policy(params: ModelParams, phase: str, policy: str = "fixed"):
    """Set freeze flags for a training phase.

    warm: only the CTC head, decoder output projection, and cross-attention
    group train. main: the encoder context network joins; the donor group
    follows the policy (fixed keeps it frozen; last1/last3 release trailing
    self layers; all releases the whole decoder). The conv frontend never
    trains.
    """
    if phase not in ("warm", "main"):
        raise ValueError(f"unknown phase: {phase!r}")
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}; valid: {FREEZE_POLICIES}")

    for path in params.paths():
        params.set_frozen(path, True)
    params.freeze_matching("ctc_head.", False)
    params.freeze_matching("decoder.out.", False)
    params.freeze_matching("decoder.cross.", False)
    for path in params.paths():  # vanilla decoder: cross-attention inside each layer
        if path.startswith("decoder.stack.") and ".cross_attn." in path:
            params.set_frozen(path, False)

    if phase == "main":
        params.freeze_matching("encoder.context.", False)
        params.freeze_matching("encoder.norm.", False)
        if policy == "all":
            params.freeze_matching("decoder.", False)
        elif policy in ("last1", "last3"):
            k = 1 if policy == "last1" else 3
            idxs = sorted({
                int(p.split(".")[2]) for p in params.paths() if p.startswith("decoder.self.")
            })
            for i in idxs[-k:]:
                params.freeze_matching(f"decoder.self.{i}.", False)
    # conv frontend is fixed in every phase
    params.freeze_matching("encoder.conv.", True)


# ---------------------------------------------------------------------------
# analytic accounting


def analytic_decoder_delta(cfg: ModelConfig) -> int:
    """Exact parameter surplus of a vanilla decoder (M = dec_layers) over a
    one-cross decoder (N = dec_layers) at the same config: N extra attention
    blocks minus the one-cross decoder's single cross layer (attention block +
    feed-forward block + its norms)."""
    acfg = cfg.attention
    return cfg.dec_layers * attention_param_count(acfg) - (
        attention_param_count(acfg) + ffn_param_count(acfg) + 2 * norm_param_count(acfg)
    )


def analytic_total(cfg: ModelConfig) -> int:
    """Closed-form parameter count of a full recognizer for cfg."""
    acfg = cfg.attention
    d, v = cfg.d_model, cfg.vocab_size
    conv = 0
    in_ch = cfg.d_feat
    for _ in range(cfg.conv_layers):
        conv += d * in_ch * cfg.conv_kernel + d
        in_ch = d
    encoder = conv + cfg.enc_layers * self_layer_param_count(acfg) + 2 * d
    if cfg.decoder_kind == "vanilla":
        body = cfg.dec_layers * vanilla_layer_param_count(acfg)
    else:
        n_cross = 1 if cfg.decoder_kind == "onecross" else 2
        body = cfg.dec_layers * self_layer_param_count(acfg) + n_cross * self_layer_param_count(acfg)
    decoder = v * d + cfg.max_len * d + body + 2 * d + d * v + v
    ctc = d * (v + 1) + (v + 1)
    return encoder + decoder + ctc
