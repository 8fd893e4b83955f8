"""Command-line surface tying the library into runnable experiments.

Every subcommand reads an optional ``key = value`` config file (--config)
with CLI flags overriding file values; a single ``seed`` key governs all
randomness. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .data import (
    CorpusConfig,
    Vocab,
    gen_corpus,
    load_checkpoint,
    load_lm_corpus,
    load_split,
    parse_config_file,
    save_checkpoint,
    write_corpus,
)
from .decoding import DecodeConfig, corpus_cer, decode_utterance, format_decode_line, levenshtein
from .diagnostics import gradient_suite
from .model import (
    CausalLanguageModel,
    LmConfig,
    ModelConfig,
    ModelParams,
    Recognizer,
    analytic_decoder_delta,
    analytic_total,
    full_scale_config,
    init_from_lm,
    load_encoder_group,
    param_count,
)
from .training import (
    TrainConfig,
    average_checkpoints,
    lm_perplexity,
    pretrain_lm,
    train_epochs,
    unigram_perplexity,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# Global key registry: one config file can drive every subcommand; any key
# outside this set is a usage error.
KEY_TYPES: dict[str, type] = {
    "seed": int, "data_dir": str, "out_dir": str,
    # corpus
    "vocab_size": int, "n_utts": int, "noise_sigma": float,
    "frames_per_token_min": int, "frames_per_token_max": int,
    "token_len_min": int, "token_len_max": int, "markov_order": int, "d_feat": int,
    # model
    "d_model": int, "n_heads": int, "d_ff": int, "enc_layers": int, "dec_layers": int,
    "decoder_kind": str, "max_len": int, "conv_layers": int, "conv_kernel": int,
    "conv_stride": int, "dropout": float,
    # training
    "lambda_ctc": float, "warmup_steps": int, "peak_lr": float, "warm_phase_updates": int,
    "max_epochs": int, "patience": int, "avg_last_k": int, "batch_size": int,
    "label_smoothing": float, "decoder_policy": str,
    "init_decoder_from": str, "init_encoder_from": str,
    # decoding
    "mu": float, "lm_weight": float, "beam_size": int, "max_len_ratio": float,
    "model_ckpt": str, "lm_ckpt": str, "split": str, "output": str,
}

DEFAULTS: dict = {
    "seed": 0, "data_dir": "data", "out_dir": "run",
    "vocab_size": 16, "n_utts": 2000, "noise_sigma": 0.3,
    "frames_per_token_min": 6, "frames_per_token_max": 10,
    "token_len_min": 3, "token_len_max": 12, "markov_order": 1, "d_feat": 8,
    "d_model": 32, "n_heads": 4, "d_ff": 64, "enc_layers": 2, "dec_layers": 2,
    "decoder_kind": "onecross", "max_len": 64, "conv_layers": 2, "conv_kernel": 3,
    "conv_stride": 2, "dropout": 0.0,
    "lambda_ctc": 0.3, "warmup_steps": 400, "peak_lr": 1e-3, "warm_phase_updates": 200,
    "max_epochs": 15, "patience": 3, "avg_last_k": 5, "batch_size": 8,
    "label_smoothing": 0.0, "decoder_policy": "fixed",
    "init_decoder_from": "", "init_encoder_from": "",
    "mu": 0.5, "lm_weight": 0.3, "beam_size": 10, "max_len_ratio": 1.0,
    "model_ckpt": "", "lm_ckpt": "", "split": "test", "output": "",
}


def _convert(key: str, raw: str):
    typ = KEY_TYPES[key]
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}")


def resolve_settings(args: argparse.Namespace) -> dict:
    """defaults < config file < CLI flags."""
    settings = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            if key not in KEY_TYPES:
                raise UsageError(
                    f"unknown config key {key!r}; valid keys: {', '.join(sorted(KEY_TYPES))}"
                )
            settings[key] = _convert(key, raw)
    for key in KEY_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _add_keys(parser: argparse.ArgumentParser, keys, aliases: dict | None = None):
    aliases = aliases or {}
    parser.add_argument("--config", help="key = value config file")
    for key in keys:
        flag = aliases.get(key, "--" + key.replace("_", "-"))
        parser.add_argument(flag, dest=key, type=KEY_TYPES[key], default=None)


def _corpus_config(s: dict) -> CorpusConfig:
    return CorpusConfig(
        vocab_size=s["vocab_size"], n_utts=s["n_utts"], seed=s["seed"],
        noise_sigma=s["noise_sigma"],
        frames_per_token_min=s["frames_per_token_min"],
        frames_per_token_max=s["frames_per_token_max"],
        token_len_min=s["token_len_min"], token_len_max=s["token_len_max"],
        markov_order=s["markov_order"], d_feat=s["d_feat"],
    )


def _model_config(s: dict, vocab: Vocab) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab.vocab_size, d_model=s["d_model"], n_heads=s["n_heads"],
        d_ff=s["d_ff"], enc_layers=s["enc_layers"], dec_layers=s["dec_layers"],
        decoder_kind=s["decoder_kind"], d_feat=s["d_feat"], max_len=s["max_len"],
        conv_layers=s["conv_layers"], conv_kernel=s["conv_kernel"],
        conv_stride=s["conv_stride"], dropout=s["dropout"],
    )


def _train_config(s: dict) -> TrainConfig:
    return TrainConfig(
        lambda_ctc=s["lambda_ctc"], warmup_steps=s["warmup_steps"], peak_lr=s["peak_lr"],
        warm_phase_updates=s["warm_phase_updates"], max_epochs=s["max_epochs"],
        patience=s["patience"], avg_last_k=s["avg_last_k"], batch_size=s["batch_size"],
        seed=s["seed"], label_smoothing=s["label_smoothing"],
    )


def _decode_config(s: dict) -> DecodeConfig:
    return DecodeConfig(mu=s["mu"], lm_weight=s["lm_weight"], beam_size=s["beam_size"],
                        max_len_ratio=s["max_len_ratio"])


def _load_vocab(s: dict) -> Vocab:
    return Vocab.load(Path(s["data_dir"]) / "vocab.txt")


def _build_model(s: dict, vocab: Vocab) -> Recognizer:
    return Recognizer(_model_config(s, vocab), seed=s["seed"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    s = resolve_settings(args)
    bundle = gen_corpus(_corpus_config(s))
    out = Path(s["data_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(bundle, out)
    print(f"wrote {len(bundle.train)} train / {len(bundle.dev)} dev / "
          f"{len(bundle.test)} test utterances, {len(bundle.lm_train)} LM lines -> {out}")
    return 0


def cmd_pretrain_lm(args) -> int:
    s = resolve_settings(args)
    vocab = _load_vocab(s)
    lm_train = load_lm_corpus(s["data_dir"], "lm_train")
    lm_dev = load_lm_corpus(s["data_dir"], "lm_dev")
    lm_cfg = LmConfig(vocab.vocab_size, s["d_model"], s["n_heads"], s["d_ff"],
                      s["dec_layers"], s["max_len"], s["dropout"])
    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    lm, donor, records = pretrain_lm(lm_train, lm_dev, vocab, lm_cfg, _train_config(s),
                                     log_fh=sys.stdout)
    with open(out / "lm_train.log", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.format() + "\n")
    donor_path = out / "lm_donor.bin"
    save_checkpoint(donor, donor_path)
    ppl = lm_perplexity(lm, lm_dev, vocab)
    uni = unigram_perplexity(lm_train, lm_dev, vocab)
    print(f"dev perplexity {ppl:.4f} (unigram baseline {uni:.4f})")
    print(f"donor checkpoint -> {donor_path}")
    return 0


def cmd_train(args) -> int:
    from .report import render_training_curves

    s = resolve_settings(args)
    vocab = _load_vocab(s)
    train_utts = load_split(s["data_dir"], "train")
    dev_utts = load_split(s["data_dir"], "dev")
    model = _build_model(s, vocab)
    if s["init_decoder_from"]:
        init_from_lm(model, load_checkpoint(s["init_decoder_from"]))
    if s["init_encoder_from"]:
        load_encoder_group(model, load_checkpoint(s["init_encoder_from"]))
    out = Path(s["out_dir"])
    result = train_epochs(model, train_utts, dev_utts, vocab, _train_config(s),
                          policy=s["decoder_policy"], out_dir=out, log_fh=sys.stdout)
    figure = render_training_curves(result.records, out / "training_curve.png")
    print(f"checkpoints -> {out} ({len(result.checkpoint_paths)} epochs"
          f"{', stopped early' if result.stopped_early else ''}); curve -> {figure}")
    return 0


def cmd_decode(args) -> int:
    s = resolve_settings(args)
    if not s["model_ckpt"]:
        raise UsageError("decode needs model_ckpt (config key or --model-ckpt)")
    vocab = _load_vocab(s)
    model = _build_model(s, vocab)
    model.params.load_state(load_checkpoint(s["model_ckpt"]))
    lm = None
    if s["lm_ckpt"] and s["lm_weight"] > 0.0:
        lm_cfg = LmConfig(vocab.vocab_size, s["d_model"], s["n_heads"], s["d_ff"],
                          s["dec_layers"], s["max_len"])
        lm_params = ModelParams(s["seed"])
        lm = CausalLanguageModel(lm_params, lm_cfg)
        lm_params.load_state(load_checkpoint(s["lm_ckpt"]))
    dcfg = _decode_config(s)
    utts = load_split(s["data_dir"], s["split"])
    out_path = Path(s["output"]) if s["output"] else Path(s["out_dir"]) / f"hyp_{s['split']}.txt"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n_warn = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for u in utts:
            result = decode_utterance(model, lm, u.feats, dcfg)
            n_warn += int(result.warning)
            hyp_ids = result.best.char_ids(model.cfg.sos_id, model.cfg.eos_id)
            fh.write(format_decode_line(u.utt_id, vocab.decode(hyp_ids), result.scores[0]) + "\n")
    print(f"decoded {len(utts)} utterances -> {out_path}"
          + (f" ({n_warn} unfinished within length budget)" if n_warn else ""))
    return 0


def _read_token_file(path) -> dict[str, list[str]]:
    """utt_id<TAB>space-joined tokens[<TAB>ignored...] per line."""
    table: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected 'utt_id<TAB>tokens'")
        table[parts[0]] = parts[1].split()
    return table


def cmd_eval_cer(args) -> int:
    hyps = _read_token_file(args.hyp)
    refs = _read_token_file(args.ref)
    pairs = []
    per_utt = []
    for utt_id, ref in refs.items():
        if not ref:
            raise ValueError(f"empty reference for {utt_id!r}")
        if utt_id not in hyps:
            raise ValueError(f"hypothesis file is missing utt_id {utt_id!r}")
        hyp = hyps[utt_id]
        pairs.append((hyp, ref))
        per_utt.append((utt_id, levenshtein(hyp, ref) / len(ref)))
    overall = corpus_cer(pairs)
    print(f"{overall:.4f}")
    if getattr(args, "report", None):
        from .report import render_cer_histogram

        report_dir = Path(args.report)
        report_dir.mkdir(parents=True, exist_ok=True)
        with open(report_dir / "per_utt_cer.tsv", "w", encoding="utf-8") as fh:
            for utt_id, value in per_utt:
                fh.write(f"{utt_id}\t{value:.6f}\n")
        render_cer_histogram([v for _, v in per_utt], overall, report_dir / "cer_hist.png")
    return 0


def cmd_avg_ckpt(args) -> int:
    state = average_checkpoints(args.inputs)
    save_checkpoint(state, args.out)
    print(f"averaged {len(args.inputs)} checkpoints -> {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    results = gradient_suite(h=args.h, tol=args.tol)
    all_ok = True
    for name, report in results:
        status = "pass" if report.passed else "FAIL"
        print(f"{status}  {name:24s} max rel err {report.max_rel_err:.3e} (tol {report.tol:g})")
        all_ok &= report.passed
    return 0 if all_ok else 2


def cmd_param_count(args) -> int:
    s = resolve_settings(args)
    vocab = Vocab.of_size(s["vocab_size"])
    model = _build_model(s, vocab)
    groups = ("encoder.conv", "encoder.context", "decoder", "ctc_head")
    for g in groups:
        print(f"{g:16s} {param_count(model.params, g):>12,}")
    total = param_count(model.params)
    cfg = model.cfg
    print(f"{'total':16s} {total:>12,}  (analytic {analytic_total(cfg):,})")
    if cfg.decoder_kind == "onecross":
        print(f"vanilla-decoder surplus at this config: {analytic_decoder_delta(cfg):,}")
    if args.preset == "full":
        one = analytic_total(full_scale_config("onecross"))
        van = analytic_total(full_scale_config("vanilla"))
        print(f"full-scale preset: one-cross total {one:,} vs vanilla total {van:,} "
              f"({'one-cross smaller' if one < van else 'vanilla smaller'})")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="onecross", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _add_keys(p, ["seed", "data_dir", "vocab_size", "n_utts", "noise_sigma",
                  "frames_per_token_min", "frames_per_token_max",
                  "token_len_min", "token_len_max", "markov_order", "d_feat"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-lm", help="train the causal LM donor")
    _add_keys(p, ["seed", "data_dir", "out_dir", "d_model", "n_heads", "d_ff",
                  "dec_layers", "max_len", "dropout", "warmup_steps", "peak_lr",
                  "max_epochs", "patience", "batch_size", "label_smoothing"])
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("train", help="train the recognizer")
    _add_keys(p, ["seed", "data_dir", "out_dir", "d_model", "n_heads", "d_ff",
                  "enc_layers", "dec_layers", "decoder_kind", "max_len", "conv_layers",
                  "conv_kernel", "conv_stride", "dropout", "d_feat",
                  "lambda_ctc", "warmup_steps", "peak_lr", "warm_phase_updates",
                  "max_epochs", "patience", "avg_last_k", "batch_size",
                  "label_smoothing", "decoder_policy",
                  "init_decoder_from", "init_encoder_from"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="joint beam-search decoding")
    _add_keys(p, ["seed", "data_dir", "out_dir", "d_model", "n_heads", "d_ff",
                  "enc_layers", "dec_layers", "decoder_kind", "max_len", "conv_layers",
                  "conv_kernel", "conv_stride", "d_feat",
                  "mu", "lm_weight", "max_len_ratio", "model_ckpt", "lm_ckpt",
                  "split", "output"],
              aliases={})
    p.add_argument("--beam", dest="beam_size", type=int, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-cer", help="character error rate between two token files")
    p.add_argument("hyp")
    p.add_argument("ref")
    p.add_argument("--report", help="directory for per-utterance TSV + histogram figure")
    p.set_defaults(func=cmd_eval_cer)

    p = sub.add_parser("avg-ckpt", help="elementwise-average checkpoints")
    p.add_argument("out")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_avg_ckpt)

    p = sub.add_parser("grad-check", help="run the gradient-check suite")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("param-count", help="parameter accounting")
    _add_keys(p, ["seed", "vocab_size", "d_model", "n_heads", "d_ff", "enc_layers",
                  "dec_layers", "decoder_kind", "max_len", "conv_layers", "conv_kernel",
                  "conv_stride", "d_feat"])
    p.add_argument("--preset", choices=["full"], default=None)
    p.set_defaults(func=cmd_param_count)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
