"""Joint-objective training: CTC + cross-entropy convex combination, Adam with
a warmup/inverse-sqrt schedule, staged unfreezing, early stopping, per-epoch
checkpoints, and checkpoint averaging. Also the causal-LM pretraining loop
that produces decoder donor checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .ctc import ctc_loss, posterior_from_logits
from .data import Utterance, Vocab, load_checkpoint, save_checkpoint
from .model import (
    CausalLanguageModel,
    LmConfig,
    ModelParams,
    Recognizer,
    apply_freeze_policy,
)
from .numerics import ShapeError, Tensor


@dataclass(frozen=True)
class TrainConfig:
    lambda_ctc: float = 0.3
    warmup_steps: int = 400
    peak_lr: float = 1e-3
    warm_phase_updates: int = 200
    max_epochs: int = 15
    patience: int = 3
    avg_last_k: int = 5
    batch_size: int = 8
    seed: int = 0
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ValueError(f"lambda_ctc must be in [0, 1], got {self.lambda_ctc}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.avg_last_k < 1:
            raise ValueError("avg_last_k must be >= 1")
        if self.warm_phase_updates < 0:
            raise ValueError("warm_phase_updates must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")


def full_scale_train_config() -> TrainConfig:
    """The paper-scale schedule: 25000 warm steps, main phase after 10000
    updates, 20 epochs with patience 3, last-10 averaging."""
    return TrainConfig(warmup_steps=25000, warm_phase_updates=10000,
                       max_epochs=20, patience=3, avg_last_k=10)


# ---------------------------------------------------------------------------
# losses and schedule


def mtl_loss(ctc, ce, lam: float):
    """lam * ctc + (1 - lam) * ce. The boundaries return the single loss
    object itself, so single-objective behavior is reproduced exactly."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if lam == 0.0:
        return ce
    if lam == 1.0:
        return ctc
    if isinstance(ctc, Tensor) or isinstance(ce, Tensor):
        ctc = ctc if isinstance(ctc, Tensor) else Tensor(ctc)
        ce = ce if isinstance(ce, Tensor) else Tensor(ce)
        return nm.add(nm.scale(ctc, lam), nm.scale(ce, 1.0 - lam))
    if not (math.isfinite(ctc) and math.isfinite(ce)):
        raise ValueError("mtl_loss needs finite losses (exclude infeasible CTC first)")
    return lam * ctc + (1.0 - lam) * ce


def ce_loss(dec_logits: Tensor, targets, label_smoothing: float = 0.0) -> Tensor:
    """Mean over positions of (optionally label-smoothed) negative
    log-likelihood. Smoothing mixes eps/V of uniform mass into the target."""
    L, V = dec_logits.shape
    ids = [int(t) for t in targets]
    if len(ids) != L:
        raise ShapeError(f"{L} logit rows vs {len(ids)} targets")
    for t in ids:
        if not 0 <= t < V:
            raise ShapeError(f"target id {t} out of vocab (size {V})")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must be in [0, 1)")
    lp = nm.log_softmax(dec_logits, axis=-1)
    eps = label_smoothing
    rows = np.arange(L)
    picked = lp.data[rows, ids]
    value = -(1.0 - eps) * picked.mean()
    if eps:
        value -= eps * lp.data.mean()

    def bwd(g):
        d = np.full((L, V), -eps / (V * L))
        d[rows, ids] -= (1.0 - eps) / L
        return (float(g) * d,)

    return nm.emit("ce_loss", np.asarray(value), (lp,), bwd)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Warmup-then-inverse-sqrt: rises linearly to peak_lr at step == warmup,
    then decays as step^-0.5."""
    if step < 1:
        raise ValueError("step must be >= 1")
    w = cfg.warmup_steps
    return cfg.peak_lr * math.sqrt(w) * min(step ** -0.5, step * w ** -1.5)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over the non-frozen subset of a ModelParams registry.

    Moment accumulators are created lazily, so they exist only for parameters
    that have actually trained; the step counter is shared. Frozen parameters
    are never touched.
    """

    def __init__(self, params: ModelParams, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9, clip_norm: float = 5.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        live = [(p, t) for p, t in self.params.trainable_items() if t.grad is not None]
        if not live:
            return
        sq = sum(float(np.sum(t.grad * t.grad)) for _, t in live)
        norm = math.sqrt(sq)
        gscale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for path, tensor in live:
            g = tensor.grad * gscale
            m = self.m.get(path)
            if m is None:
                m = self.m[path] = np.zeros_like(tensor.data)
                self.v[path] = np.zeros_like(tensor.data)
            v = self.v[path]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# batch losses


def utterance_losses(model: Recognizer, feats: np.ndarray, char_ids: list[int],
                     smoothing: float = 0.0):
    """(ctc_loss | inf, ce_loss) for one utterance."""
    cfg = model.cfg
    prefix = [cfg.sos_id] + char_ids
    targets = char_ids + [cfg.eos_id]
    ctc_logits, dec_logits = model.forward(Tensor(feats), prefix)
    l_ctc = ctc_loss(posterior_from_logits(ctc_logits), char_ids)
    l_ce = ce_loss(dec_logits, targets, smoothing)
    return l_ctc, l_ce


def _mean_tensor(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = nm.add(total, p)
    return nm.scale(total, 1.0 / len(parts))


def batch_mtl_loss(model: Recognizer, batch, lam: float, smoothing: float = 0.0):
    """Mean-over-utterances CTC and CE combined with weight lam. Infeasible
    CTC utterances are excluded from the CTC mean; if none remain the CE term
    stands alone."""
    ctc_parts, ce_parts = [], []
    for feats, char_ids in batch:
        l_ctc, l_ce = utterance_losses(model, feats, char_ids, smoothing)
        ce_parts.append(l_ce)
        if l_ctc != math.inf:
            ctc_parts.append(l_ctc)
    ce_mean = _mean_tensor(ce_parts)
    if lam == 0.0 or not ctc_parts:
        return ce_mean
    ctc_mean = _mean_tensor(ctc_parts)
    return mtl_loss(ctc_mean, ce_mean, lam)


# ---------------------------------------------------------------------------
# training log


@dataclass
class EpochRecord:
    epoch: int
    update: int
    train_mtl: float
    dev_mtl: float
    lr: float

    def format(self) -> str:
        return (f"epoch {self.epoch} update {self.update} "
                f"train_mtl {self.train_mtl:.6f} dev_mtl {self.dev_mtl:.6f} lr {self.lr:.8g}")


def parse_training_log(text: str) -> list[EpochRecord]:
    records = []
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 10 and parts[0] == "epoch":
            records.append(EpochRecord(
                epoch=int(parts[1]), update=int(parts[3]),
                train_mtl=float(parts[5]), dev_mtl=float(parts[7]), lr=float(parts[9]),
            ))
    return records


@dataclass
class TrainResult:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)
    stopped_early: bool = False


# ---------------------------------------------------------------------------
# recognizer training loop


def _encode_dataset(utts: list[Utterance], vocab: Vocab):
    return [(u.feats, vocab.encode(u.transcript)) for u in utts]


def train_epochs(model: Recognizer, train_utts: list[Utterance], dev_utts: list[Utterance],
                 vocab: Vocab, cfg: TrainConfig, policy: str = "fixed",
                 out_dir=None, log_fh=None) -> TrainResult:
    """Run the staged recipe: warm phase (heads + cross group only) for the
    first warm_phase_updates updates, then the main phase; Adam with the
    warmup schedule; per-epoch dev validation, early stopping, and a
    checkpoint per epoch. Writes init.bin, epoch_###.bin, and train.log when
    out_dir is given."""
    if not train_utts:
        raise ValueError("training data is empty")
    train_data = _encode_dataset(train_utts, vocab)
    dev_data = _encode_dataset(dev_utts, vocab)
    rng = np.random.default_rng(cfg.seed)
    params = model.params

    warm = cfg.warm_phase_updates > 0
    apply_freeze_policy(params, "warm" if warm else "main", policy)
    optimizer = Adam(params)
    result = TrainResult()

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params.state(), out / "init.bin")
        log_file = open(out / "train.log", "w", encoding="utf-8")

    def emit_line(line: str):
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()
        if log_fh is not None:
            print(line, file=log_fh)

    update = 0
    best_dev = math.inf
    bad_epochs = 0
    lr = 0.0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(train_data))
            epoch_losses = []
            for lo in range(0, len(order), cfg.batch_size):
                update += 1
                if warm and update == cfg.warm_phase_updates + 1:
                    apply_freeze_policy(params, "main", policy)
                    warm = False
                batch = [train_data[i] for i in order[lo:lo + cfg.batch_size]]
                params.zero_grad()
                loss = batch_mtl_loss(model, batch, cfg.lambda_ctc, cfg.label_smoothing)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite training loss at update {update}")
                loss.backward()
                lr = lr_at(update, cfg)
                optimizer.step(lr)
                epoch_losses.append(value)

            dev_mtl = evaluate_mtl(model, dev_data, cfg.lambda_ctc, cfg.label_smoothing)
            rec = EpochRecord(epoch, update, float(np.mean(epoch_losses)), dev_mtl, lr)
            result.records.append(rec)
            emit_line(rec.format())
            if out is not None:
                path = out / f"epoch_{epoch:03d}.bin"
                save_checkpoint(params.state(), path)
                result.checkpoint_paths.append(path)

            if dev_mtl < best_dev:
                best_dev = dev_mtl
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    result.stopped_early = True
                    break
    finally:
        if log_file is not None:
            log_file.close()
    return result


def evaluate_mtl(model: Recognizer, dev_data, lam: float, smoothing: float = 0.0) -> float:
    """Mean validation loss: lam * mean(feasible CTC) + (1-lam) * mean(CE)."""
    ctc_vals, ce_vals = [], []
    with nm.no_grad():
        for feats, char_ids in dev_data:
            l_ctc, l_ce = utterance_losses(model, feats, char_ids, smoothing)
            ce_vals.append(l_ce.item())
            if l_ctc != math.inf:
                ctc_vals.append(l_ctc.item())
    ce_mean = float(np.mean(ce_vals))
    if lam == 0.0 or not ctc_vals:
        return ce_mean
    return mtl_loss(float(np.mean(ctc_vals)), ce_mean, lam)


# ---------------------------------------------------------------------------
# checkpoint averaging


def average_checkpoints(paths) -> dict[str, np.ndarray]:
    """Elementwise mean of named tensors across checkpoints. All files must
    carry identical path sets and shapes. Computed as first + mean(diffs), so
    k identical checkpoints average to themselves bitwise."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("no checkpoints to average")
    states = [load_checkpoint(p) for p in paths]
    ref = states[0]
    ref_keys = set(ref)
    for p, st in zip(paths[1:], states[1:]):
        if set(st) != ref_keys:
            diff = sorted(ref_keys.symmetric_difference(st))
            raise ValueError(f"{p}: parameter path mismatch: {diff[:6]}")
        for k in ref:
            if st[k].shape != ref[k].shape:
                raise ValueError(f"{p}: shape mismatch at {k}: {st[k].shape} vs {ref[k].shape}")
    k = len(states)
    out = {}
    for name, first in ref.items():
        acc = np.zeros_like(first)
        for st in states[1:]:
            acc += st[name] - first
        out[name] = first + acc / k
    return out


# ---------------------------------------------------------------------------
# causal-LM pretraining (decoder donor)


def _lm_losses(lm: CausalLanguageModel, seqs_ids: list[list[int]], smoothing: float):
    parts = []
    for ids in seqs_ids:
        prefix = [lm.cfg.sos_id] + ids
        targets = ids + [lm.cfg.eos_id]
        parts.append(ce_loss(lm(prefix), targets, smoothing))
    return parts


def pretrain_lm(lm_train: list[list[str]], lm_dev: list[list[str]], vocab: Vocab,
                lm_cfg: LmConfig, cfg: TrainConfig, log_fh=None):
    """Next-token training of the causal LM. Returns (lm, donor_state,
    records); donor_state is the best-dev parameter set and contains exactly
    the decoder-initializable group paths."""
    if not lm_train:
        raise ValueError("LM corpus is empty")
    train_ids = [vocab.encode(seq) for seq in lm_train]
    dev_ids = [vocab.encode(seq) for seq in lm_dev]
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams(cfg.seed)
    lm = CausalLanguageModel(params, lm_cfg)
    optimizer = Adam(params)

    update = 0
    best_dev = math.inf
    best_state = params.state()
    bad_epochs = 0
    records = []
    lr = 0.0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_ids))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            update += 1
            params.zero_grad()
            batch = [train_ids[i] for i in order[lo:lo + cfg.batch_size]]
            loss = _mean_tensor(_lm_losses(lm, batch, cfg.label_smoothing))
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite LM loss at update {update}")
            loss.backward()
            lr = lr_at(update, cfg)
            optimizer.step(lr)
            epoch_losses.append(value)
        with nm.no_grad():
            dev_vals = [p.item() for p in _lm_losses(lm, dev_ids, 0.0)]
        dev_mean = float(np.mean(dev_vals))
        rec = EpochRecord(epoch, update, float(np.mean(epoch_losses)), dev_mean, lr)
        records.append(rec)
        if log_fh is not None:
            print(rec.format(), file=log_fh)
        if dev_mean < best_dev:
            best_dev = dev_mean
            best_state = params.state()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    params.load_state(best_state)
    return lm, best_state, records


def lm_perplexity(lm: CausalLanguageModel, seqs: list[list[str]], vocab: Vocab) -> float:
    """exp(mean per-token NLL) over sequences, EOS included as a position."""
    total_nll = 0.0
    n_tokens = 0
    with nm.no_grad():
        for seq in seqs:
            ids = vocab.encode(seq)
            lp = nm.log_softmax(lm([lm.cfg.sos_id] + ids), axis=-1).data
            targets = ids + [lm.cfg.eos_id]
            total_nll -= sum(lp[i, t] for i, t in enumerate(targets))
            n_tokens += len(targets)
    return math.exp(total_nll / n_tokens)


def unigram_perplexity(train_seqs: list[list[str]], eval_seqs: list[list[str]],
                       vocab: Vocab) -> float:
    """Add-one-smoothed unigram baseline over the same prediction positions
    (every token plus one EOS per sequence)."""
    counts = np.ones(vocab.vocab_size)
    for seq in train_seqs:
        for t in vocab.encode(seq):
            counts[t] += 1
        counts[vocab.eos_id] += 1
    # SOS is never predicted
    counts[vocab.sos_id] = 0.0
    probs = counts / counts.sum()
    total_nll = 0.0
    n_tokens = 0
    for seq in eval_seqs:
        for t in vocab.encode(seq) + [vocab.eos_id]:
            total_nll -= math.log(probs[t])
            n_tokens += 1
    return math.exp(total_nll / n_tokens)
