"""Joint CTC/attention beam search with optional shallow-fusion LM, plus
edit-distance scoring.

The ranking key interpolates the CTC prefix score with the decoder score
(weight mu against 1-mu); the external LM term is additive on top with its
own weight. Scorers are pluggable so single-scorer searches fall out of the
same loop by zeroing weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .ctc import CtcPosterior, CtcPrefixScorer, PrefixScorerState, posterior_from_logits
from .model import CausalLanguageModel, Recognizer
from .numerics import Tensor


@dataclass(frozen=True)
class DecodeConfig:
    mu: float = 0.5            # CTC weight; decoder score gets 1 - mu
    lm_weight: float = 0.3
    beam_size: int = 10
    max_len_ratio: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must be in [0, 1], got {self.mu}")
        if self.lm_weight < 0.0:
            raise ValueError("lm_weight must be >= 0")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len_ratio <= 0.0:
            raise ValueError("max_len_ratio must be positive")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]    # includes SOS; EOS terminal when finished
    att_logp: float = 0.0
    ctc_logp: float = 0.0
    lm_logp: float = 0.0
    ctc_state: PrefixScorerState | None = None
    finished: bool = False

    def char_ids(self, sos_id: int, eos_id: int) -> list[int]:
        return [t for t in self.tokens if t not in (sos_id, eos_id)]


def joint_score(h: Hypothesis, cfg: DecodeConfig) -> float:
    return cfg.mu * h.ctc_logp + (1.0 - cfg.mu) * h.att_logp + cfg.lm_weight * h.lm_logp


@dataclass
class BeamSearchResult:
    ranked: list[Hypothesis] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    warning: bool = False      # nothing finished within the length budget

    @property
    def best(self) -> Hypothesis:
        return self.ranked[0]


def _next_log_probs(decoder, enc_out: Tensor, prefix) -> np.ndarray:
    with nm.no_grad():
        logits = decoder(enc_out, list(prefix))
        return nm.log_softmax(logits, axis=-1).data[-1]


def beam_search(enc_out: Tensor, posterior: CtcPosterior, decoder,
                lm: CausalLanguageModel | None, cfg: DecodeConfig) -> BeamSearchResult:
    """Expand hypotheses breadth-first, ranking every proposal by the joint
    incremental score. An EOS proposal finishes a hypothesis with the CTC
    sequence-termination score applied. Ties break lexicographically on the
    token sequence, so results are platform-independent.
    """
    mcfg = decoder.cfg
    sos, eos = mcfg.sos_id, mcfg.eos_id
    n_chars = mcfg.vocab_size - 2
    chars = np.arange(n_chars)
    budget = max(1, int(cfg.max_len_ratio * posterior.n_frames))

    use_ctc = cfg.mu > 0.0
    use_lm = lm is not None and cfg.lm_weight > 0.0
    scorer = CtcPrefixScorer(posterior)
    root = Hypothesis(tokens=(sos,), ctc_state=scorer.initial_state())

    live = [root]
    finished: list[Hypothesis] = []
    while live:
        proposals: list[Hypothesis] = []
        for h in live:
            att_lp = _next_log_probs(decoder, enc_out, h.tokens)
            lm_lp = lm.next_log_probs(list(h.tokens)) if use_lm else None
            eos_ctc = scorer.eos_score(h.ctc_state) if use_ctc else 0.0
            proposals.append(Hypothesis(
                tokens=h.tokens + (eos,),
                att_logp=h.att_logp + float(att_lp[eos]),
                ctc_logp=h.ctc_logp + eos_ctc,
                lm_logp=h.lm_logp + (float(lm_lp[eos]) if use_lm else 0.0),
                ctc_state=h.ctc_state,
                finished=True,
            ))
            if len(h.tokens) - 1 < budget:
                if use_ctc:
                    incs, kids = scorer.extend(h.ctc_state, chars)
                else:
                    incs, kids = np.zeros(n_chars), [h.ctc_state] * n_chars
                for c in range(n_chars):
                    proposals.append(Hypothesis(
                        tokens=h.tokens + (c,),
                        att_logp=h.att_logp + float(att_lp[c]),
                        ctc_logp=h.ctc_logp + float(incs[c]),
                        lm_logp=h.lm_logp + (float(lm_lp[c]) if use_lm else 0.0),
                        ctc_state=kids[c],
                        finished=False,
                    ))
        proposals.sort(key=lambda h: (-joint_score(h, cfg), h.tokens))
        kept = proposals[:cfg.beam_size]
        live = []
        for h in kept:
            (finished if h.finished else live).append(h)

    result = BeamSearchResult()
    if finished:
        finished.sort(key=lambda h: (-joint_score(h, cfg), h.tokens))
        result.ranked = finished
    else:
        result.warning = True
        result.ranked = sorted(live, key=lambda h: (-joint_score(h, cfg), h.tokens))
    result.scores = [joint_score(h, cfg) for h in result.ranked]
    return result


def decode_utterance(model: Recognizer, lm: CausalLanguageModel | None,
                     feats: np.ndarray, cfg: DecodeConfig) -> BeamSearchResult:
    with nm.no_grad():
        enc_out = model.encode(Tensor(feats))
        posterior = posterior_from_logits(model.ctc_head(enc_out))
    return beam_search(enc_out, posterior, model.decoder, lm, cfg)


def format_decode_line(utt_id: str, tokens: list[str], score: float) -> str:
    return f"{utt_id}\t{' '.join(tokens)}\t{score:.6f}"


# ---------------------------------------------------------------------------
# error rates


def levenshtein(a, b) -> int:
    """Edit distance over arbitrary hashable token sequences."""
    a, b = list(a), list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def cer(hyp, ref) -> float:
    """Edit distance divided by reference length; reference must be nonempty."""
    ref = list(ref)
    if not ref:
        raise ValueError("reference must be nonempty (undefined denominator)")
    return levenshtein(hyp, ref) / len(ref)


def corpus_cer(pairs) -> float:
    """Aggregate CER: total edit distance over total reference length."""
    total_dist = 0
    total_len = 0
    for hyp, ref in pairs:
        ref = list(ref)
        if not ref:
            raise ValueError("reference must be nonempty (undefined denominator)")
        total_dist += levenshtein(hyp, ref)
        total_len += len(ref)
    if total_len == 0:
        raise ValueError("no reference tokens")
    return total_dist / total_len
