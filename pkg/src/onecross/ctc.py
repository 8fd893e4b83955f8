"""CTC: alignment-summing loss, best-path collapse, and the incremental
prefix scorer used during joint beam search.

All dynamic programming runs in the log domain over the blank-expanded label
sequence. The loss op carries a hand-derived gradient (state-occupancy form)
that the finite-difference oracle validates in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import LOG_ZERO, ShapeError, Tensor


@dataclass
class CtcPosterior:
    """Per-frame log-probabilities over vocab+blank; blank is the last column."""

    log_probs: Tensor

    def __post_init__(self):
        if self.log_probs.data.ndim != 2:
            raise ShapeError(f"posterior must be [T x V+1], got {self.log_probs.shape}")

    @property
    def n_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def blank_id(self) -> int:
        return self.log_probs.shape[1] - 1


def posterior_from_logits(ctc_logits: Tensor) -> CtcPosterior:
    return CtcPosterior(nm.log_softmax(ctc_logits, axis=-1))


def _validate_targets(targets, blank: int):
    for z in targets:
        if not 0 <= z < blank:
            raise ShapeError(f"target id {z} out of range (blank is {blank})")


def min_feasible_frames(targets) -> int:
    """Shortest path length: every label once plus a blank between repeats."""
    reps = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + reps


def _expand(targets, blank: int) -> np.ndarray:
    ext = np.full(2 * len(targets) + 1, blank, dtype=np.intp)
    ext[1::2] = targets
    return ext


def ctc_loss(posterior: CtcPosterior, targets):
    """-log p(targets | posterior), differentiable w.r.t. the log-probs.

    Infeasible targets (too few frames for the labels plus mandatory blanks
    between repeats) return the plain float +inf so batch code can skip them.
    """
    targets = [int(z) for z in targets]
    blank = posterior.blank_id
    _validate_targets(targets, blank)
    x = posterior.log_probs.data
    T = x.shape[0]
    if T < min_feasible_frames(targets):
        return math.inf

    ext = _expand(targets, blank)
    S = ext.size
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), LOG_ZERO)
    alpha[0, 0] = x[0, blank]
    if S > 1:
        alpha[0, 1] = x[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        skip = np.where(can_skip[2:], prev[:-2], LOG_ZERO)
        acc[2:] = np.logaddexp(acc[2:], skip)
        alpha[t] = x[t, ext] + acc

    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = np.logaddexp(log_p, alpha[T - 1, S - 2])
    log_p = float(log_p)

    beta = np.full((T, S), LOG_ZERO)
    beta[T - 1, S - 1] = x[T - 1, blank]
    if S > 1:
        beta[T - 1, S - 2] = x[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        skip = np.where(can_skip[2:], nxt[2:], LOG_ZERO)
        acc[:-2] = np.logaddexp(acc[:-2], skip)
        beta[t] = x[t, ext] + acc

    lp_tensor = posterior.log_probs

    def bwd(g):
        # occupancy gamma[t,k] = sum over states s with label k of
        # alpha[t,s] * beta[t,s] / x[t,s], normalized by total probability;
        # d(-log P)/dx[t,k] = -gamma[t,k].
        contrib = alpha + beta - x[:, ext]
        acc = np.full_like(x, LOG_ZERO)
        for s in range(S):
            acc[:, ext[s]] = np.logaddexp(acc[:, ext[s]], contrib[:, s])
        return (float(g) * -np.exp(acc - log_p),)

    return nm.emit("ctc_loss", np.asarray(-log_p), (lp_tensor,), bwd)


def ctc_greedy_decode(posterior: CtcPosterior) -> list[int]:
    """Best path: per-frame argmax, collapse repeats, drop blanks."""
    blank = posterior.blank_id
    path = np.argmax(posterior.log_probs.data, axis=-1)
    out = []
    prev = -1
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return out


# ---------------------------------------------------------------------------
# incremental prefix scoring


@dataclass
class PrefixScorerState:
    """Per-prefix forward mass split by how the path ends at each frame.

    r_nb[t]: log-prob of frame paths of length t+1 that collapse to the prefix
    and end on its last label; r_b[t]: same but ending on blank. score is the
    cumulative log prefix probability F(g) = log p(collapsed output begins
    with g).
    """

    r_nb: np.ndarray
    r_b: np.ndarray
    last: int | None
    score: float


class CtcPrefixScorer:
    """Incremental p(collapsed output begins with g) over a fixed posterior."""

    def __init__(self, posterior: CtcPosterior):
        self.x = np.asarray(posterior.log_probs.data, dtype=np.float64)
        self.blank = posterior.blank_id
        self.n_frames = self.x.shape[0]

    def initial_state(self) -> PrefixScorerState:
        r_b = np.cumsum(self.x[:, self.blank])
        r_nb = np.full(self.n_frames, LOG_ZERO)
        return PrefixScorerState(r_nb=r_nb, r_b=r_b, last=None, score=0.0)

    def extend(self, state: PrefixScorerState, candidates) -> tuple[np.ndarray, list[PrefixScorerState]]:
        """Score extending the prefix by each candidate label.

        Returns (incremental log scores [C], child states [C]); incremental
        score is F(g . c) - F(g). Blank is not a label.
        """
        cs = np.asarray(candidates, dtype=np.intp)
        if cs.ndim != 1 or cs.size == 0:
            raise ShapeError("candidates must be a nonempty flat sequence")
        if np.any(cs == self.blank) or np.any(cs < 0) or np.any(cs >= self.x.shape[1]):
            raise ShapeError("candidates must be labels (blank is not a label)")
        T, C = self.n_frames, cs.size
        x_c = self.x[:, cs]  # [T, C]

        # phi[t, c]: mass of parent paths after frame t that a fresh emission
        # of c at frame t+1 may extend (repeat labels need a blank bridge).
        phi = np.logaddexp(state.r_b, state.r_nb)[:, None].repeat(C, axis=1)
        if state.last is not None:
            same = cs == state.last
            if same.any():
                phi[:, same] = state.r_b[:, None]
        start = 0.0 if state.last is None else LOG_ZERO

        new_nb = np.empty((T, C))
        new_b = np.empty((T, C))
        first_emit = np.empty((T, C))
        first_emit[0] = x_c[0] + start
        new_nb[0] = first_emit[0]
        new_b[0] = LOG_ZERO
        blank_col = self.x[:, self.blank]
        for t in range(1, T):
            first_emit[t] = x_c[t] + phi[t - 1]
            new_nb[t] = np.logaddexp(new_nb[t - 1] + x_c[t], first_emit[t])
            new_b[t] = blank_col[t] + np.logaddexp(new_b[t - 1], new_nb[t - 1])

        # F(g.c) = log sum over t of p(first completed exactly at frame t)
        m = first_emit.max(axis=0)
        safe = np.maximum(m, LOG_ZERO)
        scores_abs = np.where(
            m <= LOG_ZERO, LOG_ZERO,
            safe + np.log(np.exp(first_emit - safe).sum(axis=0)),
        )
        incr = scores_abs - state.score
        children = [
            PrefixScorerState(
                r_nb=new_nb[:, j].copy(), r_b=new_b[:, j].copy(),
                last=int(cs[j]), score=float(scores_abs[j]),
            )
            for j in range(C)
        ]
        return incr, children

    def eos_score(self, state: PrefixScorerState) -> float:
        """log p(collapsed output equals the prefix exactly) - F(g)."""
        complete = float(np.logaddexp(state.r_nb[-1], state.r_b[-1]))
        return complete - state.score
