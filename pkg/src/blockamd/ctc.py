"""CTC loss, greedy collapse decoding and incremental prefix scoring.

Blank is token id 0 throughout.  Everything is accumulated in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, custom

BLANK = 0


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CTCPrefixState:
    """Forward variables of a label prefix over all frames.

    ``p_nonblank_end[t]`` / ``p_blank_end[t]`` are log masses of frame paths
    ``1..t`` that collapse to ``prefix`` and end in a non-blank / blank.
    ``score`` is the log mass of every complete labelling starting with
    ``prefix``.
    """

    prefix: tuple
    p_nonblank_end: np.ndarray
    p_blank_end: np.ndarray
    score: float
    frame_cursor: int

    @property
    def final_logprob(self):
        """log P(labelling == prefix exactly)."""
        if self.frame_cursor == 0:
            return 0.0 if not self.prefix else -np.inf
        return float(np.logaddexp(self.p_nonblank_end[-1], self.p_blank_end[-1]))


def _as_array(logprobs):
    if isinstance(logprobs, Tensor):
        logprobs = logprobs.data
    return np.ascontiguousarray(logprobs, dtype=np.float64)


def initial_state(logprobs):
    lp = _as_array(logprobs)
    T = lp.shape[0]
    return CTCPrefixState((), _readonly(np.full(T, -np.inf)),
                          _readonly(np.cumsum(lp[:, BLANK])), 0.0, T)


def ctc_prefix_extend(state, token, logprobs):
    """Return ``(new_state, alpha_ctc)`` for ``state.prefix + (token,)``."""
    token = int(token)
    if token == BLANK:
        raise ValueError("cannot extend a CTC prefix with the blank token")
    lp = _as_array(logprobs)
    repeat = bool(state.prefix) and state.prefix[-1] == token
    nb, b, psi = kernels.prefix_extend(lp, state.p_nonblank_end, state.p_blank_end,
                                       token, BLANK, not state.prefix, repeat)
    # prefix mass is monotone; clamp rounding noise so extensions never gain mass
    psi = min(float(psi), state.score)
    new = CTCPrefixState(state.prefix + (token,), _readonly(nb), _readonly(b), psi, lp.shape[0])
    return new, psi


def prefix_score(prefix, logprobs):
    lp = _as_array(logprobs)
    state = initial_state(lp)
    for tok in prefix:
        state, _ = ctc_prefix_extend(state, tok, lp)
    return state


def min_frames(target):
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(logprobs, target):
    """Negative log-likelihood of ``target`` under frame log-probs ``logprobs``.

    Returns ``(loss, feasible)``.  ``loss`` is a scalar Tensor that backprops
    into ``logprobs`` when it is a Tensor.  An infeasible target (too long for
    the frame count) gives ``inf`` and ``feasible=False`` with no graph.
    """
    lp_t = as_tensor(logprobs)
    lp = np.ascontiguousarray(lp_t.data)
    target = [int(t) for t in target]
    if any(t == BLANK for t in target):
        raise ValueError("CTC target must not contain blank")
    T = lp.shape[0]
    if min_frames(target) > T:
        return Tensor(np.inf), False
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    alpha, beta = kernels.ctc_alpha_beta(lp, ext)
    S = len(ext)
    logp = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(logp):
        return Tensor(np.inf), False

    def bw(g):
        occ = alpha + beta - lp[:, ext] - logp
        grad = np.zeros_like(lp)
        np.add.at(grad, (slice(None), ext), np.exp(occ))
        return (-float(g) * grad,)

    return custom(np.array(-logp), (lp_t,), bw, "ctc_loss"), True


def ctc_greedy(logprobs):
    """Frame argmax (lowest id wins ties), collapse repeats, drop blanks."""
    best = np.argmax(_as_array(logprobs), axis=1)
    out = []
    prev = None
    for tok in best.tolist():
        if tok != prev and tok != BLANK:
            out.append(tok)
        prev = tok
    return tuple(out)
