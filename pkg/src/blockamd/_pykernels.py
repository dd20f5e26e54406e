"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``."""

import math

import numpy as np

_NINF = -math.inf


def _lae(a, b):
    if a == _NINF:
        return b
    if b == _NINF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def ctc_alpha_beta(logprobs, ext):
    T, S = logprobs.shape[0], len(ext)
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    if T == 0 or S == 0:
        return alpha, beta
    ext = np.asarray(ext, dtype=np.int64)
    emit = logprobs[:, ext]
    # skip transition s-2 -> s is legal only onto a label differing from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != ext[0]) & (ext[2:] != ext[:-2])
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[skip] = np.logaddexp(a[skip], prev[:-2][skip[2:]])
        alpha[t] = a + emit[t]
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_fwd = np.zeros(S, dtype=bool)
    skip_fwd[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[skip_fwd] = np.logaddexp(b[skip_fwd], nxt[2:][skip_fwd[:-2]])
        beta[t] = b + emit[t]
    return alpha, beta


def prefix_extend(logprobs, prev_nb, prev_b, token, blank, empty_prefix, repeat):
    T = logprobs.shape[0]
    nb = [_NINF] * T
    b = [_NINF] * T
    if T == 0:
        return np.array(nb), np.array(b), _NINF
    emit_c = logprobs[:, token].tolist()
    emit_blank = logprobs[:, blank].tolist()
    pnb = prev_nb.tolist()
    pb = prev_b.tolist()
    if empty_prefix:
        nb[0] = emit_c[0]
    psi = nb[0]
    for t in range(1, T):
        phi = pb[t - 1] if repeat else _lae(pb[t - 1], pnb[t - 1])
        if phi != _NINF or nb[t - 1] != _NINF:
            nb[t] = _lae(nb[t - 1], phi) + emit_c[t]
        if nb[t - 1] != _NINF or b[t - 1] != _NINF:
            b[t] = _lae(nb[t - 1], b[t - 1]) + emit_blank[t]
        if phi != _NINF:
            psi = _lae(psi, phi + emit_c[t])
    return np.array(nb), np.array(b), psi


def edit_distance(ref, hyp):
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i in range(1, len(ref) + 1):
        cur = [i] + [0] * len(hyp)
        for j in range(1, len(hyp) + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ref[i - 1] != hyp[j - 1]))
        prev = cur
    return prev[-1]
