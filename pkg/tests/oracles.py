"""Independent brute-force oracles (no shared code with the package under test)."""

from itertools import product

import numpy as np


def collapse(path, blank=0):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def labelling_logprobs(logprobs):
    """log P(labelling) for every labelling reachable by some frame path."""
    T, V = logprobs.shape
    acc = {}
    for path in product(range(V), repeat=T):
        lp = sum(logprobs[t, s] for t, s in enumerate(path))
        acc.setdefault(collapse(path), []).append(lp)
    return {k: float(np.logaddexp.reduce(v)) for k, v in acc.items()}


def ctc_nll(logprobs, target):
    table = labelling_logprobs(logprobs)
    target = tuple(target)
    return -table[target] if target in table else np.inf


def prefix_logmass(logprobs, prefix):
    """log of the total probability of labellings that start with ``prefix``."""
    prefix = tuple(prefix)
    hits = [v for k, v in labelling_logprobs(logprobs).items() if k[:len(prefix)] == prefix]
    return float(np.logaddexp.reduce(hits)) if hits else -np.inf


def random_logprobs(rng, T, V):
    p = rng.dirichlet(np.ones(V), size=T)
    return np.log(p)


def levenshtein(a, b):
    """Plain recursive-table edit distance."""
    a, b = list(a), list(b)
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[len(a)][len(b)]
