"""Decoding: fused CTC+AR greedy/beam search and tripartite AMD block search.

Scores are log domain.  Ranking ties always go to the lexicographically
smaller token sequence so every search is deterministic.

The searches talk to a *scorer* rather than to the model directly.  A scorer
exposes ``ctc_logprobs`` (T' x V), ``vocab_size``, ``candidates`` (real token
ids), ``ar_next(prefixes)``, ``ar_score(seqs)`` and ``amd(rows, start, end)``.
:class:`ModelScorer` wraps a trained model, :class:`TableScorer` provides
random tabular distributions for exhaustive checks.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from .ctc import CTCPrefixState, ctc_greedy, ctc_prefix_extend, initial_state
from .tensor import no_grad

EOS = M.EOS
MASK = M.MASK
FIRST_TOKEN = M.FIRST_TOKEN


# ---------------------------------------------------------------- data types

@dataclass(frozen=True)
class FusionWeights:
    lambda_ctc: float = 0.3
    lambda_amd: float = 0.3
    lambda_ar: float = 0.4

    def __post_init__(self):
        if min(self.lambda_ctc, self.lambda_amd, self.lambda_ar) < 0:
            raise ValueError("fusion weights must be non-negative")

    @classmethod
    def ctc_ar(cls, lambda_ctc=0.7, lambda_ar=0.3):
        return cls(lambda_ctc, 0.0, lambda_ar)

    @classmethod
    def from_split(cls, ctc_amd=0.6, ar=0.4, in_block=(0.3, 0.3)):
        """In-block CTC/AMD weights rescaled so they sum to ``ctc_amd``."""
        total = in_block[0] + in_block[1]
        return cls(ctc_amd * in_block[0] / total, ctc_amd * in_block[1] / total, ar)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    alpha_ctc: float = 0.0
    alpha_ar: float = 0.0
    alpha_amd: float = 0.0
    ctc_state: CTCPrefixState | None = None
    score: float = 0.0
    ended: bool = False
    amd_calls: int = 0


def fused_score_ctc_ar(h, w):
    return w.lambda_ctc * h.alpha_ctc + w.lambda_ar * h.alpha_ar


def in_block_score(h, w):
    return w.lambda_ctc * h.alpha_ctc + w.lambda_amd * h.alpha_amd


def tripartite_score(h, w):
    return w.lambda_ctc * h.alpha_ctc + w.lambda_amd * h.alpha_amd + w.lambda_ar * h.alpha_ar


def rank(hyps, key=lambda h: h.score):
    """Best first; ties by lexicographically smaller tokens."""
    return sorted(hyps, key=lambda h: (-key(h), h.tokens))


@dataclass
class SearchStats:
    amd_calls: int = 0
    amd_rows: int = 0
    ar_calls: int = 0
    ar_rows: int = 0
    ctc_extends: int = 0
    blocks: int = 0

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class NBestList:
    utt_id: str
    hypotheses: list
    stats: SearchStats = field(default_factory=SearchStats)
    empty_input: bool = False

    @property
    def best(self):
        return self.hypotheses[0] if self.hypotheses else None

    def token_lists(self):
        return [list(h.tokens) for h in self.hypotheses]


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class Fixed:
    block: int


@dataclass(frozen=True)
class Mixed:
    n_ar: int
    block: int


@dataclass(frozen=True)
class BlockSchedule:
    blocks: tuple

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def validate(self, L):
        pos = 1
        for s, e in self.blocks:
            if s != pos or e < s:
                raise M.ContractError(f"schedule {self.blocks} does not partition [1, {L}]")
            pos = e + 1
        if pos != L + 1:
            raise M.ContractError(f"schedule {self.blocks} does not partition [1, {L}]")


def _tile(start, L, B):
    return [(s, min(s + B - 1, L)) for s in range(start, L + 1, B)]


def make_schedule(L, spec):
    if isinstance(spec, int):
        spec = Fixed(spec)
    if L < 1:
        return BlockSchedule(())
    if isinstance(spec, Fixed):
        if spec.block < 1:
            raise ValueError("block size must be >= 1")
        return BlockSchedule(tuple(_tile(1, L, spec.block)))
    if isinstance(spec, Mixed):
        if spec.block < 1 or spec.n_ar < 0:
            raise ValueError("mixed schedule needs N >= 0 and B >= 1")
        n = min(spec.n_ar, L)
        return BlockSchedule(tuple([(i, i) for i in range(1, n + 1)] + _tile(n + 1, L, spec.block)))
    raise TypeError(f"unknown schedule spec {spec!r}")


_SCHEDULE_RE = re.compile(r"^(?:fixed:(\d+)|mixed:(\d+)-(\d+))$")


def parse_schedule(text):
    """``fixed:B`` or ``mixed:N-B``."""
    m = _SCHEDULE_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad schedule spec {text!r}; expected fixed:B or mixed:N-B")
    if m.group(1) is not None:
        spec = Fixed(int(m.group(1)))
    else:
        spec = Mixed(int(m.group(2)), int(m.group(3)))
    if spec.block < 1:
        raise ValueError(f"bad schedule spec {text!r}; block size must be >= 1")
    return spec


def format_schedule(spec):
    if isinstance(spec, Fixed):
        return f"fixed:{spec.block}"
    return f"mixed:{spec.n_ar}-{spec.block}"


def count_decoder_calls(schedule, L):
    """(AMD forwards per surviving path, AR-equivalent forwards)."""
    return len(schedule.blocks), L


# ---------------------------------------------------------------- scorers

class ModelScorer:
    """Scorer backed by a trained model and one utterance's encoder output."""

    def __init__(self, params, enc, stats=None):
        self.params = params
        self.enc = enc
        self.vocab_size = params.config.vocab_size
        self.candidates = np.arange(FIRST_TOKEN, self.vocab_size)
        self.max_len = params.config.max_len - 1
        self.stats = stats if stats is not None else SearchStats()
        with no_grad():
            self.ctc_logprobs = np.ascontiguousarray(M.ctc_head(enc, params).data)

    @classmethod
    def from_features(cls, features, params, stats=None):
        with no_grad():
            enc = M.encoder_forward(features, params)
        return cls(params, enc, stats)

    def _ar(self, seqs):
        rows = np.array([(EOS,) + tuple(s) for s in seqs], dtype=np.int64)
        self.stats.ar_calls += 1
        self.stats.ar_rows += len(seqs)
        with no_grad():
            return M.ar_decoder_batch(rows, self.enc, self.params).data

    def ar_next(self, prefixes):
        return self._ar(prefixes)[:, -1, :]

    def ar_score(self, seqs):
        out = self._ar(seqs)
        tok = np.array(seqs, dtype=np.int64)
        L = tok.shape[1]
        return out[np.arange(len(seqs))[:, None], np.arange(L)[None, :], tok].sum(axis=1)

    def amd(self, rows, start, end):
        rows = np.asarray(rows, dtype=np.int64)
        self.stats.amd_calls += 1
        self.stats.amd_rows += rows.shape[0]
        with no_grad():
            out = M.amd_decoder_batch(rows, [(start, end)] * rows.shape[0], self.enc, self.params)
        return out.data[:, start - 1:end, :]


def _random_logdist(rng, shape, concentration=1.0):
    p = rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])
    return np.log(np.maximum(p, 1e-300))


class TableScorer:
    """Random tabular distributions keyed by context, for exhaustive oracles.

    Blank, mask and (for AMD) eos get probability zero; AR may emit eos.
    Every distribution is a deterministic function of ``seed`` and its context.
    """

    def __init__(self, n_real=3, frames=4, seed=0, max_len=3):
        self.vocab_size = FIRST_TOKEN + n_real
        self.candidates = np.arange(FIRST_TOKEN, self.vocab_size)
        self.seed = seed
        self.max_len = max_len
        self.stats = SearchStats()
        rng = np.random.default_rng([seed, 0])
        lp = np.full((frames, self.vocab_size), -np.inf)
        cols = [M.BLANK] + list(self.candidates)
        lp[:, cols] = _random_logdist(rng, (frames, len(cols)), 0.7)
        self.ctc_logprobs = np.ascontiguousarray(lp)

    def _dist(self, tag, key, cols):
        rng = np.random.default_rng([self.seed, tag, len(key)] + [int(k) for k in key])
        out = np.full(self.vocab_size, -np.inf)
        out[cols] = _random_logdist(rng, (len(cols),), 0.8)
        return out

    def ar_dist(self, prefix):
        return self._dist(1, prefix, [EOS] + list(self.candidates))

    def ar_next(self, prefixes):
        self.stats.ar_calls += 1
        return np.stack([self.ar_dist(p) for p in prefixes])

    def ar_score(self, seqs):
        self.stats.ar_calls += 1
        return np.array([sum(self.ar_dist(s[:j])[s[j]] for j in range(len(s))) for s in seqs])

    def amd_dist(self, row, start, end):
        row = tuple(row)
        key = row[:start - 1] + (MASK,) * (end - start + 1) + row[end:] + (start, end)
        return np.stack([self._dist(2, key + (j,), list(self.candidates))
                         for j in range(start, end + 1)])

    def amd(self, rows, start, end):
        self.stats.amd_calls += 1
        return np.stack([self.amd_dist(r, start, end) for r in rows])


# ---------------------------------------------------------------- CTC + AR

def _pre_beam(beam_size, pre_beam):
    return pre_beam if pre_beam is not None else max(1, int(1.5 * beam_size))


def _expand_ctc_ar(h, dist, n_cand, scorer, stats, w, force_eos):
    """Extensions of ``h`` by its top ``n_cand`` AR candidates (real tokens + eos)."""
    allowed = np.concatenate(([EOS], scorer.candidates))
    if force_eos:
        cand = [EOS]
    else:
        scores = dist[allowed]
        order = sorted(range(len(allowed)), key=lambda i: (-scores[i], allowed[i]))
        cand = [int(allowed[i]) for i in order[:n_cand]]
    out = []
    for tok in cand:
        a_ar = h.alpha_ar + float(dist[tok])
        if tok == EOS:
            a_ctc = h.ctc_state.final_logprob
            new = Hypothesis(h.tokens, a_ctc, a_ar, 0.0, h.ctc_state, ended=True)
        else:
            state, a_ctc = ctc_prefix_extend(h.ctc_state, tok, scorer.ctc_logprobs)
            stats.ctc_extends += 1
            new = Hypothesis(h.tokens + (tok,), a_ctc, a_ar, 0.0, state)
        out.append(replace(new, score=fused_score_ctc_ar(new, w)))
    return out


def beam_search_ctc_ar(scorer, beam_size=10, weights=None, max_len=None, pre_beam=None,
                       utt_id=""):
    """Label-synchronous CTC+AR beam search.

    Each step extends every live hypothesis by its top ``pre_beam`` AR
    candidates, scored as ``lambda_ctc * alpha_ctc + lambda_ar * alpha_ar``.
    eos extensions are finalized (they do not occupy beam slots); the rest
    are pruned to ``beam_size``.  Search stops when the best finalized score
    is at least the best live score (no live extension can beat it, since
    both component scores only decrease), when nothing is live, or at
    ``max_len`` tokens, where eos is forced.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    w = weights or FusionWeights.ctc_ar()
    stats = scorer.stats
    lp = scorer.ctc_logprobs
    if lp.shape[0] == 0:
        return NBestList(utt_id, [], stats, empty_input=True)
    max_len = scorer.max_len if max_len is None else max_len
    n_cand = _pre_beam(beam_size, pre_beam)
    live = [Hypothesis((), 0.0, 0.0, 0.0, initial_state(lp))]
    finished = []
    for step in range(max_len + 1):
        dists = scorer.ar_next([h.tokens for h in live])
        extended = []
        for h, dist in zip(live, dists):
            for new in _expand_ctc_ar(h, dist, n_cand, scorer, stats, w, step == max_len):
                (finished if new.ended else extended).append(new)
        live = rank(extended)[:beam_size]
        if not live:
            break
        if finished and max(f.score for f in finished) >= live[0].score:
            break
    return NBestList(utt_id, rank(finished), stats)


def greedy_ctc_ar(scorer, weights=None, max_len=None, pre_beam=1, utt_id=""):
    """Single-path fused decoding.

    Keeps one live hypothesis (the best non-eos candidate) and the best eos
    termination seen so far; stops once that termination scores at least as
    well as the live path.
    """
    w = weights or FusionWeights.ctc_ar()
    stats = scorer.stats
    lp = scorer.ctc_logprobs
    if lp.shape[0] == 0:
        return NBestList(utt_id, [], stats, empty_input=True)
    max_len = scorer.max_len if max_len is None else max_len
    h = Hypothesis((), 0.0, 0.0, 0.0, initial_state(lp))
    best_final = None
    for step in range(max_len + 1):
        dist = scorer.ar_next([h.tokens])[0]
        nxt = None
        for new in _expand_ctc_ar(h, dist, pre_beam, scorer, stats, w, step == max_len):
            if new.ended:
                if best_final is None or (new.score, ) > (best_final.score, ):
                    best_final = new
            elif nxt is None or (new.score, tuple(-t for t in new.tokens)) > (nxt.score, tuple(-t for t in nxt.tokens)):
                nxt = new
        if nxt is None or (best_final is not None and best_final.score >= nxt.score):
            break
        h = nxt
    return NBestList(utt_id, [best_final] if best_final else [], stats)


def greedy_ar(scorer, max_len=None):
    """Plain AR argmax decoding until eos (used for training-time dev error)."""
    max_len = scorer.max_len if max_len is None else max_len
    tokens = ()
    allowed = np.concatenate(([EOS], scorer.candidates))
    for _ in range(max_len):
        dist = scorer.ar_next([tokens])[0]
        tok = int(allowed[np.argmax(dist[allowed])])
        if tok == EOS:
            break
        tokens += (tok,)
    return tokens


# ---------------------------------------------------------------- tripartite AMD

def _top_k(dist, candidates, k):
    scores = dist[candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    return [int(candidates[i]) for i in order[:k]]


def ctc_hypothesis(lp):
    """CTC greedy output restricted to real tokens (sets the AMD length and right context)."""
    return tuple(t for t in ctc_greedy(lp) if t >= FIRST_TOKEN)


def beam_search_amd(scorer, schedule_spec=Fixed(1), k_amd=10, k_main=10, weights=None,
                    ar_every_slot=False, utt_id="", trace=None, lazy_ar=True):
    """Tripartite CTC + AMD + AR block search over the CTC greedy length.

    For each block of the schedule: one batched AMD forward conceals the
    block for every beam member (left context = the member's tokens, right
    context = the CTC 1-best); slots are then filled left to right with the
    top ``k_amd`` AMD tokens plus the CTC 1-best token, pruning partials to
    ``k_amd`` by the CTC+AMD score; finally AR scores are added and the beam
    is pruned to ``k_main`` by the tripartite score.

    With ``lazy_ar`` the AR forward is skipped for blocks whose survivors
    already fit in ``k_main`` (the pruning is then a no-op) and done once
    over the final beam instead.  Results are identical; only AR call
    counts change.
    """
    if k_amd < 1 or k_main < 1:
        raise ValueError("k_amd and k_main must be >= 1")
    w = weights or FusionWeights()
    stats = scorer.stats
    lp = scorer.ctc_logprobs
    if lp.shape[0] == 0:
        return NBestList(utt_id, [], stats, empty_input=True)
    c = ctc_hypothesis(lp)
    L = len(c)
    start = Hypothesis((), 0.0, 0.0, 0.0, initial_state(lp))
    if L == 0:
        return NBestList(utt_id, [start], stats)
    schedule = schedule_spec if isinstance(schedule_spec, BlockSchedule) else make_schedule(L, schedule_spec)
    schedule.validate(L)
    beam = [start]
    stale = False
    for (bs, be) in schedule:
        stats.blocks += 1
        rows = [h.tokens + (MASK,) * (be - bs + 1) + c[be:] for h in beam]
        dists = scorer.amd(rows, bs, be)  # (n, B, V)
        partials = [(replace(h, amd_calls=h.amd_calls + 1), r) for r, h in enumerate(beam)]
        for j in range(bs, be + 1):
            extended = []
            for h, r in partials:
                dist = dists[r, j - bs]
                cand = _top_k(dist, scorer.candidates, k_amd)
                if c[j - 1] not in cand:
                    cand.append(c[j - 1])
                if trace is not None:
                    trace.append((j, h.tokens, tuple(cand)))
                for tok in cand:
                    state, a_ctc = ctc_prefix_extend(h.ctc_state, tok, lp)
                    stats.ctc_extends += 1
                    new = replace(h, tokens=h.tokens + (tok,), alpha_ctc=a_ctc,
                                  alpha_amd=h.alpha_amd + float(dist[tok]), ctc_state=state)
                    extended.append((replace(new, score=in_block_score(new, w)), r))
            extended.sort(key=lambda pr: (-pr[0].score, pr[0].tokens))
            partials = extended[:k_amd]
            if ar_every_slot and j < be:
                partials = _with_ar(scorer, partials, w)
        if lazy_ar and not ar_every_slot and len(partials) <= k_main:
            # pruning to k_main would keep everyone, so AR scores cannot change it yet
            beam = [h for h, _ in partials]
            stale = True
        else:
            beam = rank([h for h, _ in _with_ar(scorer, partials, w)])[:k_main]
            stale = False
    if stale:
        beam = rank([h for h, _ in _with_ar(scorer, [(h, 0) for h in beam], w)])
    return NBestList(utt_id, beam, stats)


def _with_ar(scorer, partials, w):
    ar = scorer.ar_score([h.tokens for h, _ in partials])
    out = []
    for (h, r), a in zip(partials, ar):
        new = replace(h, alpha_ar=float(a))
        out.append((replace(new, score=tripartite_score(new, w)), r))
    return out


# ---------------------------------------------------------------- oracles

def exhaustive_ctc_ar(scorer, weights, max_len):
    """Best complete sequence under the CTC+AR objective by enumeration."""
    from itertools import product

    from .ctc import prefix_score

    best = None
    for n in range(max_len + 1):
        for seq in product(scorer.candidates.tolist(), repeat=n):
            a_ctc = prefix_score(seq, scorer.ctc_logprobs).final_logprob
            a_ar = sum(scorer.ar_dist(seq[:j])[seq[j]] for j in range(n)) + scorer.ar_dist(seq)[EOS]
            s = weights.lambda_ctc * a_ctc + weights.lambda_ar * a_ar
            if best is None or (s, tuple(-t for t in seq)) > (best[0], tuple(-t for t in best[1])):
                best = (s, seq)
    return best


def exhaustive_amd(scorer, schedule_spec, weights):
    """Best length-|c| sequence under the tripartite objective by enumeration."""
    from itertools import product

    from .ctc import prefix_score

    c = ctc_hypothesis(scorer.ctc_logprobs)
    L = len(c)
    schedule = make_schedule(L, schedule_spec)
    scored = []
    for seq in product(scorer.candidates.tolist(), repeat=L):
        a_amd = 0.0
        for bs, be in schedule:
            row = seq[:bs - 1] + (MASK,) * (be - bs + 1) + c[be:]
            d = scorer.amd_dist(row, bs, be)
            a_amd += sum(d[j - bs][seq[j - 1]] for j in range(bs, be + 1))
        a_ctc = prefix_score(seq, scorer.ctc_logprobs).score
        a_ar = sum(scorer.ar_dist(seq[:j])[seq[j]] for j in range(L))
        s = weights.lambda_ctc * a_ctc + weights.lambda_amd * a_amd + weights.lambda_ar * a_ar
        scored.append((s, seq))
    scored.sort(key=lambda x: (-x[0], x[1]))
    return scored
