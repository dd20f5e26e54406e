"""Error rates, N-best analysis, significance testing and RTF benchmarking."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from collections import namedtuple
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .search import (FusionWeights, ModelScorer, NBestList, SearchStats, beam_search_amd,
                     beam_search_ctc_ar, format_schedule, greedy_ctc_ar, parse_schedule)

WER = namedtuple("WER", "errors ref_len rate")

DELETED = None  # absence marker in lattice-density alignments


def wer(reference, hypothesis):
    """Unit-cost Levenshtein errors; ``rate`` is None for an empty reference."""
    ref = np.asarray(list(reference), dtype=np.int64)
    hyp = np.asarray(list(hypothesis), dtype=np.int64)
    errors = int(kernels.edit_distance(ref, hyp))
    if len(ref) == 0:
        return WER(len(hyp), 0, None)
    return WER(errors, len(ref), errors / len(ref))


def token_error_rate(references, hypotheses):
    errors = sum(wer(r, h).errors for r, h in zip(references, hypotheses))
    total = sum(len(r) for r in references)
    return errors / total if total else 0.0


def _sequences(nbest):
    if isinstance(nbest, NBestList):
        return [h.tokens for h in nbest.hypotheses]
    return [tuple(h) for h in nbest]


def oracle_errors(nbest, reference):
    seqs = _sequences(nbest)
    if not seqs:
        raise ValueError("oracle WER needs a non-empty N-best list")
    return min(wer(reference, s).errors for s in seqs)


def oracle_wer(nbest, reference):
    """Lowest WER over the N-best list (first-ranked among equals)."""
    seqs = _sequences(nbest)
    if not seqs:
        raise ValueError("oracle WER needs a non-empty N-best list")
    best = None
    for s in seqs:
        r = wer(reference, s)
        if best is None or r.errors < best.errors:
            best = r
    return best.rate


def align_to_reference(reference, hypothesis):
    """Hypothesis token (or DELETED) aligned to each reference position.

    Minimal edit-distance alignment traced left to right; among optimal moves
    substitution/match beats insertion beats deletion.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    # suffix costs: D[i][j] = distance(ref[i:], hyp[j:])
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[n, :] = np.arange(m, -1, -1)
    D[:, m] = np.arange(n, -1, -1)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            D[i, j] = min(D[i + 1, j + 1] + (ref[i] != hyp[j]), D[i, j + 1] + 1, D[i + 1, j] + 1)
    out = []
    i = j = 0
    while i < n:
        if j < m and D[i, j] == D[i + 1, j + 1] + (ref[i] != hyp[j]):
            out.append(hyp[j])
            i += 1
            j += 1
        elif j < m and D[i, j] == D[i, j + 1] + 1:
            j += 1
        else:
            out.append(DELETED)
            i += 1
    return out


def lattice_density(nbest, reference):
    """Mean number of distinct aligned predictions per reference token."""
    reference = list(reference)
    if not reference:
        raise ValueError("lattice density needs a non-empty reference")
    slots = [set() for _ in reference]
    for seq in _sequences(nbest):
        for slot, tok in zip(slots, align_to_reference(reference, seq)):
            slot.add(tok)
    return sum(len(s) for s in slots) / len(reference)


def mapsswe(errors_a, errors_b, alpha=0.05):
    """Matched-pairs z test on per-segment error differences (A minus B).

    Returns ``(z, significant)``; significance is two-tailed at ``alpha``.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("MAPSSWE needs two equal-length error vectors with N >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, False
        return math.copysign(math.inf, mean), True
    z = mean / (sd / math.sqrt(d.size))
    threshold = statistics.NormalDist().inv_cdf(1 - alpha / 2)
    return float(z), bool(abs(z) > threshold)


# ---------------------------------------------------------------- decode systems

MODES = ("greedy-ar", "beam-ctc-ar", "amd")


@dataclass(frozen=True)
class DecodeSystem:
    name: str
    mode: str = "greedy-ar"
    beam: int = 1
    schedule: str = "fixed:1"
    k_amd: int = 1
    k_main: int = 1
    lambdas: tuple = (0.7, 0.3)
    ar_every_slot: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.mode == "amd":
            parse_schedule(self.schedule)
            if len(self.lambdas) != 3:
                raise ValueError("amd mode takes three lambdas (ctc, amd, ar)")
        elif len(self.lambdas) != 2:
            raise ValueError("CTC+AR modes take two lambdas (ctc, ar)")

    def weights(self):
        if self.mode == "amd":
            return FusionWeights(*self.lambdas)
        return FusionWeights.ctc_ar(*self.lambdas)


def decode_utterance(system, utt, params):
    """Decode one utterance; returns ``(nbest, seconds)`` (encoder included)."""
    stats = SearchStats()
    t0 = time.perf_counter()
    scorer = ModelScorer.from_features(utt.features, params, stats)
    w = system.weights()
    if system.mode == "greedy-ar":
        nb = greedy_ctc_ar(scorer, w, utt_id=utt.id)
    elif system.mode == "beam-ctc-ar":
        nb = beam_search_ctc_ar(scorer, system.beam, w, utt_id=utt.id)
    else:
        nb = beam_search_amd(scorer, parse_schedule(system.schedule), system.k_amd, system.k_main,
                             w, ar_every_slot=system.ar_every_slot, utt_id=utt.id)
    return nb, time.perf_counter() - t0


def decode_record(utt, nbest, seconds):
    best = nbest.best
    return {
        "id": utt.id,
        "reference": list(utt.transcript),
        "hypothesis": list(best.tokens) if best else [],
        "nbest": [{"tokens": list(h.tokens), "alpha_ctc": h.alpha_ctc, "alpha_ar": h.alpha_ar,
                   "alpha_amd": h.alpha_amd, "score": h.score} for h in nbest.hypotheses],
        "counters": nbest.stats.as_dict(),
        "empty_input": nbest.empty_input,
        "decode_seconds": seconds,
    }


TIMING_FIELDS = ("decode_seconds", "wall_time", "rtf", "speedup", "seconds")


def strip_timing(obj):
    """Copy of a record/report with timing fields removed (for reproducibility checks)."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def run_system(system, utterances, params):
    nbests, seconds = [], 0.0
    for u in utterances:
        nb, s = decode_utterance(system, u, params)
        nbests.append(nb)
        seconds += s
    return nbests, seconds


def system_metrics(nbests, utterances):
    refs = [u.transcript for u in utterances]
    per_utt = [wer(r, nb.best.tokens if nb.best else ()).errors for r, nb in zip(refs, nbests)]
    total = sum(len(r) for r in refs)
    oracle = sum(oracle_errors(nb, r) if nb.hypotheses else len(r) for r, nb in zip(refs, nbests))
    density = [lattice_density(nb, r) for r, nb in zip(refs, nbests) if nb.hypotheses and r]
    calls = {"amd_calls": 0, "ar_calls": 0, "ctc_extends": 0, "blocks": 0}
    for nb in nbests:
        for k in calls:
            calls[k] += getattr(nb.stats, k)
    return {
        "wer": sum(per_utt) / total if total else 0.0,
        "oracle_wer": oracle / total if total else 0.0,
        "density": float(np.mean(density)) if density else 0.0,
        "errors": per_utt,
        "calls": calls,
    }


def benchmark(systems, utterances, params, repetitions=3, baseline=0, alpha=0.05):
    """Decode ``utterances`` with every system ``repetitions`` times.

    Timing is the median over repetitions of the split's total decode time;
    RTF divides it by the split's audio duration.  Error fields come from the
    first repetition and are checked identical across repetitions.
    """
    audio = sum(u.duration_seconds for u in utterances)
    report = {"audio_seconds": audio, "repetitions": repetitions, "workers": 1,
              "baseline": systems[baseline].name, "systems": [], "significance": []}
    results = []
    for system in systems:
        times, first = [], None
        for _ in range(repetitions):
            nbests, secs = run_system(system, utterances, params)
            m = system_metrics(nbests, utterances)
            if first is None:
                first = m
            elif m["errors"] != first["errors"]:
                raise RuntimeError(f"non-deterministic decode for system {system.name}")
            times.append(secs)
        med = statistics.median(times)
        results.append((system, first, med))
    base_time = results[baseline][2]
    base_errors = results[baseline][1]["errors"]
    for system, m, med in results:
        entry = {"name": system.name, "config": asdict(system), "wer": m["wer"],
                 "oracle_wer": m["oracle_wer"], "density": m["density"], "calls": m["calls"],
                 "seconds": med, "rtf": med / audio if audio else None,
                 "speedup": base_time / med if med else None, "errors": m["errors"]}
        report["systems"].append(entry)
        if system.name != systems[baseline].name and len(utterances) >= 2:
            z, sig = mapsswe(m["errors"], base_errors, alpha)
            report["significance"].append({"system": system.name, "baseline": systems[baseline].name,
                                           "z": z, "significant": sig, "alpha": alpha,
                                           "worse": bool(sig and z > 0)})
    return report


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "wer", "oracle_wer", "density", "rtf", "speedup",
                "amd_calls", "ar_calls", "mapsswe_z", "significant"])
    sig = {s["system"]: s for s in report["significance"]}
    for s in report["systems"]:
        z = sig.get(s["name"], {})
        w.writerow([s["name"], f"{s['wer']:.6f}", f"{s['oracle_wer']:.6f}", f"{s['density']:.6f}",
                    f"{s['rtf']:.6f}" if s["rtf"] is not None else "", f"{s['speedup']:.4f}",
                    s["calls"]["amd_calls"], s["calls"]["ar_calls"],
                    f"{z['z']:.4f}" if z else "", z.get("significant", "")])
    return buf.getvalue()


def density_sweep(utterances, params, block_sizes=(2, 4, 8), ks=range(1, 21), lambdas_ctc_ar=(0.7, 0.3),
                  lambdas_amd=(0.3, 0.3, 0.4)):
    """Rows ``(system, K, density, oracle_wer)``: CTC+AR beam K vs AMD Fixed(B) with K_AMD=K_main=K."""
    systems = [("ctc-ar", lambda k: DecodeSystem("ctc-ar", "beam-ctc-ar", beam=k, lambdas=lambdas_ctc_ar))]
    for b in block_sizes:
        systems.append((f"amd-B{b}", lambda k, b=b: DecodeSystem(
            f"amd-B{b}", "amd", schedule=format_schedule(parse_schedule(f"fixed:{b}")),
            k_amd=k, k_main=k, lambdas=lambdas_amd)))
    rows = []
    for name, make in systems:
        for k in ks:
            nbests, _ = run_system(make(k), utterances, params)
            m = system_metrics(nbests, utterances)
            rows.append({"system": name, "K": k, "density": m["density"], "oracle_wer": m["oracle_wer"]})
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "K", "density", "oracle_wer"])
    for r in rows:
        w.writerow([r["system"], r["K"], f"{r['density']:.6f}", f"{r['oracle_wer']:.6f}"])
    return buf.getvalue()


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)
