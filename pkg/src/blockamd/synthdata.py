"""Synthetic transcription corpora.

Each real token owns a fixed random prototype vector.  An utterance renders
its transcript by repeating each token's prototype for a sampled number of
frames and adding i.i.d. Gaussian noise.  Frames are 10 ms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import FIRST_TOKEN

CORPUS_MAGIC = b"AMDC"
FRAME_SHIFT = 0.01
SPLITS = ("train", "dev", "test")


class CorpusFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    vocab_size: int = 26
    utterance_count: int = 2000
    min_len: int = 5
    max_len: int = 30
    min_dur: int = 2
    max_dur: int = 4
    feature_dim: int = 16
    noise_std: float = 0.3
    dev_fraction: float = 0.1
    test_fraction: float = 0.1
    allow_repeats: bool = False

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if not 1 <= self.min_dur <= self.max_dur:
            raise ValueError(f"invalid duration range [{self.min_dur}, {self.max_dur}]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.vocab_size < 1 or self.feature_dim < 1 or self.utterance_count < 0:
            raise ValueError("vocab_size and feature_dim must be positive")
        if not self.allow_repeats and self.vocab_size < 2 and self.max_len > 1:
            raise ValueError("repeat-free transcripts need at least two tokens")
        if self.dev_fraction < 0 or self.test_fraction < 0 or self.dev_fraction + self.test_fraction > 1:
            raise ValueError("split fractions must be non-negative and sum to <= 1")

    @property
    def model_vocab_size(self):
        return FIRST_TOKEN + self.vocab_size


@dataclass
class Utterance:
    id: str
    transcript: tuple
    features: np.ndarray

    @property
    def frames(self):
        return self.features.shape[0]

    @property
    def duration_seconds(self):
        return self.frames * FRAME_SHIFT


@dataclass
class Corpus:
    config: CorpusConfig
    splits: dict = field(default_factory=dict)

    def __getitem__(self, split):
        return self.splits[split]

    def duration(self, split):
        return sum(u.duration_seconds for u in self.splits[split])


def prototypes(config):
    rng = np.random.default_rng([config.seed, 11])
    return rng.normal(0.0, 1.0, (config.vocab_size, config.feature_dim))


def _sample_transcript(rng, config):
    L = int(rng.integers(config.min_len, config.max_len + 1))
    out = []
    for _ in range(L):
        if config.allow_repeats or not out:
            tok = int(rng.integers(config.vocab_size))
        else:
            # uniform over the tokens that differ from the previous one
            tok = int(rng.integers(config.vocab_size - 1))
            if tok >= out[-1]:
                tok += 1
        out.append(tok)
    return out


def render(transcript_ids, durations, protos, noise_std, rng):
    frames = np.repeat(protos[transcript_ids], durations, axis=0)
    if noise_std > 0:
        frames = frames + rng.normal(0.0, noise_std, frames.shape)
    return frames


def generate_corpus(config):
    protos = prototypes(config)
    rng = np.random.default_rng([config.seed, 12])
    n = config.utterance_count
    n_dev = int(round(n * config.dev_fraction))
    n_test = int(round(n * config.test_fraction))
    sizes = {"train": n - n_dev - n_test, "dev": n_dev, "test": n_test}
    corpus = Corpus(config, {s: [] for s in SPLITS})
    for split in SPLITS:
        for i in range(sizes[split]):
            ids = _sample_transcript(rng, config)
            dur = rng.integers(config.min_dur, config.max_dur + 1, size=len(ids))
            feats = render(ids, dur, protos, config.noise_std, rng)
            transcript = tuple(t + FIRST_TOKEN for t in ids)
            corpus.splits[split].append(Utterance(f"{split}-{i:05d}", transcript, feats))
    return corpus


# ---------------------------------------------------------------- file format

def corpus_bytes(corpus):
    header = {"config": asdict(corpus.config),
              "splits": {s: len(corpus.splits.get(s, [])) for s in SPLITS}}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CORPUS_MAGIC, struct.pack("<Q", len(head)), head]
    for split in SPLITS:
        for u in corpus.splits.get(split, []):
            uid = u.id.encode("utf-8")
            parts.append(struct.pack("<H", len(uid)))
            parts.append(uid)
            parts.append(struct.pack("<I", len(u.transcript)))
            parts.append(np.asarray(u.transcript, dtype="<u4").tobytes())
            parts.append(struct.pack("<I", u.frames))
            parts.append(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
    return b"".join(parts)


def save_corpus(corpus, path):
    with open(path, "wb") as fh:
        fh.write(corpus_bytes(corpus))


def _take(raw, offset, n, what):
    if offset + n > len(raw):
        raise CorpusFormatError(f"truncated {what}", offset)
    return raw[offset:offset + n], offset + n


def parse_corpus(raw):
    if raw[:4] != CORPUS_MAGIC:
        raise CorpusFormatError(f"bad magic {raw[:4]!r}", 0)
    blob, off = _take(raw, 4, 8, "header length")
    (hlen,) = struct.unpack("<Q", blob)
    blob, off = _take(raw, off, hlen, "header")
    try:
        header = json.loads(blob.decode("utf-8"))
        config = CorpusConfig(**header["config"])
        sizes = header["splits"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"corrupt header: {exc}", 12) from exc
    F = config.feature_dim
    corpus = Corpus(config, {s: [] for s in SPLITS})
    for split in SPLITS:
        for _ in range(int(sizes.get(split, 0))):
            start = off
            blob, off = _take(raw, off, 2, "record id length")
            (nid,) = struct.unpack("<H", blob)
            blob, off = _take(raw, off, nid, "record id")
            try:
                uid = blob.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorpusFormatError("record id is not utf-8", start) from exc
            blob, off = _take(raw, off, 4, "transcript length")
            (ntok,) = struct.unpack("<I", blob)
            blob, off = _take(raw, off, 4 * ntok, "transcript")
            transcript = tuple(int(t) for t in np.frombuffer(blob, dtype="<u4"))
            blob, off = _take(raw, off, 4, "frame count")
            (T,) = struct.unpack("<I", blob)
            blob, off = _take(raw, off, 8 * T * F, "features")
            feats = np.frombuffer(blob, dtype="<f8").reshape(T, F).astype(np.float64)
            corpus.splits[split].append(Utterance(uid, transcript, feats))
    if off != len(raw):
        raise CorpusFormatError("trailing bytes after last record", off)
    return corpus


def load_corpus(path):
    with open(path, "rb") as fh:
        return parse_corpus(fh.read())
