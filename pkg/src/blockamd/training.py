"""Loss compositions and the optimisation loop.

Per-utterance losses are summed negative log-likelihoods; a batch loss is the
mean over its utterances.  Randomness comes from named sub-streams of the
run seed: ``(seed, SHUFFLE, epoch)`` for batch order and
``(seed, BLOCKS, epoch, utterance index)`` for AMD block sizes and
``(seed, DROPOUT, epoch, utterance index)`` for dropout masks, so a run
resumed from an epoch checkpoint replays exactly.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as tn
from .ctc import ctc_loss
from .evaluation import token_error_rate
from .search import ModelScorer, greedy_ar
from .tensor import Tensor

log = logging.getLogger(__name__)

SHUFFLE_STREAM = 21
BLOCK_STREAM = 22
DROPOUT_STREAM = 23


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    gamma_ctc: float = 0.4
    gamma_ar: float = 0.3
    gamma_amd: float = 0.3

    def __post_init__(self):
        g = (self.gamma_ctc, self.gamma_ar, self.gamma_amd)
        if min(g) < 0 or sum(g) <= 0:
            raise ValueError("loss weights must be >= 0 with a positive sum")


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    peak_lr: float = 5e-3
    warmup_steps: int = 400
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    n_block_samples: int = 4
    grad_clip: float = 5.0
    dev_limit: int = 100
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_block_samples < 1:
            raise ValueError("n_block_samples must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 1:
            raise ValueError("batch_size and warmup_steps must be positive, epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")


def sample_block_sizes(L, n, rng):
    """``n`` block sizes drawn uniformly from [1, L]."""
    if L < 1:
        raise ValueError("sentence length must be >= 1")
    return [int(b) for b in rng.integers(1, L + 1, size=n)]


def tile(L, B):
    """Consecutive blocks of size B anchored at position 1; the last may be short."""
    return [(s, min(s + B - 1, L)) for s in range(1, L + 1, B)]


def _picked_nll(logprobs, targets):
    """Sum of -logprobs[..., i, targets[..., i]] via a one-hot mask."""
    onehot = np.zeros(logprobs.shape)
    idx = np.indices(targets.shape)
    onehot[tuple(idx) + (targets,)] = 1.0
    return tn.scale(tn.reduce_sum(tn.mul(logprobs, Tensor(onehot))), -1.0)


def amd_loss(params, enc, target, block_sizes):
    """Sum over sampled sizes B of the NLL of every token with its B-tiled block concealed."""
    target = np.asarray(target, dtype=np.int64)
    L = target.shape[0]
    if L < 1:
        raise ValueError("AMD loss needs a non-empty target")
    blocks = [blk for B in block_sizes for blk in tile(L, B)]
    rows = np.tile(target, (len(blocks), 1))
    out = M.amd_decoder_batch(rows, blocks, enc, params)
    onehot = np.zeros(out.shape)
    for r, (s, e) in enumerate(blocks):
        pos = np.arange(s - 1, e)
        onehot[r, pos, target[pos]] = 1.0
    return tn.scale(tn.reduce_sum(tn.mul(out, Tensor(onehot))), -1.0)


def ar_loss(params, enc, target):
    """Teacher-forced NLL of ``target + eos`` given ``sos + target``."""
    target = np.asarray(target, dtype=np.int64)
    inp = np.concatenate(([M.SOS], target))
    out = np.concatenate((target, [M.EOS]))
    logprobs = M.ar_decoder_batch(inp[None, :], enc, params)
    return _picked_nll(logprobs, out[None, :])


def utterance_losses(params, utt, weights, rng, n_block_samples=4):
    """Component losses for one utterance; components with zero weight are skipped."""
    enc = M.encoder_forward(utt.features, params)
    parts = {}
    if weights.gamma_ctc > 0:
        loss, feasible = ctc_loss(M.ctc_head(enc, params), utt.transcript)
        if feasible:
            parts["ctc"] = loss
    if weights.gamma_ar > 0:
        parts["ar"] = ar_loss(params, enc, utt.transcript)
    if weights.gamma_amd > 0:
        sizes = sample_block_sizes(len(utt.transcript), n_block_samples, rng)
        parts["amd"] = amd_loss(params, enc, utt.transcript, sizes)
    return parts


def combine(parts, weights):
    total = None
    for key, gamma in (("ctc", weights.gamma_ctc), ("ar", weights.gamma_ar), ("amd", weights.gamma_amd)):
        if key in parts:
            term = tn.scale(parts[key], gamma)
            total = term if total is None else tn.add(total, term)
    return total


def tripartite_loss(params, batch, weights, rng, n_block_samples=4, dropout=0.0, dropout_rng=None):
    """Mean over the batch of gamma_ctc*L_ctc + gamma_ar*L_ar + gamma_amd*L_amd.

    Returns ``(loss, components)`` where components holds per-term batch means.
    ``rng`` and ``dropout_rng`` may be Generators or callables ``index -> Generator``;
    ``dropout_rng`` is only needed when ``dropout > 0``.
    """
    total = None
    comps = {"ctc": 0.0, "ar": 0.0, "amd": 0.0}
    for i, utt in enumerate(batch):
        g = rng(i) if callable(rng) else rng
        if dropout > 0:
            d = dropout_rng(i) if callable(dropout_rng) else dropout_rng
            with M.dropout(dropout, d):
                parts = utterance_losses(params, utt, weights, g, n_block_samples)
        else:
            parts = utterance_losses(params, utt, weights, g, n_block_samples)
        for k, v in parts.items():
            comps[k] += float(v.data) / len(batch)
        u = combine(parts, weights)
        if u is None:
            continue
        total = u if total is None else tn.add(total, u)
    if total is None:
        total = Tensor(0.0)
    return tn.scale(total, 1.0 / len(batch)), comps


class Adam:
    """Adam with linear warmup then inverse-square-root decay."""

    def __init__(self, params, peak_lr, warmup_steps, betas=(0.9, 0.98), eps=1e-9):
        self.params = params
        self.peak_lr = peak_lr
        self.warmup = warmup_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}

    def lr(self, step):
        return self.peak_lr * min(step / self.warmup, math.sqrt(self.warmup / step))

    def step(self, clip=None):
        self.step_count += 1
        lr = self.lr(self.step_count)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in self.params.tensors.items()}
        if clip:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip:
                grads = {k: g * (clip / norm) for k, g in grads.items()}
        c1 = 1 - self.b1 ** self.step_count
        c2 = 1 - self.b2 ** self.step_count
        for k, t in self.params.tensors.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            t.data = t.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return lr

    def state_arrays(self):
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays, step_count):
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])
        self.step_count = int(step_count)


def dev_error_rate(params, utterances):
    hyps, refs = [], []
    for u in utterances:
        scorer = ModelScorer.from_features(u.features, params)
        hyps.append(greedy_ar(scorer))
        refs.append(u.transcript)
    return token_error_rate(refs, hyps)


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, SHUFFLE_STREAM, epoch]).permutation(n)


def train(config, corpus, params, metrics_path=None, start_epoch=0, optimizer=None,
          on_epoch_end=None):
    """Train ``params`` in place and return ``(params, metrics)``.

    ``metrics`` is a list of per-epoch dicts, also appended as JSON lines to
    ``metrics_path`` when given.  ``on_epoch_end(epoch, params, optimizer)``
    is called after every epoch (used for checkpointing).
    """
    train_set = corpus["train"]
    if not train_set:
        raise ValueError("training split is empty")
    dev_set = corpus["dev"][:config.dev_limit] if config.dev_limit else corpus["dev"]
    opt = optimizer or Adam(params, config.peak_lr, config.warmup_steps)
    metrics = []
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        order = _epoch_order(config.seed, epoch, len(train_set))
        sums = {"loss": 0.0, "ctc": 0.0, "ar": 0.0, "amd": 0.0}
        n_batches = 0
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            batch = [train_set[i] for i in idx]
            params.zero_grad()
            loss, comps = tripartite_loss(
                params, batch, config.weights,
                lambda i, idx=idx: np.random.default_rng([config.seed, BLOCK_STREAM, epoch, int(idx[i])]),
                config.n_block_samples, config.dropout,
                lambda i, idx=idx: np.random.default_rng([config.seed, DROPOUT_STREAM, epoch, int(idx[i])]))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {n_batches}")
            tn.backward(loss)
            opt.step(config.grad_clip)
            sums["loss"] += value
            for k, v in comps.items():
                sums[k] += v
            n_batches += 1
        record = {"epoch": epoch + 1,
                  **{k: v / n_batches for k, v in sums.items()},
                  "dev_error": dev_error_rate(params, dev_set) if dev_set else None,
                  "steps": opt.step_count,
                  "wall_time": time.perf_counter() - t0}
        metrics.append(record)
        log.info("epoch %d loss %.4f dev_error %s", record["epoch"], record["loss"], record["dev_error"])
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, params, opt)
    params.zero_grad()
    return params, metrics
