"""Micro transformer encoder with a CTC head, a causal AR decoder and a
block attention-mask (AMD) decoder.

Token ids: 0 blank, 1 sos/eos, 2 mask placeholder, 3.. real tokens.
Positions passed to the mask builders are 1-indexed and inclusive.
"""

from __future__ import annotations

import json
import math
import struct
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor

BLANK = 0
SOS = EOS = 1
MASK = 2
FIRST_TOKEN = 3
N_SPECIAL = 3

CHECKPOINT_MAGIC = b"AMD1"
INIT_STREAM = 31


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class EmptyInputError(ContractError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 29
    d_model: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    max_len: int = 64
    feature_dim: int = 16
    subsample: int = 2
    max_frames: int = 512
    share_decoders: bool = False
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "ff_dim", "n_encoder_layers",
                     "n_decoder_layers", "max_len", "feature_dim", "subsample", "max_frames"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.vocab_size < N_SPECIAL + 1:
            raise ContractError("vocab_size must cover blank, sos/eos, mask and one real token")
        if self.activation not in ("gelu", "relu"):
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def real_tokens(self):
        return range(FIRST_TOKEN, self.vocab_size)


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _attn_shapes(prefix, d):
    out = {}
    for p in ("q", "k", "v", "o"):
        out[f"{prefix}.{p}.w"] = (d, d)
        out[f"{prefix}.{p}.b"] = (d,)
    return out


def _ln_shapes(prefix, d):
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ff_shapes(prefix, d, ff):
    return {f"{prefix}.ff1.w": (d, ff), f"{prefix}.ff1.b": (ff,),
            f"{prefix}.ff2.w": (ff, d), f"{prefix}.ff2.b": (d,)}


def param_shapes(cfg):
    d, V = cfg.d_model, cfg.vocab_size
    shapes = {"enc.in.w": (cfg.feature_dim * cfg.subsample, d), "enc.in.b": (d,)}
    for l in range(cfg.n_encoder_layers):
        shapes.update(_ln_shapes(f"enc.{l}.ln1", d))
        shapes.update(_attn_shapes(f"enc.{l}.att", d))
        shapes.update(_ln_shapes(f"enc.{l}.ln2", d))
        shapes.update(_ff_shapes(f"enc.{l}", d, cfg.ff_dim))
    shapes.update(_ln_shapes("enc.ln", d))
    shapes["ctc.w"] = (d, V)
    shapes["ctc.b"] = (V,)
    decoders = ("ar",) if cfg.share_decoders else ("ar", "amd")
    for dec in decoders:
        shapes[f"{dec}.emb"] = (V, d)
        for l in range(cfg.n_decoder_layers):
            shapes.update(_ln_shapes(f"{dec}.{l}.ln1", d))
            shapes.update(_attn_shapes(f"{dec}.{l}.self", d))
            shapes.update(_ln_shapes(f"{dec}.{l}.ln2", d))
            shapes.update(_attn_shapes(f"{dec}.{l}.cross", d))
            shapes.update(_ln_shapes(f"{dec}.{l}.ln3", d))
            shapes.update(_ff_shapes(f"{dec}.{l}", d, cfg.ff_dim))
        shapes.update(_ln_shapes(f"{dec}.ln", d))
        shapes[f"{dec}.out.w"] = (d, V)
        shapes[f"{dec}.out.b"] = (V,)
    return shapes


GROUPS = ("enc", "ctc", "ar", "amd")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng([seed, INIT_STREAM])
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".g"):
                value = np.ones(shape)
            elif len(shape) == 1:
                value = np.zeros(shape)
            elif name.endswith(".emb"):
                value = rng.normal(0.0, 1.0, shape)
            else:
                value = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
            tensors[name] = Tensor(value, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def group(self, name):
        return name.split(".", 1)[0]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                         for k, v in self.tensors.items()})

    def positions(self, n):
        size = max(self.config.max_frames, self.config.max_len)
        if n > size:
            raise ContractError(f"sequence length {n} exceeds positional table")
        return _pos_table(size, self.config.d_model)[:n]

    def decoder_prefix(self, which):
        if which == "amd" and self.config.share_decoders:
            return "ar"
        return which


_POS_CACHE = {}


def _pos_table(n, d):
    key = (n, d)
    if key not in _POS_CACHE:
        table = sinusoidal_positions(n, d)
        table.setflags(write=False)
        _POS_CACHE[key] = table
    return _POS_CACHE[key]


# ---------------------------------------------------------------- layers

_dropout_state = threading.local()


@contextmanager
def dropout(rate, rng):
    """Inverted dropout at ``rate`` on inputs and residual branches inside the block.

    Masks are drawn from ``rng`` in forward order.  Outside this context the
    forwards are deterministic.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    prev = getattr(_dropout_state, "active", None)
    _dropout_state.active = (rate, rng) if rate > 0 else None
    try:
        yield
    finally:
        _dropout_state.active = prev


def _drop(x):
    active = getattr(_dropout_state, "active", None)
    if active is None:
        return x
    rate, rng = active
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return tn.mul(x, Tensor(keep))


def _linear(params, prefix, x):
    return tn.add(tn.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def _layer_norm(params, prefix, x):
    return tn.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def _attention(params, prefix, xq, xkv, mask):
    cfg = params.config
    dh = cfg.d_model // cfg.n_heads
    q = _linear(params, prefix + ".q", xq)
    k = _linear(params, prefix + ".k", xkv)
    v = _linear(params, prefix + ".v", xkv)
    heads = []
    for h in range(cfg.n_heads):
        cols = (Ellipsis, slice(h * dh, (h + 1) * dh))
        qh, kh, vh = tn.slice_(q, cols), tn.slice_(k, cols), tn.slice_(v, cols)
        scores = tn.scale(tn.matmul(qh, tn.transpose(kh)), 1.0 / math.sqrt(dh))
        heads.append(tn.matmul(tn.softmax(scores, mask), vh))
    return _linear(params, prefix + ".o", tn.concat(heads, axis=-1))


def _feed_forward(params, prefix, x):
    act = tn.gelu if params.config.activation == "gelu" else tn.relu
    return _linear(params, prefix + ".ff2", act(_linear(params, prefix + ".ff1", x)))


# ---------------------------------------------------------------- encoder / CTC

@dataclass
class EncoderOutput:
    frames: Tensor
    frame_count: int


def stack_frames(features, factor):
    features = np.asarray(features, dtype=np.float64)
    T, F = features.shape
    Tp = -(-T // factor)
    padded = np.zeros((Tp * factor, F))
    padded[:T] = features
    return padded.reshape(Tp, factor * F)


def encoder_forward(features, params):
    cfg = params.config
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise EmptyInputError("encoder input has no frames")
    if features.shape[1] != cfg.feature_dim:
        raise ContractError(f"feature dim {features.shape[1]} != {cfg.feature_dim}")
    if not np.all(np.isfinite(features)):
        raise ContractError("encoder input contains non-finite values")
    stacked = stack_frames(features, cfg.subsample)
    x = _drop(tn.add(_linear(params, "enc.in", Tensor(stacked)), Tensor(params.positions(stacked.shape[0]))))
    for l in range(cfg.n_encoder_layers):
        p = f"enc.{l}"
        h = _layer_norm(params, p + ".ln1", x)
        x = tn.add(x, _drop(_attention(params, p + ".att", h, h, None)))
        x = tn.add(x, _drop(_feed_forward(params, p, _layer_norm(params, p + ".ln2", x))))
    x = _layer_norm(params, "enc.ln", x)
    return EncoderOutput(x, stacked.shape[0])


def ctc_head(enc, params):
    """Frame log-probabilities, shape (frame_count, vocab_size)."""
    return tn.log_softmax(_linear(params, "ctc", enc.frames))


# ---------------------------------------------------------------- masks

@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray

    def additive(self):
        return np.where(self.allowed, 0.0, -np.inf)


def build_causal_mask(L):
    if L < 1:
        raise EmptyInputError("mask length must be positive")
    return AttentionMask(np.tril(np.ones((L, L), dtype=bool)))


def build_block_mask(L, block_start, block_end):
    if L < 1:
        raise EmptyInputError("mask length must be positive")
    if not 1 <= block_start <= block_end <= L:
        raise ContractError(f"block [{block_start}, {block_end}] outside [1, {L}]")
    keys = np.ones(L, dtype=bool)
    keys[block_start - 1:block_end] = False
    return AttentionMask(np.broadcast_to(keys, (L, L)).copy())


# ---------------------------------------------------------------- decoders

def _decoder(params, which, tokens, enc, self_mask, conceal=None):
    cfg = params.config
    pre = params.decoder_prefix(which)
    tokens = np.asarray(tokens, dtype=np.int64)
    L = tokens.shape[-1]
    x = tn.embedding(params[pre + ".emb"], tokens)
    if conceal is not None:
        keep = np.repeat((~conceal)[..., None].astype(np.float64), cfg.d_model, axis=-1)
        x = tn.mul(x, Tensor(keep))
    # positions go in after zeroing so concealed slots keep their position
    x = _drop(tn.add(x, Tensor(params.positions(L))))
    mem = enc.frames
    for l in range(cfg.n_decoder_layers):
        p = f"{pre}.{l}"
        h = _layer_norm(params, p + ".ln1", x)
        x = tn.add(x, _drop(_attention(params, p + ".self", h, h, self_mask)))
        h = _layer_norm(params, p + ".ln2", x)
        x = tn.add(x, _drop(_attention(params, p + ".cross", h, mem, None)))
        x = tn.add(x, _drop(_feed_forward(params, p, _layer_norm(params, p + ".ln3", x))))
    x = _layer_norm(params, pre + ".ln", x)
    return tn.log_softmax(_linear(params, pre + ".out", x))


def _check_len(params, L):
    if L > params.config.max_len:
        raise ContractError(f"decoder input length {L} exceeds max_len {params.config.max_len}")
    if L < 1:
        raise EmptyInputError("decoder input is empty")


def ar_decoder_batch(token_matrix, enc, params):
    """Causal decoder over an (n, L) batch of sos-prefixed rows -> (n, L, V)."""
    token_matrix = np.atleast_2d(np.asarray(token_matrix, dtype=np.int64))
    L = token_matrix.shape[1]
    _check_len(params, L)
    return _decoder(params, "ar", token_matrix, enc, build_causal_mask(L).additive())


def ar_decoder_forward(tokens, enc, params):
    """Row j is the distribution of the token following ``tokens[:j+1]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0 or tokens[0] != SOS:
        raise ContractError("AR decoder input must start with sos")
    out = ar_decoder_batch(tokens[None, :], enc, params)
    return tn.slice_(out, 0)


def amd_decoder_batch(token_matrix, blocks, enc, params):
    """AMD decoder over an (n, L) batch, row r concealing ``blocks[r]``.

    Returns all (n, L, V) rows; only rows inside each row's block are
    meaningful predictions.
    """
    token_matrix = np.atleast_2d(np.asarray(token_matrix, dtype=np.int64))
    n, L = token_matrix.shape
    _check_len(params, L)
    if len(blocks) != n:
        raise ContractError("one block per batch row is required")
    masks = np.empty((n, L, L))
    conceal = np.zeros((n, L), dtype=bool)
    for r, (s, e) in enumerate(blocks):
        masks[r] = build_block_mask(L, s, e).additive()
        conceal[r, s - 1:e] = True
    return _decoder(params, "amd", token_matrix, enc, masks, conceal)


def amd_decoder_forward(tokens, block_start, block_end, enc, params):
    """Log-probability rows for positions ``block_start..block_end``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    L = tokens.shape[0]
    if not 1 <= block_start <= block_end <= L:
        raise ContractError(f"block [{block_start}, {block_end}] outside [1, {L}]")
    out = amd_decoder_batch(tokens[None, :], [(block_start, block_end)], enc, params)
    return tn.slice_(out, (0, slice(block_start - 1, block_end)))


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def write_archive(path, magic, header, arrays):
    """``magic`` + u64 header length + JSON header + little-endian float64 payload."""
    directory, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        directory.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = dict(header, tensors=directory)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def read_archive(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", raw, 4)
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    base = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 8 * count > len(raw):
            raise CheckpointError(f"{path}: tensor {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count,
                                              offset=start).reshape(entry["shape"]).astype(np.float64)
    return header, arrays


def save_checkpoint(params, path, meta=None, extra=None):
    arrays = {k: v.data for k, v in params.tensors.items()}
    if extra:
        arrays.update(extra)
    write_archive(path, CHECKPOINT_MAGIC,
                  {"config": asdict(params.config), "meta": meta or {}}, arrays)


def load_checkpoint(path, with_extra=False):
    header, arrays = read_archive(path, CHECKPOINT_MAGIC)
    config = ModelConfig(**header["config"])
    names = param_shapes(config)
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:3]}")
    params = ModelParams(config, {n: Tensor(arrays[n], requires_grad=True) for n in names})
    if not with_extra:
        return params
    extra = {k: v for k, v in arrays.items() if k not in names}
    return params, header.get("meta", {}), extra
