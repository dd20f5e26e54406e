import json

import numpy as np
import pytest

from blockamd import model as M
from blockamd import synthdata as S
from blockamd import tensor as tn
from blockamd import training as T
from blockamd.ctc import ctc_loss
from blockamd.tensor import Tensor
from gradcheck import check_gradients

TINY_CORPUS = S.CorpusConfig(seed=4, vocab_size=5, utterance_count=12, min_len=2, max_len=5,
                             feature_dim=4, dev_fraction=0.25, test_fraction=0.0)
TINY = M.ModelConfig(vocab_size=TINY_CORPUS.model_vocab_size, d_model=16, n_heads=2, ff_dim=32,
                     n_encoder_layers=1, n_decoder_layers=1, max_len=12, feature_dim=4)


@pytest.fixture(scope="module")
def corpus():
    return S.generate_corpus(TINY_CORPUS)


def fresh(seed=0):
    return M.ModelParams.init(TINY, seed)


def quick_config(**kw):
    base = dict(peak_lr=1e-2, warmup_steps=2, batch_size=4, epochs=1, dev_limit=3)
    base.update(kw)
    return T.TrainConfig(**base)


# ---------------------------------------------------------------- block sampling

def test_single_token_sentence_samples_one():
    assert T.sample_block_sizes(1, 7, np.random.default_rng(0)) == [1] * 7


def test_block_sampling_is_seeded():
    a = T.sample_block_sizes(9, 4, np.random.default_rng([3, 22]))
    b = T.sample_block_sizes(9, 4, np.random.default_rng([3, 22]))
    assert a == b and all(1 <= x <= 9 for x in a)


def test_block_sampling_is_uniform():
    draws = np.array(T.sample_block_sizes(8, 100_000, np.random.default_rng(0)))
    freq = np.bincount(draws, minlength=9)[1:] / draws.size
    assert np.all(np.abs(freq - 0.125) < 0.01)
    expected = draws.size / 8
    chi2 = (((freq * draws.size) - expected) ** 2 / expected).sum()
    assert chi2 < 24.32  # 0.999 quantile, 7 degrees of freedom


def test_tiling_anchors_at_one():
    assert T.tile(7, 3) == [(1, 3), (4, 6), (7, 7)]
    assert T.tile(4, 8) == [(1, 4)]
    assert T.tile(3, 1) == [(1, 1), (2, 2), (3, 3)]


# ---------------------------------------------------------------- AMD loss

def _enc(params, utt):
    return M.encoder_forward(utt.features, params)


def amd_oracle(params, enc, target, sizes):
    """Independent re-computation: one single-block forward per block, summed NLL."""
    total = 0.0
    L = len(target)
    for B in sizes:
        for s in range(1, L + 1, B):
            e = min(s + B - 1, L)
            rows = M.amd_decoder_forward(np.array(target), s, e, enc, params).data
            total -= sum(rows[j - s, target[j - 1]] for j in range(s, e + 1))
    return total


def test_amd_loss_matches_direct_summation(corpus):
    params = fresh(1)
    rng = np.random.default_rng(0)
    for utt in corpus["train"][:5]:
        enc = _enc(params, utt)
        target = list(utt.transcript[:3])
        for sizes in ([1, 2, 3, 1], [2], [3, 3], [1]):
            got = float(T.amd_loss(params, enc, target, sizes).data)
            assert abs(got - amd_oracle(params, enc, target, sizes)) < 1e-9
        sizes = T.sample_block_sizes(len(utt.transcript), 4, rng)
        got = float(T.amd_loss(params, enc, list(utt.transcript), sizes).data)
        assert abs(got - amd_oracle(params, enc, list(utt.transcript), sizes)) < 1e-9


def test_amd_loss_full_block_conceals_both_tokens(corpus):
    params = fresh(2)
    utt = corpus["train"][0]
    enc = _enc(params, utt)
    target = list(utt.transcript[:2])
    rows = M.amd_decoder_forward(np.array([M.MASK, M.MASK]), 1, 2, enc, params).data
    expect = -rows[0, target[0]] - rows[1, target[1]]
    assert float(T.amd_loss(params, enc, target, [2]).data) == pytest.approx(expect, abs=1e-12)


def test_amd_loss_duplicate_samples_add(corpus):
    params = fresh(3)
    utt = corpus["train"][1]
    enc = _enc(params, utt)
    one = float(T.amd_loss(params, enc, utt.transcript, [1]).data)
    two = float(T.amd_loss(params, enc, utt.transcript, [1, 1]).data)
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_amd_loss_rejects_empty_target(corpus):
    params = fresh()
    with pytest.raises(ValueError):
        T.amd_loss(params, _enc(params, corpus["train"][0]), [], [1])


@pytest.mark.parametrize("seed", range(3))
def test_amd_loss_gradient_matches_finite_differences(corpus, seed):
    params = fresh(seed)
    utt = corpus["train"][seed]
    rng = np.random.default_rng(seed)
    sizes = T.sample_block_sizes(len(utt.transcript), 2, rng)
    names = params.names()
    leaves = [params[n] for n in names]

    def fn(*_):
        return T.amd_loss(params, _enc(params, utt), utt.transcript, sizes)

    assert check_gradients(fn, leaves, coords=2, rng=rng, joint=True) < 1e-4


# ---------------------------------------------------------------- composite loss

def test_equal_components_give_weighted_mean():
    parts = {k: Tensor(2.5) for k in ("ctc", "ar", "amd")}
    assert float(T.combine(parts, T.LossWeights()).data) == pytest.approx(2.5, abs=1e-15)


def test_ctc_only_weights_reduce_to_ctc_loss(corpus):
    params = fresh(4)
    batch = corpus["train"][:3]
    loss, comps = T.tripartite_loss(params, batch, T.LossWeights(1, 0, 0), np.random.default_rng(0))
    direct = np.mean([float(ctc_loss(M.ctc_head(_enc(params, u), params), u.transcript)[0].data)
                      for u in batch])
    assert abs(float(loss.data) - direct) < 1e-12
    assert comps["ar"] == 0.0 and comps["amd"] == 0.0


def test_zero_amd_weight_is_the_hybrid_loss(corpus):
    params = fresh(5)
    batch = corpus["train"][:3]
    w = T.LossWeights(0.3, 0.7, 0.0)
    loss, _ = T.tripartite_loss(params, batch, w, np.random.default_rng(0))
    direct = []
    for u in batch:
        enc = _enc(params, u)
        direct.append(0.3 * float(ctc_loss(M.ctc_head(enc, params), u.transcript)[0].data)
                      + 0.7 * float(T.ar_loss(params, enc, u.transcript).data))
    assert abs(float(loss.data) - np.mean(direct)) < 1e-12


def test_dropout_only_changes_the_loss_when_enabled(corpus):
    params = fresh(5)
    batch = corpus["train"][:3]
    w = T.LossWeights()
    base, _ = T.tripartite_loss(params, batch, w, lambda i: np.random.default_rng(i))
    off, _ = T.tripartite_loss(params, batch, w, lambda i: np.random.default_rng(i), dropout=0.0,
                               dropout_rng=lambda i: np.random.default_rng(99))
    on1, _ = T.tripartite_loss(params, batch, w, lambda i: np.random.default_rng(i), dropout=0.2,
                               dropout_rng=lambda i: np.random.default_rng([7, i]))
    on2, _ = T.tripartite_loss(params, batch, w, lambda i: np.random.default_rng(i), dropout=0.2,
                               dropout_rng=lambda i: np.random.default_rng([7, i]))
    assert float(base.data) == float(off.data)
    assert float(on1.data) == float(on2.data) != float(base.data)
    with pytest.raises(ValueError):
        T.TrainConfig(dropout=1.0)


def test_ar_loss_is_teacher_forced_nll(corpus):
    params = fresh(6)
    u = corpus["train"][2]
    enc = _enc(params, u)
    rows = M.ar_decoder_forward(np.array((M.SOS,) + u.transcript), enc, params).data
    targets = list(u.transcript) + [M.EOS]
    expect = -sum(rows[j, t] for j, t in enumerate(targets))
    assert float(T.ar_loss(params, enc, u.transcript).data) == pytest.approx(expect, abs=1e-10)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        T.LossWeights(-0.1, 0.5, 0.6)
    with pytest.raises(ValueError):
        T.LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        T.TrainConfig(n_block_samples=0)


# ---------------------------------------------------------------- optimisation loop

def test_zero_learning_rate_leaves_params_unchanged(corpus):
    params = fresh(7)
    before = params.copy()
    T.train(quick_config(peak_lr=0.0, batch_size=8), corpus, params)
    assert all(np.array_equal(params[n].data, before[n].data) for n in params.names())


def test_one_step_moves_every_group(corpus):
    params = fresh(8)
    before = params.copy()
    opt = T.Adam(params, 1e-3, 1)
    params.zero_grad()
    loss, _ = T.tripartite_loss(params, corpus["train"][:4], T.LossWeights(), np.random.default_rng(0))
    tn.backward(loss)
    opt.step()
    moved = {params.group(n) for n in params.names() if not np.array_equal(params[n].data, before[n].data)}
    assert moved == set(M.GROUPS)


def test_ctc_only_training_leaves_decoders_alone(corpus):
    params = fresh(9)
    before = params.copy()
    T.train(quick_config(weights=T.LossWeights(1, 0, 0)), corpus, params)
    for n in params.names():
        same = np.array_equal(params[n].data, before[n].data)
        assert same == (params.group(n) in ("ar", "amd")), n


def test_same_seed_same_metrics(corpus, tmp_path):
    runs = []
    for k in range(2):
        path = tmp_path / f"m{k}.jsonl"
        T.train(quick_config(epochs=2), corpus, fresh(), metrics_path=path)
        runs.append([{kk: v for kk, v in json.loads(l).items() if kk != "wall_time"}
                     for l in path.read_text().splitlines()])
    assert runs[0] == runs[1]
    assert set(runs[0][0]) == {"epoch", "loss", "ctc", "ar", "amd", "dev_error", "steps"}


def test_resume_replays_uninterrupted_run(corpus, tmp_path):
    cfg = quick_config(epochs=3)
    full, full_metrics = T.train(cfg, corpus, fresh())

    def stop_after_first(epoch, params, opt):
        if epoch == 1:
            M.save_checkpoint(params, tmp_path / "s.ckpt", meta={"epoch": epoch, "step": opt.step_count},
                              extra=opt.state_arrays())

    T.train(T.TrainConfig(**{**cfg.__dict__, "epochs": 1}), corpus, fresh(), on_epoch_end=stop_after_first)
    params, meta, extra = M.load_checkpoint(tmp_path / "s.ckpt", with_extra=True)
    opt = T.Adam(params, cfg.peak_lr, cfg.warmup_steps)
    opt.load_state(extra, meta["step"])
    resumed, resumed_metrics = T.train(cfg, corpus, params, start_epoch=meta["epoch"], optimizer=opt)
    for a, b in zip(full_metrics[1:], resumed_metrics):
        assert a["epoch"] == b["epoch"]
        assert abs(a["loss"] - b["loss"]) < 1e-9
    assert all(np.array_equal(full[n].data, resumed[n].data) for n in full.names())


def test_non_finite_loss_aborts(corpus, monkeypatch):
    monkeypatch.setattr(T, "tripartite_loss", lambda *a, **k: (Tensor(np.nan), {"ctc": 0, "ar": 0, "amd": 0}))
    with pytest.raises(T.TrainingDiverged):
        T.train(quick_config(), corpus, fresh())


def test_warmup_then_inverse_sqrt():
    opt = T.Adam(fresh(), 1.0, 4)
    assert [opt.lr(s) for s in (1, 2, 4)] == [0.25, 0.5, 1.0]
    assert opt.lr(16) == pytest.approx(0.5)
