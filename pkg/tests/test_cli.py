import json

import pytest
import yaml

from blockamd import evaluation as E
from blockamd.cli import main

TINY_MODEL = {"model.d_model": 8, "model.n_heads": 2, "model.ff_dim": 8, "model.n_encoder_layers": 1,
              "model.n_decoder_layers": 1, "model.max_len": 16, "train.dev_limit": 2, "train.batch_size": 4,
              "train.warmup_steps": 2}


@pytest.fixture()
def run(tmp_path):
    def _run(*argv):
        return main([str(a) for a in argv])
    return _run


@pytest.fixture()
def corpus(tmp_path, run):
    assert run("gen", "--out", tmp_path / "c", "--seed", 7, "--utterances", 12, "--max-len", 6) == 0
    return tmp_path / "c" / "corpus.amdc"


@pytest.fixture()
def train_cfg(tmp_path):
    path = tmp_path / "train.yaml"
    path.write_text(yaml.safe_dump(TINY_MODEL))
    return path


def strip(path):
    return [E.strip_timing(json.loads(l)) for l in path.read_text().splitlines()]


def test_gen_is_reproducible_and_creates_dirs(tmp_path, run, corpus):
    out = tmp_path / "nested" / "again"
    assert run("gen", "--out", out, "--seed", 7, "--utterances", 12, "--max-len", 6) == 0
    assert (out / "corpus.amdc").read_bytes() == corpus.read_bytes()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen" and "corpus.amdc" in manifest["outputs"]
    assert (out / "effective_config.yaml").read_text() == (corpus.parent / "effective_config.yaml").read_text()


def test_invalid_range_fails_before_writing(tmp_path, run):
    assert run("gen", "--out", tmp_path / "bad", "--min-len", 5, "--max-len", 2) == 1
    assert not (tmp_path / "bad").exists()


def test_train_decode_reproducible(tmp_path, run, corpus, train_cfg):
    for k in (1, 2):
        assert run("train", "--config", train_cfg, "--corpus", corpus, "--out", tmp_path / f"t{k}",
                   "--epochs", 1) == 0
    a, b = tmp_path / "t1", tmp_path / "t2"
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    assert (a / "train_state.ckpt").read_bytes() == (b / "train_state.ckpt").read_bytes()
    assert strip(a / "metrics.jsonl") == strip(b / "metrics.jsonl")
    assert json.loads((a / "manifest.json").read_text()) == json.loads((b / "manifest.json").read_text())

    for k in (1, 2):
        assert run("decode", "--model", a / "model.ckpt", "--corpus", corpus, "--out", tmp_path / f"d{k}",
                   "--mode", "amd", "--schedule", "mixed:10-2", "--k-amd", 2, "--k-main", 2) == 0
    recs = strip(tmp_path / "d1" / "decode.jsonl")
    assert recs == strip(tmp_path / "d2" / "decode.jsonl")
    assert all(len(r["hypothesis"]) == len(r["nbest"][0]["tokens"]) for r in recs)


def test_decode_modes_and_workers(tmp_path, run, corpus, train_cfg):
    assert run("train", "--config", train_cfg, "--corpus", corpus, "--out", tmp_path / "t", "--epochs", 1) == 0
    model = tmp_path / "t" / "model.ckpt"
    assert run("decode", "--model", model, "--corpus", corpus, "--out", tmp_path / "b",
               "--mode", "beam-ctc-ar", "--beam", 10, "--lambdas", "0.7,0.3") == 0
    assert run("decode", "--model", model, "--corpus", corpus, "--out", tmp_path / "g",
               "--schedule", "fixed:1", "--k-amd", 1, "--k-main", 1, "--mode", "amd") == 0
    assert run("decode", "--model", model, "--corpus", corpus, "--out", tmp_path / "w", "--mode", "amd",
               "--workers", 2) == 0
    assert strip(tmp_path / "w" / "decode.jsonl") == strip(tmp_path / "g" / "decode.jsonl")
    cfg = yaml.safe_load((tmp_path / "b" / "effective_config.yaml").read_text())
    assert cfg["decode.lambdas"] == [0.7, 0.3] and cfg["decode.beam"] == 10


def test_resume_matches_uninterrupted(tmp_path, run, corpus, train_cfg):
    assert run("train", "--config", train_cfg, "--corpus", corpus, "--out", tmp_path / "full", "--epochs", 2) == 0
    assert run("train", "--config", train_cfg, "--corpus", corpus, "--out", tmp_path / "part", "--epochs", 1) == 0
    assert run("train", "--config", train_cfg, "--corpus", corpus, "--out", tmp_path / "part", "--epochs", 2,
               "--resume") == 0
    full, part = strip(tmp_path / "full" / "metrics.jsonl"), strip(tmp_path / "part" / "metrics.jsonl")
    assert [m["epoch"] for m in part] == [1, 2]
    assert abs(full[1]["loss"] - part[1]["loss"]) < 1e-9
    assert (tmp_path / "full" / "model.ckpt").read_bytes() == (tmp_path / "part" / "model.ckpt").read_bytes()


def test_flags_override_config_file(tmp_path, run, corpus, train_cfg):
    cfg = dict(TINY_MODEL, **{"train.epochs": 5, "train.gammas": [1.0, 0.0, 0.0]})
    train_cfg.write_text(yaml.safe_dump(cfg))
    assert run("train", "--config", train_cfg, "--corpus", corpus, "--out", tmp_path / "t", "--epochs", 1,
               "--gammas", "0.4,0.3,0.3") == 0
    eff = yaml.safe_load((tmp_path / "t" / "effective_config.yaml").read_text())
    assert eff["train.epochs"] == 1 and eff["train.gammas"] == [0.4, 0.3, 0.3]
    assert eff["model.d_model"] == 8


def test_bench_and_analyze_outputs(tmp_path, run, corpus, train_cfg):
    assert run("train", "--config", train_cfg, "--corpus", corpus, "--out", tmp_path / "t", "--epochs", 1) == 0
    model = tmp_path / "t" / "model.ckpt"
    for k in (1, 2):
        assert run("bench", "--model", model, "--corpus", corpus, "--out", tmp_path / f"b{k}",
                   "--repetitions", 1) == 0
    r1 = E.strip_timing(json.loads((tmp_path / "b1" / "bench.json").read_text()))
    r2 = E.strip_timing(json.loads((tmp_path / "b2" / "bench.json").read_text()))
    assert r1 == r2
    assert all(p["alpha"] == 0.05 for p in r1["significance"])
    assert (tmp_path / "b1" / "bench.csv").read_text().startswith("system,wer,oracle_wer,density,rtf")
    assert run("analyze", "--model", model, "--corpus", corpus, "--out", tmp_path / "a", "--limit", 2,
               "--k-max", 2, "--blocks", "2") == 0
    lines = (tmp_path / "a" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "system,K,density,oracle_wer" and len(lines) == 5


def test_exit_codes(tmp_path, run, corpus, train_cfg):
    assert run("train", "--corpus", tmp_path / "missing.amdc", "--out", tmp_path / "t") == 2
    assert run("train", "--corpus", corpus, "--out", tmp_path / "t", "--gammas", "1,2") == 1
    assert run("decode", "--model", tmp_path / "none.ckpt", "--corpus", corpus, "--out", tmp_path / "d") == 2
    (tmp_path / "junk.ckpt").write_bytes(b"JUNK")
    assert run("decode", "--model", tmp_path / "junk.ckpt", "--corpus", corpus, "--out", tmp_path / "d") == 2
    assert run("decode", "--model", tmp_path / "junk.ckpt", "--corpus", corpus, "--out", tmp_path / "d",
               "--schedule", "fixed:") == 1
    assert run("decode", "--bogus-flag") == 1
    (tmp_path / "bad.yaml").write_text("unknown.key: 3\n")
    assert run("gen", "--config", tmp_path / "bad.yaml", "--out", tmp_path / "g") == 1
    assert run("gen", "--config", tmp_path / "absent.yaml", "--out", tmp_path / "g") == 2


def test_numeric_failure_exit_code(tmp_path, run, corpus, train_cfg, monkeypatch):
    from blockamd import training as T

    def boom(*a, **k):
        raise T.TrainingDiverged("loss is nan")

    monkeypatch.setattr(T, "train", boom)
    assert run("train", "--config", train_cfg, "--corpus", corpus, "--out", tmp_path / "t") == 3
