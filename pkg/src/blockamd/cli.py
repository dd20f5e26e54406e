"""``blockamd`` command line: gen, train, decode, bench, analyze.

Every command accepts ``--config`` (YAML with flat dotted keys such as
``train.epochs: 30``); explicit flags override file values.  Each run writes
``effective_config.yaml`` and ``manifest.json`` into its output directory.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import yaml

from . import evaluation as E
from . import model as M
from . import synthdata as S
from . import training as T
from .search import parse_schedule

log = logging.getLogger("blockamd")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- config plumbing

def load_config_file(path):
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a mapping of flat keys")
    flat = {}

    def walk(prefix, obj):
        for k, v in obj.items():
            key = f"{prefix}.{k}" if prefix else str(k)
            if isinstance(v, dict):
                walk(key, v)
            else:
                flat[key] = v

    walk("", data)
    return flat


def effective(defaults, file_cfg, overrides):
    cfg = dict(defaults)
    for key, value in file_cfg.items():
        if key not in cfg:
            raise ValidationError(f"unknown config key {key!r}")
        cfg[key] = value
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def dump_config(cfg):
    return yaml.safe_dump({k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())},
                          sort_keys=True, default_flow_style=None)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def finish_run(out_dir, command, cfg, inputs, outputs):
    text = dump_config(cfg)
    with open(os.path.join(out_dir, "effective_config.yaml"), "w") as fh:
        fh.write(text)
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "inputs": [{"path": os.path.basename(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": sorted(os.path.basename(p) for p in outputs) + ["effective_config.yaml"],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _floats(text, n, name):
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(",")]
        except ValueError as exc:
            raise ValidationError(f"--{name}: expected {n} comma-separated numbers") from exc
    if len(vals) != n:
        raise ValidationError(f"--{name}: expected {n} values, got {len(vals)}")
    return tuple(vals)


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------- gen

CORPUS_DEFAULTS = {f"corpus.{f.name}": f.default for f in fields(S.CorpusConfig)}


def cmd_gen(args):
    cfg = effective(CORPUS_DEFAULTS, load_config_file(args.config), {
        "corpus.seed": args.seed, "corpus.utterance_count": args.utterances,
        "corpus.noise_std": args.noise_std, "corpus.min_len": args.min_len,
        "corpus.max_len": args.max_len})
    try:
        ccfg = S.CorpusConfig(**{k.split(".", 1)[1]: v for k, v in cfg.items()})
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    out = _ensure_dir(args.out)
    path = os.path.join(out, "corpus.amdc")
    S.save_corpus(S.generate_corpus(ccfg), path)
    finish_run(out, "gen", cfg, [], [path])
    print(path)


# ---------------------------------------------------------------- train

MODEL_DEFAULTS = {f"model.{f.name}": f.default for f in fields(M.ModelConfig)
                  if f.name not in ("vocab_size", "feature_dim")}
TRAIN_DEFAULTS = {
    "train.gammas": (0.4, 0.3, 0.3),
    "train.peak_lr": T.TrainConfig.peak_lr,
    "train.warmup_steps": T.TrainConfig.warmup_steps,
    "train.batch_size": T.TrainConfig.batch_size,
    "train.epochs": T.TrainConfig.epochs,
    "train.seed": 0,
    "train.n_block_samples": T.TrainConfig.n_block_samples,
    "train.grad_clip": T.TrainConfig.grad_clip,
    "train.dev_limit": T.TrainConfig.dev_limit,
    "train.dropout": T.TrainConfig.dropout,
}


def _load_corpus(path):
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"corpus not found: {path}")
    return S.load_corpus(path)


def build_train(cfg, corpus):
    try:
        mcfg = M.ModelConfig(vocab_size=corpus.config.model_vocab_size,
                             feature_dim=corpus.config.feature_dim,
                             **{k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.")})
        g = _floats(cfg["train.gammas"], 3, "gammas")
        tcfg = T.TrainConfig(weights=T.LossWeights(*g), peak_lr=float(cfg["train.peak_lr"]),
                             warmup_steps=int(cfg["train.warmup_steps"]),
                             batch_size=int(cfg["train.batch_size"]), epochs=int(cfg["train.epochs"]),
                             seed=int(cfg["train.seed"]), n_block_samples=int(cfg["train.n_block_samples"]),
                             grad_clip=float(cfg["train.grad_clip"]), dev_limit=int(cfg["train.dev_limit"]),
                             dropout=float(cfg["train.dropout"]))
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    return mcfg, tcfg


def cmd_train(args):
    cfg = effective({**MODEL_DEFAULTS, **TRAIN_DEFAULTS}, load_config_file(args.config), {
        "train.gammas": args.gammas, "train.epochs": args.epochs, "train.seed": args.seed,
        "train.peak_lr": args.lr, "train.batch_size": args.batch_size})
    if isinstance(cfg["train.gammas"], str):
        cfg["train.gammas"] = _floats(cfg["train.gammas"], 3, "gammas")
    corpus = _load_corpus(args.corpus)
    mcfg, tcfg = build_train(cfg, corpus)
    out = _ensure_dir(args.out)
    state_path = os.path.join(out, "train_state.ckpt")
    model_path = os.path.join(out, "model.ckpt")
    metrics_path = os.path.join(out, "metrics.jsonl")
    start_epoch, opt = 0, None
    if args.resume and os.path.exists(state_path):
        params, meta, extra = M.load_checkpoint(state_path, with_extra=True)
        if params.config != mcfg:
            raise ValidationError("checkpoint model config differs from requested config")
        opt = T.Adam(params, tcfg.peak_lr, tcfg.warmup_steps)
        opt.load_state(extra, meta["step"])
        start_epoch = int(meta["epoch"])
        log.info("resuming from epoch %d", start_epoch)
    else:
        params = M.ModelParams.init(mcfg, tcfg.seed)
        if os.path.exists(metrics_path):
            os.remove(metrics_path)

    def checkpoint(epoch, p, o):
        M.save_checkpoint(p, state_path, meta={"epoch": epoch, "step": o.step_count},
                          extra=o.state_arrays())
        M.save_checkpoint(p, model_path, meta={"epoch": epoch})

    T.train(tcfg, corpus, params, metrics_path=metrics_path, start_epoch=start_epoch,
            optimizer=opt, on_epoch_end=checkpoint)
    if not os.path.exists(model_path):
        M.save_checkpoint(params, model_path, meta={"epoch": start_epoch})
    finish_run(out, "train", cfg, [args.corpus], [model_path, state_path, metrics_path])
    print(model_path)


# ---------------------------------------------------------------- decode

DECODE_DEFAULTS = {
    "decode.mode": "greedy-ar",
    "decode.beam": 10,
    "decode.schedule": "fixed:1",
    "decode.k_amd": 1,
    "decode.k_main": 1,
    "decode.lambdas": None,
    "decode.split": "test",
    "decode.limit": 0,
    "decode.workers": 1,
    "decode.ar_every_slot": False,
}


def _system_from(cfg):
    mode = cfg["decode.mode"]
    lam = cfg["decode.lambdas"]
    if mode not in E.MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    n = 3 if mode == "amd" else 2
    if lam is None:
        lam = (0.3, 0.3, 0.4) if mode == "amd" else (0.7, 0.3)
    lam = _floats(lam, n, "lambdas")
    try:
        parse_schedule(cfg["decode.schedule"])
        return E.DecodeSystem(name=mode, mode=mode, beam=int(cfg["decode.beam"]) if mode == "beam-ctc-ar" else 1,
                              schedule=cfg["decode.schedule"], k_amd=int(cfg["decode.k_amd"]),
                              k_main=int(cfg["decode.k_main"]), lambdas=lam,
                              ar_every_slot=bool(cfg["decode.ar_every_slot"]))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


_WORKER = {}


def _worker_init(model_path, system):
    _WORKER["params"] = M.load_checkpoint(model_path)
    _WORKER["system"] = system


def _worker_decode(utt):
    nb, secs = E.decode_utterance(_WORKER["system"], utt, _WORKER["params"])
    return E.decode_record(utt, nb, secs)


def _select(corpus, split, limit):
    if split not in corpus.splits:
        raise ValidationError(f"unknown split {split!r}")
    utts = corpus[split]
    return utts[:limit] if limit else utts


def cmd_decode(args):
    cfg = effective(DECODE_DEFAULTS, load_config_file(args.config), {
        "decode.mode": args.mode, "decode.beam": args.beam, "decode.schedule": args.schedule,
        "decode.k_amd": args.k_amd, "decode.k_main": args.k_main, "decode.lambdas": args.lambdas,
        "decode.split": args.split, "decode.limit": args.limit, "decode.workers": args.workers})
    system = _system_from(cfg)
    cfg["decode.lambdas"] = list(system.lambdas)
    if not os.path.exists(args.model):
        raise FileNotFoundError(f"model not found: {args.model}")
    corpus = _load_corpus(args.corpus)
    utts = _select(corpus, cfg["decode.split"], int(cfg["decode.limit"]))
    workers = int(cfg["decode.workers"])
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(args.model, system)) as ex:
            records = list(ex.map(_worker_decode, utts))
    else:
        _worker_init(args.model, system)
        records = [_worker_decode(u) for u in utts]
    out = _ensure_dir(args.out)
    path = os.path.join(out, "decode.jsonl")
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    refs = [r["reference"] for r in records]
    hyps = [r["hypothesis"] for r in records]
    print(f"{len(records)} utterances, WER {E.token_error_rate(refs, hyps):.4f}")
    finish_run(out, "decode", cfg, [args.model, args.corpus], [path])


# ---------------------------------------------------------------- bench / analyze

def default_systems():
    return [
        E.DecodeSystem("ctc-ar-greedy", "greedy-ar", lambdas=(0.7, 0.3)),
        E.DecodeSystem("amd-fixed1", "amd", schedule="fixed:1", lambdas=(0.3, 0.3, 0.4)),
        E.DecodeSystem("amd-fixed2", "amd", schedule="fixed:2", lambdas=(0.3, 0.3, 0.4)),
        E.DecodeSystem("amd-fixed4", "amd", schedule="fixed:4", lambdas=(0.3, 0.3, 0.4)),
        E.DecodeSystem("amd-fixed8", "amd", schedule="fixed:8", lambdas=(0.3, 0.3, 0.4)),
        E.DecodeSystem("amd-mixed10-2", "amd", schedule="mixed:10-2", lambdas=(0.3, 0.3, 0.4)),
        E.DecodeSystem("amd-mixed10-4", "amd", schedule="mixed:10-4", lambdas=(0.3, 0.3, 0.4)),
        E.DecodeSystem("amd-mixed30-8", "amd", schedule="mixed:30-8", lambdas=(0.3, 0.3, 0.4)),
    ]


def cmd_bench(args):
    cfg = effective({"bench.split": "test", "bench.limit": 0, "bench.repetitions": 3},
                    load_config_file(args.config),
                    {"bench.split": args.split, "bench.limit": args.limit,
                     "bench.repetitions": args.repetitions})
    if not os.path.exists(args.model):
        raise FileNotFoundError(f"model not found: {args.model}")
    params = M.load_checkpoint(args.model)
    utts = _select(_load_corpus(args.corpus), cfg["bench.split"], int(cfg["bench.limit"]))
    report = E.benchmark(default_systems(), utts, params, repetitions=int(cfg["bench.repetitions"]))
    out = _ensure_dir(args.out)
    jpath, cpath = os.path.join(out, "bench.json"), os.path.join(out, "bench.csv")
    with open(jpath, "w") as fh:
        fh.write(E.report_json(report) + "\n")
    with open(cpath, "w") as fh:
        fh.write(E.report_csv(report))
    print(E.report_csv(report), end="")
    finish_run(out, "bench", cfg, [args.model, args.corpus], [jpath, cpath])


def cmd_analyze(args):
    cfg = effective({"analyze.split": "test", "analyze.limit": 50, "analyze.k_max": 20,
                     "analyze.blocks": [2, 4, 8]}, load_config_file(args.config),
                    {"analyze.split": args.split, "analyze.limit": args.limit, "analyze.k_max": args.k_max,
                     "analyze.blocks": [int(b) for b in args.blocks.split(",")] if args.blocks else None})
    if not os.path.exists(args.model):
        raise FileNotFoundError(f"model not found: {args.model}")
    params = M.load_checkpoint(args.model)
    utts = _select(_load_corpus(args.corpus), cfg["analyze.split"], int(cfg["analyze.limit"]))
    rows = E.density_sweep(utts, params, tuple(cfg["analyze.blocks"]), range(1, int(cfg["analyze.k_max"]) + 1))
    out = _ensure_dir(args.out)
    path = os.path.join(out, "sweep.csv")
    with open(path, "w") as fh:
        fh.write(E.sweep_csv(rows))
    finish_run(out, "analyze", cfg, [args.model, args.corpus], [path])
    print(path)


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="blockamd", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--utterances", type=int)
    g.add_argument("--noise-std", type=float)
    g.add_argument("--min-len", type=int)
    g.add_argument("--max-len", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--gammas", help="CTC,AR,AMD loss weights, e.g. 0.4,0.3,0.3")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/train_state.ckpt")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode a corpus split")
    d.add_argument("--config")
    d.add_argument("--model", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=E.MODES)
    d.add_argument("--beam", type=int)
    d.add_argument("--schedule", help="fixed:B or mixed:N-B")
    d.add_argument("--k-amd", type=int)
    d.add_argument("--k-main", type=int)
    d.add_argument("--lambdas", help="ctc,ar (CTC+AR modes) or ctc,amd,ar (amd mode)")
    d.add_argument("--split")
    d.add_argument("--limit", type=int)
    d.add_argument("--workers", type=int)
    d.set_defaults(func=cmd_decode)

    b = sub.add_parser("bench", help="RTF / WER benchmark of the standard systems")
    b.add_argument("--config")
    b.add_argument("--model", required=True)
    b.add_argument("--corpus", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--split")
    b.add_argument("--limit", type=int)
    b.add_argument("--repetitions", type=int)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("analyze", help="density / oracle-WER sweep over beam size K")
    a.add_argument("--config")
    a.add_argument("--model", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split")
    a.add_argument("--limit", type=int)
    a.add_argument("--k-max", type=int)
    a.add_argument("--blocks", help="comma-separated AMD block sizes")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, M.ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (T.TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, S.CorpusFormatError, M.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
