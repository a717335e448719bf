"""Command-line interface: ``python -m onlinectc <command>``.

Commands: ``synth`` (synthetic dataset), ``train`` (from a key=value config
file), ``decode`` (JSONL result records), ``bench`` (encoder timing) and
``cer``. Exit status is 0 on success, 1 for usage errors and 2 for bad or
inconsistent input data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import synth
from .bench import compare_modes, time_chunks
from .decoding import DecodeConfig, decode_offline, decode_streaming
from .encoder import ISOLATED, STATE_REUSE
from .formats import FormatError, load_model, read_features, read_transcripts, save_model, write_features, write_transcripts
from .lm import lm_train
from .metrics import cer
from .model import ModelConfig, init_model
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_seed(seed):
    if seed is not None:
        return seed
    raw = os.environ.get("STFX_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"STFX_SEED must be an integer, got {raw!r}") from None


# ---- synth ----------------------------------------------------------------


def cmd_synth(out_dir, seed, num_utts, grammar_id, noise=0.3):
    """Write ``feats/<utt>.stfx`` files and a ``text`` transcript file."""
    if grammar_id not in synth.GRAMMARS:
        raise UsageError(f"unknown grammar id {grammar_id}; choose from {sorted(synth.GRAMMARS)}")
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    texts = {}
    for utt, feats, ids in synth.make_dataset(seed, num_utts, grammar_id, noise):
        write_features(out / "feats" / f"{utt}.stfx", feats)
        texts[utt] = synth.token_text(ids)
    write_transcripts(out / "text", texts)
    (out / "vocab").write_text(synth.ALPHABET + "\n", encoding="utf-8")
    return out


def load_dataset(data_dir):
    """``[(utt, features, token ids)]`` plus the alphabet of a dataset directory."""
    data_dir = Path(data_dir)
    try:
        texts = read_transcripts(data_dir / "text")
        alphabet = (data_dir / "vocab").read_text(encoding="utf-8").strip()
    except (OSError, FormatError) as err:
        raise DataError(str(err)) from None
    items = []
    for utt, text in texts.items():
        unknown = set(text) - set(alphabet)
        if unknown:
            raise DataError(f"{utt}: characters {sorted(unknown)} not in vocabulary {alphabet!r}")
        try:
            feats = read_features(data_dir / "feats" / f"{utt}.stfx")
        except (OSError, FormatError) as err:
            raise DataError(str(err)) from None
        items.append((utt, feats, synth.token_ids(text, alphabet)))
    return items, alphabet


# ---- train ----------------------------------------------------------------

_MODEL_KEYS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_RUN_KEYS = {"data": str, "out": str, "log": str, "lm_order": int}


def _convert(key, raw, kind, lineno):
    try:
        if kind in (bool, "bool"):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float", "float | None"):
            return None if raw.lower() == "none" else float(raw)
        return raw
    except ValueError:
        raise UsageError(f"line {lineno}: bad value {raw!r} for {key}") from None


def parse_config(text):
    """Parse ``key = value`` lines into ``(run, model, train)`` option dicts."""
    run, model, tr = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _RUN_KEYS:
            run[key] = _convert(key, raw, _RUN_KEYS[key], lineno)
        elif key in _MODEL_KEYS:
            model[key] = _convert(key, raw, _MODEL_KEYS[key].type, lineno)
        elif key in _TRAIN_KEYS:
            tr[key] = _convert(key, raw, _TRAIN_KEYS[key].type, lineno)
        else:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
    for required in ("data", "out"):
        if required not in run:
            raise UsageError(f"config is missing required key {required!r}")
    return run, model, tr


def cmd_train(config_path, seed=None):
    try:
        text = Path(config_path).read_text(encoding="utf-8")
    except OSError as err:
        raise UsageError(str(err)) from None
    run, model_opts, train_opts = parse_config(text)
    base = Path(config_path).parent
    data, alphabet = load_dataset(base / run["data"])
    if not data:
        raise DataError(f"{base / run['data']}: dataset is empty")
    if seed is not None or "seed" not in train_opts:
        train_opts["seed"] = resolve_seed(seed)
    model_opts.setdefault("vocab_size", synth.vocab_size(alphabet))
    model_opts.setdefault("feat_dim", data[0][1].shape[1])
    try:
        mcfg = ModelConfig(**model_opts)
        tcfg = TrainConfig(**train_opts)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None
    for utt, feats, _ in data:
        if feats.shape[1] != mcfg.feat_dim:
            raise DataError(f"{utt}: feature dim {feats.shape[1]} != model feat_dim {mcfg.feat_dim}")
    model = init_model(mcfg, tcfg.seed)
    log_path = base / run.get("log", run["out"] + ".log.jsonl")
    out_path = base / run["out"]
    with open(log_path, "w", encoding="utf-8") as log:
        train(model, [(f, y) for _, f, y in data], tcfg, on_epoch=lambda rec: log.write(json.dumps(rec) + "\n"))
    lm = None
    if run.get("lm_order", 2):
        sos = mcfg.sos
        lm = lm_train([y for _, _, y in data], run.get("lm_order", 2), vocab_size=mcfg.vocab_size, bos=sos, eos=sos)
    save_model(out_path, model, alphabet, lm)
    return out_path, log_path


# ---- decode ---------------------------------------------------------------


def _feature_inputs(paths):
    """Expand dataset directories and ``.stfx`` files into ``[(utt, features)]``."""
    items = []
    for raw in paths:
        path = Path(raw)
        files = sorted((path / "feats").glob("*.stfx")) if path.is_dir() else [path]
        if path.is_dir() and not files:
            raise DataError(f"{path}: no feature files found")
        for f in files:
            try:
                items.append((f.stem, read_features(f)))
            except (OSError, FormatError) as err:
                raise DataError(str(err)) from None
    return items


def _load_checkpoint(path):
    try:
        return load_model(path)
    except (OSError, FormatError) as err:
        raise DataError(str(err)) from None


def decode_record(utt, mode, result, vocab, cfg, compute_ms):
    best = result.best
    lat = result.latency
    return {
        "utt": utt,
        "mode": mode,
        "text": synth.token_text(best.labels, vocab),
        "tokens": [int(t) for t in best.labels],
        "score": best.score(cfg),
        "dec_score": best.dec_score,
        "ctc_score": best.ctc_score,
        "lm_score": best.lm_score,
        "endpoints": lat["endpoints"],
        "latency": {
            "algorithmic_ms": lat["algorithmic_ms"],
            "frontend_lookahead_ms": lat["frontend_lookahead_ms"],
            "token_emission_ms": lat["token_emission_ms"],
            "compute_ms": compute_ms,
        },
    }


def cmd_decode(checkpoint, inputs, stream=True, attention_weight=0.5, lm_weight=0.3, beam=10, lm_path=None, out=None, hyp=None):
    model, vocab, lm = _load_checkpoint(checkpoint)
    if lm_path is not None:
        lm = _load_checkpoint(lm_path)[2]
        if lm is None:
            raise DataError(f"{lm_path}: checkpoint holds no language model")
    cfg = DecodeConfig(attention_weight=attention_weight, lm_weight=lm_weight if lm is not None else 0.0, beam=beam)
    records = []
    for utt, feats in _feature_inputs(inputs):
        if feats.shape[1] != model.config.feat_dim:
            raise DataError(f"{utt}: feature dim {feats.shape[1]} does not match checkpoint feat_dim {model.config.feat_dim}")
        t0 = time.perf_counter()
        run = decode_streaming if stream else decode_offline
        result = run(model, feats, cfg, lm)
        compute_ms = (time.perf_counter() - t0) * 1000.0
        records.append(decode_record(utt, "stream" if stream else "offline", result, vocab, cfg, compute_ms))
    lines = "".join(json.dumps(r) + "\n" for r in records)
    if out:
        Path(out).write_text(lines, encoding="utf-8")
    else:
        sys.stdout.write(lines)
    if hyp:
        write_transcripts(hyp, {r["utt"]: r["text"] for r in records})
    return records


# ---- bench / cer ----------------------------------------------------------


def cmd_bench(checkpoint, inputs, mode="both", repeats=20, seed=0):
    if checkpoint:
        model = _load_checkpoint(checkpoint)[0]
    else:
        model = init_model(ModelConfig.full_size(), seed)
    if inputs:
        feats = np.concatenate([f for _, f in _feature_inputs(inputs)])
    else:
        chunk = model.config.chunk
        frames = chunk.left + 5 * chunk.center + chunk.right
        feats = np.random.default_rng(seed).normal(size=(frames, model.config.feat_dim))
    if feats.shape[1] != model.config.feat_dim:
        raise DataError(f"feature dim {feats.shape[1]} does not match checkpoint feat_dim {model.config.feat_dim}")
    chunk = model.config.chunk
    try:
        if mode == "both":
            report = compare_modes(model.encoder, feats, chunk, repeats)
        else:
            times = time_chunks(model.encoder, feats, chunk, ISOLATED if mode == "isolated" else STATE_REUSE, repeats)
            report = {mode: {"median_chunk_ms": float(np.median(times)) * 1000.0}}
    except ValueError as err:
        raise DataError(str(err)) from None
    report["repeats"] = repeats
    print(json.dumps(report))
    return report


def cmd_cer(hyp_path, ref_path):
    try:
        hyps, refs = read_transcripts(hyp_path), read_transcripts(ref_path)
        value = cer(refs, hyps)
    except KeyError as err:
        raise DataError(err.args[0]) from None
    except (OSError, FormatError) as err:
        raise DataError(str(err)) from None
    print(f"CER {value:.4f}")
    return value


# ---- entry point ----------------------------------------------------------


def build_parser():
    parser = _Parser(prog="onlinectc", description="Streaming CTC/attention speech recognition toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-utts", type=int, default=20)
    p.add_argument("--grammar", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.3)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("decode", help="decode feature files to JSONL result records")
    p.add_argument("checkpoint")
    p.add_argument("inputs", nargs="+", help="dataset directories or .stfx files")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--stream", dest="stream", action="store_true", default=True)
    group.add_argument("--offline", dest="stream", action="store_false")
    p.add_argument("--lambda", dest="attention_weight", type=float, default=0.5)
    p.add_argument("--gamma", dest="lm_weight", type=float, default=0.3)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--lm", dest="lm_path", help="checkpoint whose language model replaces the built-in one")
    p.add_argument("--out", help="write records here instead of stdout")
    p.add_argument("--hyp", help="also write a 'utt text' transcript file")

    p = sub.add_parser("bench", help="time the encoder in isolated and state-reuse modes")
    p.add_argument("--checkpoint", help="defaults to a randomly initialised full-size model")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--mode", choices=("isolated", "reuse", "both"), default="both")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("cer", help="character error rate between transcript files")
    p.add_argument("hyp")
    p.add_argument("ref")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args.out, resolve_seed(args.seed), args.num_utts, args.grammar, args.noise)
        elif args.command == "train":
            cmd_train(args.config, args.seed)
        elif args.command == "decode":
            if not 0.0 <= args.attention_weight <= 1.0 or args.beam < 1:
                raise UsageError("--lambda must lie in [0, 1] and --beam must be positive")
            cmd_decode(
                args.checkpoint,
                args.inputs,
                args.stream,
                args.attention_weight,
                args.lm_weight,
                args.beam,
                args.lm_path,
                args.out,
                args.hyp,
            )
        elif args.command == "bench":
            if args.repeats < 1:
                raise UsageError("--repeats must be positive")
            cmd_bench(args.checkpoint, args.inputs, args.mode, args.repeats, resolve_seed(args.seed))
        elif args.command == "cer":
            cmd_cer(args.hyp, args.ref)
    except UsageError as err:
        print(f"onlinectc: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"onlinectc: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
