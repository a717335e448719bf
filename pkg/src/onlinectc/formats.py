"""Binary feature files, checkpoints and transcript files.

All binary data is little-endian so files move between platforms unchanged.

Feature file (``.stfx``)::

    b"STFX" | u32 version | u32 frames | u32 dim | f32[frames*dim] row-major

Checkpoint::

    b"STCK" | u32 version | u32 manifest bytes | manifest (utf-8 key=value lines)
    | u32 block count | blocks

    block: u32 name bytes | name | u32 ndim | u32[ndim] shape | f64[prod(shape)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"STFX"
CHECKPOINT_MAGIC = b"STCK"
VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def write_features(path, features):
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError("features must be a 2-d frames x dim array")
    frames, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", VERSION, frames, dim))
        fh.write(np.ascontiguousarray(features).tobytes())


def read_features(path):
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, frames, dim = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[16:]
    if len(payload) != frames * dim * 4:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {frames * dim * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(frames, dim).astype(np.float64)


def save_checkpoint(path, manifest, blocks):
    """Write ``manifest`` (str -> scalar/str) and named float64 arrays."""
    text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", VERSION, len(text)) + text)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)) + encoded)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(manifest, blocks)`` with string values."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, mlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 12
    manifest = {}
    for line in raw[pos : pos + mlen].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        manifest[key] = value
    pos += mlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return manifest, blocks


def read_transcripts(path):
    """``utt_id text`` lines -> ordered dict."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        utt, _, text = line.partition(" ")
        if utt in out:
            raise FormatError(f"{path}:{n}: duplicate utterance id {utt}")
        out[utt] = text.strip()
    return out


def write_transcripts(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        for utt, text in items.items():
            fh.write(f"{utt} {text}\n")


def save_model(path, model, vocab, lm=None):
    """Checkpoint ``model`` with its token alphabet and an optional n-gram LM."""
    manifest = {"format": "onlinectc-checkpoint"}
    manifest.update(model.config.to_manifest())
    manifest["vocab"] = vocab
    blocks = {name: p.data for name, p in model.parameters().items()}
    if lm is not None:
        manifest["lm_order"] = lm.order
        manifest["lm_k"] = repr(lm.k)
        manifest["lm_unk"] = "" if lm.unk is None else lm.unk
        blocks["lm.unigram"] = lm.unigram
        blocks["lm.bigram"] = lm.bigram
    save_checkpoint(path, manifest, blocks)


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, vocab, lm or None)``."""
    from .lm import NgramModel
    from .model import ModelConfig, init_model

    manifest, blocks = load_checkpoint(path)
    if manifest.get("format") != "onlinectc-checkpoint":
        raise FormatError(f"{path}: not a model checkpoint")
    model = init_model(ModelConfig.from_manifest(manifest))
    params = model.parameters()
    missing = sorted(set(params) - set(blocks))
    if missing:
        raise FormatError(f"{path}: missing parameter blocks {missing[:3]}")
    for name, p in params.items():
        if blocks[name].shape != p.data.shape:
            raise FormatError(f"{path}: block {name} has shape {blocks[name].shape}, expected {p.data.shape}")
        p.data = blocks[name]
    lm = None
    if "lm_order" in manifest:
        unk = manifest.get("lm_unk", "")
        lm = NgramModel(
            order=int(manifest["lm_order"]),
            k=float(manifest["lm_k"]),
            unigram=blocks["lm.unigram"],
            bigram=blocks["lm.bigram"],
            unk=int(unk) if unk else None,
        )
    return model, manifest.get("vocab", ""), lm
