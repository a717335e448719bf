"""Encoder cost in isolated versus state-reuse mode: counted positions and wall-clock."""

from __future__ import annotations

import time

import numpy as np

from .encoder import ISOLATED, STATE_REUSE, ChunkCache, encode_chunk, split_chunks


def steady_chunks(num_frames, config):
    """Chunks whose full left and right context lie inside the utterance."""
    return [
        s
        for s in split_chunks(num_frames, config)
        if s.history[1] - s.history[0] == config.left
        and s.central[1] - s.central[0] == config.center
        and s.future[1] - s.future[0] == config.right
    ]


def counted_positions(params, features, config, mode):
    """Per-chunk list of per-layer query positions evaluated by the encoder."""
    cache = ChunkCache.empty(len(params.layers), params.d_model)
    out = []
    n_layers = len(params.layers)
    for span in split_chunks(len(features), config):
        encode_chunk(params, cache, features, span, config, mode)
        out.append(cache.computed_positions[-n_layers:])
    return out


def expected_reduction(config):
    """Fraction of per-layer positions saved by state reuse in a steady chunk."""
    return config.left / (config.left + config.center + config.right)


def time_chunks(params, features, config, mode, repeats=20):
    """Wall-clock seconds of every steady chunk over ``repeats`` full passes.

    Returns an array of shape ``(repeats, steady chunks)``.
    """
    features = np.asarray(features, dtype=np.float64)
    spans = split_chunks(len(features), config)
    steady = {s.index for s in steady_chunks(len(features), config)}
    if not steady:
        raise ValueError("utterance too short to contain a chunk with full left and right context")
    rows = []
    for _ in range(repeats):
        cache = ChunkCache.empty(len(params.layers), params.d_model)
        row = []
        for span in spans:
            t0 = time.perf_counter()
            encode_chunk(params, cache, features, span, config, mode)
            dt = time.perf_counter() - t0
            if span.index in steady:
                row.append(dt)
        rows.append(row)
    return np.array(rows)


def compare_modes(params, features, config, repeats=20):
    """Median per-chunk time in both modes, their ratio, and counted positions."""
    report = {}
    # alternate passes so drift in machine load affects both modes alike
    times = {ISOLATED: [], STATE_REUSE: []}
    for _ in range(repeats):
        for mode in times:
            times[mode].append(time_chunks(params, features, config, mode, 1)[0])
    for mode in (ISOLATED, STATE_REUSE):
        positions = counted_positions(params, features, config, mode)
        steady = [positions[s.index] for s in steady_chunks(len(features), config)]
        report[mode] = {
            "median_chunk_ms": float(np.median(times[mode])) * 1000.0,
            "positions_per_layer": steady[0][0],
        }
    iso, reuse = report[ISOLATED], report[STATE_REUSE]
    report["speed_ratio"] = iso["median_chunk_ms"] / reuse["median_chunk_ms"]
    report["position_reduction"] = 1.0 - reuse["positions_per_layer"] / iso["positions_per_layer"]
    report["expected_reduction"] = expected_reduction(config)
    return report
