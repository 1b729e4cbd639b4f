"""Encoding and decoding benchmarks.

Encoding time is measured per mode (training-style single pass, query
slicing, batch-step streaming) and step size on seeded synthetic audio,
split into a batch of equal-length utterances. Each row reports the median
wall time over repeats.
"""
from typing import List, Literal, Optional, Sequence
import math
import time

import numpy as np
from loguru import logger
from pydantic import BaseModel

from .attention import AttentionMeter, ContextConfig
from .config import FRAME_MS, STREAMING_LEFT_CONTEXT
from .data import Dataset
from .infer import LabelCache, beam_decode, encode_streaming, greedy_decode, query_slice_encode
from .metrics import rtf
from .transducer import TransducerModel

BENCH_MODES = ('training', 'query-slice', 'batch-step')
BENCH_UTTERANCES = 8

Mode = Literal['training', 'query-slice', 'batch-step']


class BenchRow(BaseModel):
    mode: Mode
    step_size: int
    audio_seconds: float
    wall_seconds: float
    rtf: float
    frames: int
    outputs: int
    repeats: int
    peak_attention: int = 0


class DecodeBenchRow(BaseModel):
    label_encoder: str
    beam: int
    cache: bool
    utterances: int
    audio_seconds: float
    wall_seconds: float
    rtf: float
    label_encoder_calls: int
    cache_hits: int = 0


def synthetic_audio(audio_seconds: float, feature_dim: int, frame_ms: float = FRAME_MS,
                    seed: int = 0, utterances: int = BENCH_UTTERANCES) -> List[np.ndarray]:
    """Seeded Gaussian features covering ``audio_seconds``, split into equal utterances."""
    frames = int(math.ceil(audio_seconds * 1000.0 / frame_ms))
    rng = np.random.default_rng(seed)
    audio = rng.standard_normal((frames, feature_dim))
    return [chunk for chunk in np.array_split(audio, utterances) if len(chunk)]


def default_bench_config(model: TransducerModel) -> ContextConfig:
    """Causal config with a finite left context, valid for every mode."""
    return model.context([0] * model.spec.depth, left=STREAMING_LEFT_CONTEXT)


def _encode_once(model: TransducerModel, batch: Sequence[np.ndarray], mode: str, step_size: int,
                 cfg: ContextConfig, meter: AttentionMeter) -> int:
    outputs = 0
    for x in batch:
        if mode == 'training':
            encoded = model.encoder.encode(x, cfg, meter=meter)
        elif mode == 'query-slice':
            encoded = query_slice_encode(model, x, step_size, cfg, meter)
        else:
            encoded = encode_streaming(model, x, cfg, step_size, meter)
        outputs += len(encoded)
    return outputs


def bench_encode(model: TransducerModel, mode: str, step_size: int, audio_seconds: float = 100.0,
                 repeats: int = 5, cfg: Optional[ContextConfig] = None, seed: int = 0) -> BenchRow:
    """Median encode time of ``audio_seconds`` of synthetic audio in one mode.

    Args:
        model: Model to benchmark
        mode: 'training', 'query-slice' or 'batch-step'
        step_size: Query block size (query-slice) or frames per call (batch-step)
        audio_seconds: Total synthetic audio duration
        repeats: Timed repetitions, the median is reported
        cfg: Context config; defaults to causal with the streaming left context
        seed: Seed of the synthetic features

    Returns:
        BenchRow with wall time and RTF
    """
    if mode not in BENCH_MODES:
        raise ValueError(f"unknown bench mode {mode!r}, expected one of {BENCH_MODES}")
    if step_size < 1 or repeats < 1:
        raise ValueError("step size and repeats must be >= 1")
    cfg = cfg or default_bench_config(model)
    batch = synthetic_audio(audio_seconds, model.spec.feature_dim, cfg.frame_ms, seed)
    frames = sum(len(x) for x in batch)

    timings = []
    outputs = 0
    meter = AttentionMeter()
    for _ in range(repeats):
        started = time.perf_counter()
        outputs = _encode_once(model, batch, mode, step_size, cfg, meter)
        timings.append(time.perf_counter() - started)
    wall = float(np.median(timings))
    seconds = frames * cfg.frame_ms / 1000.0
    row = BenchRow(mode=mode, step_size=step_size, audio_seconds=seconds, wall_seconds=wall,
                   rtf=rtf(wall, seconds), frames=frames, outputs=outputs, repeats=repeats,
                   peak_attention=meter.peak)
    logger.info(f"bench {mode} step {step_size}: {wall:.3f}s for {seconds:.1f}s audio (RTF {row.rtf:.4f})")
    return row


def bench_grid(model: TransducerModel, modes: Sequence[str], steps: Sequence[int],
               audio_seconds: float = 100.0, repeats: int = 5,
               cfg: Optional[ContextConfig] = None, seed: int = 0) -> List[BenchRow]:
    """One row per (mode, step size); training mode ignores the step size and runs once."""
    rows = []
    for mode in modes:
        for step in ([1] if mode == 'training' else steps):
            rows.append(bench_encode(model, mode, step, audio_seconds, repeats, cfg, seed))
    return rows


def bench_decode(model: TransducerModel, dataset: Dataset, cfg: ContextConfig, beam: int = 1,
                 use_cache: bool = True) -> DecodeBenchRow:
    """Decode RTF and label-encoder evaluations with and without the label cache."""
    encodings = [model.audio_encode(utt.features, cfg) for utt in dataset]
    cache = LabelCache() if use_cache else None
    calls_before = model.label_encoder_calls
    started = time.perf_counter()
    for enc in encodings:
        if beam == 1:
            greedy_decode(enc, model, cache=cache)
        else:
            beam_decode(enc, model, beam, cache)
    wall = time.perf_counter() - started
    audio = dataset.audio_seconds
    row = DecodeBenchRow(
        label_encoder=model.spec.label_tag,
        beam=beam,
        cache=use_cache,
        utterances=len(dataset),
        audio_seconds=audio,
        wall_seconds=wall,
        rtf=rtf(wall, audio),
        label_encoder_calls=model.label_encoder_calls - calls_before,
        cache_hits=cache.hits if cache is not None else 0,
    )
    logger.info(
        f"decode bench {row.label_encoder} beam {beam} cache {use_cache}: RTF {row.rtf:.4f}, "
        f"{row.label_encoder_calls} label-encoder calls"
    )
    return row
