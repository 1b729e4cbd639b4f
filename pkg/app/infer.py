"""Streaming and offline decoding, including Y-model dual-latency sessions.

Streaming encoding runs the encoder as a pipeline of stages. Each stage
takes the rows its predecessor emitted and returns the rows whose context is
complete; a transformer layer holds rows back until ``right`` future frames
have arrived. The same pipeline serves batch-step streaming, the Y-model
branches (split after the shared layers) and the end-of-utterance flush.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Hashable, List, Literal, Optional, Sequence, Tuple
import time

import numpy as np
from loguru import logger
from pydantic import BaseModel

from .attention import (
    AttentionMeter,
    ContextConfig,
    LayerState,
    TransformerLayer,
    UnsupportedConfigError,
    stack_frames,
    unstack_frames,
)
from .config import SYMBOLS_PER_FRAME
from .nn import layer_norm_forward, linear
from .train import ConfigParseError, parse_context_config
from .transducer import TransducerModel


class SessionStateError(RuntimeError):
    """Operation not allowed in the session's current state."""


# ===== Label-encoder cache =====

class LabelCache:
    """Label-encoder outputs keyed by the encoder's limited label context."""

    def __init__(self):
        self._store: Dict[Hashable, np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def lookup(self, key: Hashable, compute: Callable[[], np.ndarray]) -> np.ndarray:
        value = self._store.get(key)
        if value is not None:
            self.hits += 1
            return value
        self.misses += 1
        value = compute()
        self._store[key] = value
        return value

    def __len__(self) -> int:
        return len(self._store)

    def clear(self) -> None:
        self._store.clear()


@dataclass(frozen=True)
class Hypothesis:
    labels: Tuple[int, ...] = ()
    frames: Tuple[int, ...] = ()
    score: float = 0.0
    key: Tuple[int, ...] = ()

    def text(self, vocab) -> str:
        return vocab.decode(self.labels)

    def times_ms(self, frame_ms: float) -> List[float]:
        return [frame * frame_ms for frame in self.frames]


# ===== Encoder stages =====

def _empty(width: int) -> np.ndarray:
    return np.zeros((0, width))


class ProjectionStage:
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = weight
        self.bias = bias

    def step(self, rows: np.ndarray, final: bool = False) -> np.ndarray:
        return linear(rows, self.weight, self.bias)


class LayerStage:
    """One transformer layer run incrementally over a growing key/value cache.

    A row at position p is emitted once position p + right has been
    received (or at the final step); its queries attend to every cached key,
    and the context mask restricts them to [p - left, p + right].
    """

    def __init__(self, layer: TransformerLayer, left: Optional[int], right: int,
                 meter: Optional[AttentionMeter] = None):
        self.layer = layer
        self.left = left
        self.right = right
        self.meter = meter
        self.state = LayerState()
        self.pending_x = _empty(layer.d)
        self.pending_q = None
        self.received = 0
        self.emitted = 0
        self.calls = 0
        self.forwarded = 0

    @property
    def pending(self) -> int:
        return self.received - self.emitted

    def step(self, rows: np.ndarray, final: bool = False) -> np.ndarray:
        if len(rows):
            q, k, v = self.layer.project(rows)
            self.state.append(k, v)
            self.pending_x = np.vstack([self.pending_x, rows])
            self.pending_q = q if self.pending_q is None else np.concatenate([self.pending_q, q], axis=-2)
            self.received += len(rows)

        ready = self.received if final else max(self.emitted, self.received - self.right)
        count = ready - self.emitted
        if count <= 0:
            return _empty(self.layer.d)

        q_pos = np.arange(self.emitted, ready)
        k_pos = np.arange(self.state.start, self.state.end)
        self.calls += 1
        self.forwarded += count
        ctx = self.layer.attend(self.pending_q[..., :count, :], self.state.keys, self.state.values,
                                q_pos, k_pos, self.left, self.right, self.meter)
        out = self.layer.finish(self.pending_x[:count], ctx)
        self.pending_x = self.pending_x[count:]
        self.pending_q = self.pending_q[..., count:, :]
        self.emitted = ready
        if self.left is not None:
            self.state.trim(self.emitted - self.left)
        return out


class StackStage:
    def __init__(self, factor: int, weight: np.ndarray, bias: np.ndarray, width: int):
        self.factor = factor
        self.weight = weight
        self.bias = bias
        self.buffer = _empty(width)

    def step(self, rows: np.ndarray, final: bool = False) -> np.ndarray:
        self.buffer = np.vstack([self.buffer, rows])
        whole = len(self.buffer) if final else len(self.buffer) // self.factor * self.factor
        take, self.buffer = self.buffer[:whole], self.buffer[whole:]
        if not len(take):
            return _empty(self.weight.shape[1])
        return linear(stack_frames(take, self.factor), self.weight, self.bias)


class UnstackStage:
    def __init__(self, factor: int, weight: np.ndarray, bias: np.ndarray):
        self.factor = factor
        self.weight = weight
        self.bias = bias
        self.limit: Optional[int] = None
        self.emitted = 0

    def step(self, rows: np.ndarray, final: bool = False) -> np.ndarray:
        out = unstack_frames(linear(rows, self.weight, self.bias), self.factor)
        if final and self.limit is not None:
            out = out[:max(0, self.limit - self.emitted)]
        self.emitted += len(out)
        return out


class NormStage:
    def __init__(self, gain: np.ndarray, bias: np.ndarray):
        self.gain = gain
        self.bias = bias

    def step(self, rows: np.ndarray, final: bool = False) -> np.ndarray:
        if not len(rows):
            return rows
        return layer_norm_forward(rows, self.gain, self.bias)[0]


def build_stages(model: TransducerModel, cfg: ContextConfig,
                 meter: Optional[AttentionMeter] = None) -> List[Any]:
    model.encoder.check_config(cfg)
    spec, p = model.spec, model.params
    stages: List[Any] = [ProjectionStage(p["enc.in.w"], p["enc.in.b"])]
    for i, layer in enumerate(model.encoder.layers):
        stages.append(LayerStage(layer, cfg.per_layer_left[i], cfg.per_layer_right[i], meter))
        if spec.stacked and i == spec.stack_after:
            stages.append(StackStage(spec.stack_factor, p["enc.stack.w"], p["enc.stack.b"], spec.d))
    if spec.stacked:
        stages.append(UnstackStage(spec.stack_factor, p["enc.unstack.w"], p["enc.unstack.b"]))
    stages.append(NormStage(p["enc.ln.g"], p["enc.ln.b"]))
    return stages


def split_after_layer(stages: Sequence[Any], layers: int) -> int:
    """Index in ``stages`` just past the ``layers``-th transformer layer."""
    if layers == 0:
        return 1
    seen = 0
    for index, stage in enumerate(stages):
        if isinstance(stage, LayerStage):
            seen += 1
            if seen == layers:
                return index + 1
    raise UnsupportedConfigError(f"pipeline has only {seen} layers, cannot split after {layers}")


# ===== Batch-step streaming =====

@dataclass
class StreamState:
    """Stage pipeline plus frame accounting for one stream.

    ``delay`` output rows are dropped from the front (output delay); at the
    final step output is cut at ``total - delay`` rows.
    ``padding`` holds the delay frames appended by ``end_stream``.
    """
    stages: List[Any]
    delay: int = 0
    padding: Optional[np.ndarray] = None
    width: int = 0
    out_width: int = 0
    consumed: int = 0
    produced: int = 0
    emitted: int = 0
    finished: bool = False

    @property
    def pending(self) -> int:
        return self.consumed - self.emitted

    def push(self, rows: np.ndarray, final: bool = False, total: Optional[int] = None) -> np.ndarray:
        if final:
            for stage in self.stages:
                if isinstance(stage, UnstackStage):
                    stage.limit = total
        for stage in self.stages:
            rows = stage.step(rows, final)
        start = self.produced
        self.produced += len(rows)
        rows = rows[max(0, self.delay - start):]
        if final and total is not None:
            rows = rows[:max(0, total - self.delay - self.emitted)]
        self.emitted += len(rows)
        return rows


def start_stream(model: TransducerModel, cfg: ContextConfig,
                 meter: Optional[AttentionMeter] = None) -> StreamState:
    return StreamState(build_stages(model, cfg, meter), delay=cfg.output_delay,
                       padding=model.encoder.padding(cfg.output_delay),
                       width=model.spec.feature_dim, out_width=model.spec.d)


def batch_step(state: StreamState, frames: np.ndarray) -> Tuple[np.ndarray, StreamState]:
    """Feed k new frames; return the encodings whose right context is complete."""
    if state.finished:
        raise SessionStateError("stream already ended")
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, state.width)
    if not len(frames):
        return _empty(state.out_width), state
    state.consumed += len(frames)
    return state.push(frames), state


def end_stream(state: StreamState) -> np.ndarray:
    """Flush: append the output-delay padding and encode everything pending."""
    if state.finished:
        raise SessionStateError("stream already ended")
    state.finished = True
    padding = state.padding if state.padding is not None else _empty(state.width)
    return state.push(padding, final=True, total=state.consumed + state.delay)


class StreamingEncoder:
    """Object wrapper over ``start_stream`` / ``batch_step`` / ``end_stream``."""

    def __init__(self, model: TransducerModel, cfg: ContextConfig,
                 meter: Optional[AttentionMeter] = None):
        self.cfg = cfg
        self.state = start_stream(model, cfg, meter)

    def step(self, frames: np.ndarray) -> np.ndarray:
        return batch_step(self.state, frames)[0]

    def flush(self) -> np.ndarray:
        return end_stream(self.state)


def encode_streaming(model: TransducerModel, x: np.ndarray, cfg: ContextConfig, step_size: int,
                     meter: Optional[AttentionMeter] = None) -> np.ndarray:
    """Batch-step encode of a whole sequence in chunks of ``step_size`` frames."""
    if step_size < 1:
        raise ValueError(f"step size must be >= 1, got {step_size}")
    encoder = StreamingEncoder(model, cfg, meter)
    chunks = [encoder.step(x[i:i + step_size]) for i in range(0, len(x), step_size)]
    chunks.append(encoder.flush())
    return np.vstack(chunks)


# ===== Query slicing =====

def query_slice_encode(model: TransducerModel, x: np.ndarray, block: int, cfg: ContextConfig,
                       meter: Optional[AttentionMeter] = None) -> np.ndarray:
    """Offline encode attending one query block at a time to the keys it may see.

    Per layer and head the attention matrix never exceeds
    block x (left + block + right) entries.
    """
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    if any(left is None for left in cfg.per_layer_left):
        raise UnsupportedConfigError("query slicing needs a finite left context in every layer")
    if cfg.has_full_context:
        raise UnsupportedConfigError("query slicing needs a finite right context in every layer")
    return model.encoder.encode(x, cfg, block=block, meter=meter)


# ===== Search =====

class StreamingGreedyDecoder:
    """Frame-synchronous greedy search that can be advanced chunk by chunk.

    At most ``cap`` labels are emitted per frame; when the cap is reached the
    search moves to the next frame without scoring a blank.
    """

    def __init__(self, model: TransducerModel, cap: int = SYMBOLS_PER_FRAME,
                 cache: Optional[LabelCache] = None):
        if cap < 1:
            raise ValueError("symbol cap must be >= 1")
        self.model = model
        self.cap = cap
        self.cache = cache
        self.blank = model.vocab.blank_id
        self.labels: List[int] = []
        self.frames: List[int] = []
        self.score = 0.0
        self.t = 0
        self._label_out = model.label_encode([], cache)

    def advance(self, encodings: np.ndarray) -> bool:
        """Decode more frames; True when new labels were emitted."""
        before = len(self.labels)
        for a_t in encodings:
            for _ in range(self.cap):
                logp = self.model.log_probs(a_t, self._label_out)
                k = int(np.argmax(logp))
                self.score += float(logp[k])
                if k == self.blank:
                    break
                self.labels.append(k)
                self.frames.append(self.t)
                self._label_out = self.model.label_encode(self.labels, self.cache)
            self.t += 1
        return len(self.labels) != before

    def hypothesis(self) -> Hypothesis:
        return Hypothesis(tuple(self.labels), tuple(self.frames), self.score,
                          self.model.label_key(self.labels))


def greedy_decode(encodings: np.ndarray, model: TransducerModel, cap: int = SYMBOLS_PER_FRAME,
                  cache: Optional[LabelCache] = None) -> Hypothesis:
    decoder = StreamingGreedyDecoder(model, cap, cache)
    decoder.advance(encodings)
    return decoder.hypothesis()


def beam_decode(encodings: np.ndarray, model: TransducerModel, beam: int,
                cache: Optional[LabelCache] = None, cap: int = SYMBOLS_PER_FRAME) -> List[Hypothesis]:
    """Frame-synchronous beam search; returns the n-best list, best first.

    Within a frame every active hypothesis is extended by blank (it is then
    done for the frame) or by each label (it stays active), up to ``cap``
    expansions. Candidates with equal labels and status are merged by max,
    then the top ``beam`` by score survive, ties kept in candidate order.
    With beam=1 this is exactly the greedy search.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    blank = model.vocab.blank_id
    labels = model.vocab.label_ids
    hyps = [Hypothesis(key=model.label_key([]))]

    for t, a_t in enumerate(encodings):
        active = hyps
        done: List[Hypothesis] = []
        for _ in range(cap):
            candidates: List[Tuple[bool, Hypothesis]] = [(True, h) for h in done]
            for h in active:
                logp = model.log_probs(a_t, model.label_encode(list(h.labels), cache))
                candidates.append((True, Hypothesis(h.labels, h.frames, h.score + float(logp[blank]), h.key)))
                for k in labels:
                    extended = h.labels + (k,)
                    candidates.append((False, Hypothesis(extended, h.frames + (t,),
                                                         h.score + float(logp[k]),
                                                         model.label_key(extended))))
            merged: Dict[Tuple[bool, Tuple[int, ...]], Hypothesis] = {}
            for is_done, h in candidates:
                key = (is_done, h.labels)
                if key not in merged or h.score > merged[key].score:
                    merged[key] = h
            order = sorted(merged.items(), key=lambda item: -item[1].score)[:beam]
            done = [h for (is_done, _), h in order if is_done]
            active = [h for (is_done, _), h in order if not is_done]
            if not active:
                break
        hyps = done + active

    return sorted(hyps, key=lambda h: -h.score)


def offline_decode(model: TransducerModel, x: np.ndarray, cfg: ContextConfig, beam: int = 1,
                   cache: Optional[LabelCache] = None, cap: int = SYMBOLS_PER_FRAME) -> Hypothesis:
    encodings = model.audio_encode(x, cfg)
    if beam == 1:
        return greedy_decode(encodings, model, cap, cache)
    return beam_decode(encodings, model, beam, cache, cap)[0]


# ===== Events =====

class StreamEvent(BaseModel):
    stream_time_ms: float
    wall_time_ms: float
    branch: str
    type: Literal['partial', 'final']
    text: str
    emission_times: List[float]


def _event(model: TransducerModel, hyp: Hypothesis, branch: str, kind: str,
           consumed: int, frame_ms: float, started: float) -> StreamEvent:
    return StreamEvent(
        stream_time_ms=consumed * frame_ms,
        wall_time_ms=(time.perf_counter() - started) * 1000.0,
        branch=branch,
        type=kind,
        text=hyp.text(model.vocab),
        emission_times=hyp.times_ms(frame_ms),
    )


def stream_decode(model: TransducerModel, x: np.ndarray, cfg: ContextConfig, step_size: int,
                  cap: int = SYMBOLS_PER_FRAME,
                  cache: Optional[LabelCache] = None) -> Tuple[List[StreamEvent], Hypothesis]:
    """Single-branch streaming decode: partial events as labels appear, then a final."""
    if step_size < 1:
        raise ValueError(f"step size must be >= 1, got {step_size}")
    started = time.perf_counter()
    state = start_stream(model, cfg)
    decoder = StreamingGreedyDecoder(model, cap, cache)
    events: List[StreamEvent] = []
    for i in range(0, len(x), step_size):
        encodings, state = batch_step(state, x[i:i + step_size])
        if decoder.advance(encodings):
            events.append(_event(model, decoder.hypothesis(), "stream", "partial",
                                 state.consumed, cfg.frame_ms, started))
    decoder.advance(end_stream(state))
    final = decoder.hypothesis()
    events.append(_event(model, final, "stream", "final", state.consumed, cfg.frame_ms, started))
    return events, final


# ===== Y-model sessions =====

class Branch:
    """Upper layers of one Y branch plus its greedy decoder."""

    def __init__(self, name: str, model: TransducerModel, cfg: ContextConfig, stages: List[Any],
                 cap: int, cache: Optional[LabelCache]):
        self.name = name
        self.cfg = cfg
        self.state = StreamState(stages, delay=cfg.output_delay, width=model.spec.d,
                                 out_width=model.spec.d)
        self.decoder = StreamingGreedyDecoder(model, cap, cache)
        self.last_input: Optional[np.ndarray] = None
        self.flush_frames = 0

    @property
    def emitted(self) -> int:
        return self.state.emitted

    def step(self, rows: np.ndarray, final: bool = False, total: Optional[int] = None) -> bool:
        self.last_input = rows
        self.state.consumed += len(rows)
        encodings = self.state.push(rows, final, total)
        if final:
            self.flush_frames = len(encodings)
        return self.decoder.advance(encodings)


class FinalResult(BaseModel):
    text: str
    labels: List[int]
    emission_times: List[float]
    partial_text: str
    flush_frames: int
    flush_wall_ms: float
    shared_frames: int
    shared_layer_calls: int
    shared_layer_rows: List[int]
    off_menu: bool = False
    events: List[StreamEvent] = []


class YSession:
    """Shared causal lower layers feeding a low- and a high-latency branch.

    Shared activations are computed once per frame, made read-only and
    handed to both branches. Only the low branch publishes partials; the
    high branch's result replaces them at finalization.
    """

    def __init__(self, model: TransducerModel, low_cfg: ContextConfig, high_cfg: ContextConfig,
                 shared: int, schedule: str = 'cooperative', cap: int = SYMBOLS_PER_FRAME,
                 use_cache: bool = True):
        if schedule not in ('cooperative', 'concurrent'):
            raise ValueError(f"unknown branch schedule {schedule!r}")
        self.model = model
        self.low_cfg = low_cfg
        self.high_cfg = high_cfg
        self.shared_layers = shared
        self.schedule = schedule
        self.frame_ms = low_cfg.frame_ms
        self.delay = low_cfg.output_delay

        low_stages = build_stages(model, low_cfg)
        high_stages = build_stages(model, high_cfg)
        split = split_after_layer(low_stages, shared)
        self.shared = StreamState(low_stages[:split], delay=0, width=model.spec.feature_dim)
        self.low = Branch("low", model, low_cfg, low_stages[split:], cap,
                          LabelCache() if use_cache else None)
        self.high = Branch("high", model, high_cfg, high_stages[split:], cap,
                           LabelCache() if use_cache else None)

        self.events: List[StreamEvent] = []
        self.off_menu = False
        self.finalized = False
        self.started = time.perf_counter()
        self._executor = ThreadPoolExecutor(max_workers=2) if schedule == 'concurrent' else None

    @property
    def consumed(self) -> int:
        return self.shared.consumed

    @property
    def shared_frames(self) -> int:
        return self.shared.emitted

    @property
    def shared_layer_calls(self) -> int:
        """Chunked forward passes run by the shared layers, summed over layers."""
        return sum(stage.calls for stage in self.shared.stages if isinstance(stage, LayerStage))

    @property
    def shared_layer_rows(self) -> List[int]:
        """Rows forwarded by each shared layer; every frame passes each layer once."""
        return [stage.forwarded for stage in self.shared.stages if isinstance(stage, LayerStage)]

    @property
    def lag_frames(self) -> int:
        return self.high_cfg.lookahead_frames() - self.low_cfg.lookahead_frames()

    def run_branches(self, rows: np.ndarray, final: bool = False,
                     total: Optional[int] = None) -> Tuple[bool, bool]:
        rows.setflags(write=False)
        if self._executor is None:
            return self.low.step(rows, final, total), self.high.step(rows, final, total)
        low = self._executor.submit(self.low.step, rows, final, total)
        high = self._executor.submit(self.high.step, rows, final, total)
        return low.result(), high.result()

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def _menu_rights(model: TransducerModel) -> List[Tuple[int, ...]]:
    rights = []
    for text in model.spec.default_configs:
        try:
            rights.append(tuple(parse_context_config(text, model.spec.depth)))
        except ConfigParseError as e:
            logger.warning(f"Ignoring unreadable menu entry {text!r}: {e}")
    return rights


def y_start(model: TransducerModel, low_cfg: ContextConfig, high_cfg: ContextConfig, shared: int,
            schedule: str = 'cooperative', cap: int = SYMBOLS_PER_FRAME,
            use_cache: bool = True) -> YSession:
    """Validate a Y layout and open a session.

    Args:
        model: Trained transducer, shared read-only by both branches
        low_cfg: Low-latency branch config (publishes partials)
        high_cfg: High-latency branch config (final result)
        shared: Number of lower layers computed once for both branches
        schedule: 'cooperative' (low then high) or 'concurrent' (two workers)

    Returns:
        Active YSession
    """
    depth = model.spec.depth
    if low_cfg.depth != depth or high_cfg.depth != depth:
        raise UnsupportedConfigError(f"Y configs must have {depth} layers")
    if not 0 <= shared <= depth:
        raise UnsupportedConfigError(f"shared layer count {shared} outside [0, {depth}]")
    for layer in range(shared):
        if low_cfg.per_layer_right[layer] or high_cfg.per_layer_right[layer]:
            raise UnsupportedConfigError(
                f"shared layer {layer} must have right context 0 in both branches "
                f"(low {low_cfg.per_layer_right[layer]}, high {high_cfg.per_layer_right[layer]})"
            )
        if low_cfg.per_layer_left[layer] != high_cfg.per_layer_left[layer]:
            raise UnsupportedConfigError(f"shared layer {layer} has different left contexts")
    if low_cfg.output_delay != high_cfg.output_delay:
        raise UnsupportedConfigError("both branches need the same output delay")

    session = YSession(model, low_cfg, high_cfg, shared, schedule, cap, use_cache)
    menu = _menu_rights(model)
    for name, cfg in (("low", low_cfg), ("high", high_cfg)):
        if menu and cfg.per_layer_right not in menu:
            logger.warning(f"{name} config {cfg.notation()} is not in the model's training menu")
            session.off_menu = True
    logger.info(
        f"Y session: low {low_cfg.notation()}, high {high_cfg.notation()}, shared {shared}, "
        f"high lags {session.lag_frames} frames ({schedule})"
    )
    return session


def y_feed(session: YSession, frames: np.ndarray) -> List[StreamEvent]:
    """Advance both branches by new frames; returns low-branch partial events."""
    if session.finalized:
        raise SessionStateError("cannot feed a finalized session")
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, session.model.spec.feature_dim)
    if not len(frames):
        return []
    session.shared.consumed += len(frames)
    shared = session.shared.push(frames)
    low_changed, _ = session.run_branches(shared)

    events = []
    if low_changed:
        events.append(_event(session.model, session.low.decoder.hypothesis(), "low", "partial",
                             session.consumed, session.frame_ms, session.started))
    session.events.extend(events)
    return events


def y_finalize(session: YSession) -> FinalResult:
    """Flush every branch in one batched pass and publish the high branch result."""
    if session.finalized:
        raise SessionStateError("session already finalized")
    session.finalized = True
    flush_start = time.perf_counter()
    total = session.consumed + session.delay
    padding = session.model.encoder.padding(session.delay)
    try:
        shared = session.shared.push(padding, final=True)
        session.run_branches(shared, final=True, total=total)
    finally:
        session.close()
    flush_ms = (time.perf_counter() - flush_start) * 1000.0

    final = session.high.decoder.hypothesis()
    event = _event(session.model, final, "high", "final", session.consumed,
                   session.frame_ms, session.started)
    session.events.append(event)
    logger.info(f"Y session finalized: {session.high.flush_frames} flush frames in {flush_ms:.1f}ms")
    return FinalResult(
        text=event.text,
        labels=list(final.labels),
        emission_times=event.emission_times,
        partial_text=session.low.decoder.hypothesis().text(session.model.vocab),
        flush_frames=session.high.flush_frames,
        flush_wall_ms=flush_ms,
        shared_frames=session.shared_frames,
        shared_layer_calls=session.shared_layer_calls,
        shared_layer_rows=session.shared_layer_rows,
        off_menu=session.off_menu,
        events=list(session.events),
    )


def y_decode(model: TransducerModel, x: np.ndarray, low_cfg: ContextConfig, high_cfg: ContextConfig,
             shared: int, step_size: int, schedule: str = 'cooperative') -> FinalResult:
    """Run a whole utterance through a Y session in chunks of ``step_size``."""
    session = y_start(model, low_cfg, high_cfg, shared, schedule)
    for i in range(0, len(x), step_size):
        y_feed(session, x[i:i + step_size])
    return y_finalize(session)
