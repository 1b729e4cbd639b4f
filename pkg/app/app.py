from flask import Flask, request, jsonify
from loguru import logger
import threading
import time
import uuid

import numpy as np

from .attention import UnsupportedConfigError
from .infer import SessionStateError, LabelCache, offline_decode, y_feed, y_finalize, y_start
from .train import ConfigParseError, context_from_text
from .transducer import TransducerModel
from .utils import append_jsonl, log_path
from .config import (
    BEAM_SIZE,
    CHECKPOINT_PATH,
    DEBUG_MODE,
    LOG_DIR,
    MAX_STREAM_SESSIONS,
    OUTPUT_DELAY,
    PORT,
    SESSION_IDLE_SECONDS,
    STREAMING_LEFT_CONTEXT,
)

# Initialize Flask app
app = Flask(__name__)

# Active Y-model streaming sessions by id
stream_sessions = {}

# Per-session counters; entries outlive their session until the idle sweep drops them
session_metrics = {}

_sessions_lock = threading.Lock()

# Loaded model (read-only snapshot shared by every request)
_model = {"instance": None}

CLIENT_ERRORS = (ValueError, ConfigParseError, UnsupportedConfigError)


def set_model(model):
    """Serve an in-memory model instead of the checkpoint at CHECKPOINT_PATH"""
    _model["instance"] = model.snapshot() if model is not None else None


def get_model():
    if _model["instance"] is None:
        logger.info(f"Loading model from {CHECKPOINT_PATH}")
        _model["instance"] = TransducerModel.load(CHECKPOINT_PATH).snapshot()
    return _model["instance"]


def _features(payload, key, model):
    values = payload.get(key)
    if values is None:
        raise ValueError(f"missing '{key}'")
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        return np.zeros((0, model.spec.feature_dim))
    if array.ndim != 2 or array.shape[1] != model.spec.feature_dim:
        raise ValueError(f"'{key}' must be a list of {model.spec.feature_dim}-dim frames")
    return array


def _config(model, text, payload):
    left = payload.get("left", STREAMING_LEFT_CONTEXT)
    return context_from_text(model.spec, text, left=left,
                             output_delay=int(payload.get("output_delay", OUTPUT_DELAY)))


# ===== Session housekeeping =====

def _least_recent(session_ids):
    return min(session_ids, key=lambda sid: session_metrics[sid]["last_active"])


def _evict(session_id, reason):
    session = stream_sessions.pop(session_id, None)
    if session is not None:
        session.close()
        logger.warning(f"Evicted stream session {session_id} ({reason})")


def sweep_sessions(now=None):
    """Evict sessions idle past SESSION_IDLE_SECONDS and trim metrics of closed ones"""
    now = time.time() if now is None else now
    with _sessions_lock:
        for session_id, metrics in list(session_metrics.items()):
            if now - metrics["last_active"] > SESSION_IDLE_SECONDS:
                _evict(session_id, "idle")
                del session_metrics[session_id]
        closed = [sid for sid in session_metrics if sid not in stream_sessions]
        while closed and len(session_metrics) > MAX_STREAM_SESSIONS:
            oldest = _least_recent(closed)
            closed.remove(oldest)
            del session_metrics[oldest]


def _admit(session_id, session):
    with _sessions_lock:
        while len(stream_sessions) >= MAX_STREAM_SESSIONS:
            _evict(_least_recent(stream_sessions), "session cap")
        now = time.time()
        stream_sessions[session_id] = session
        session_metrics[session_id] = {"frames": 0, "events": 0, "session_start": now, "last_active": now}


def _touch(session_id, frames=0, events=0):
    with _sessions_lock:
        metrics = session_metrics.get(session_id)
        if metrics is not None:
            metrics["frames"] += frames
            metrics["events"] += events
            metrics["last_active"] = time.time()


@app.before_request
def _sweep_before_request():
    sweep_sessions()


@app.route('/health', methods=['GET'])
def health_check():
    """Simple health check endpoint"""
    with _sessions_lock:
        active = len(stream_sessions)
        frames = sum(m["frames"] for m in session_metrics.values())
    return jsonify({
        "status": "healthy",
        "model_loaded": _model["instance"] is not None,
        "active_sessions": active,
        "total_frames_processed": frames
    })


@app.route('/decode', methods=['POST'])
def decode():
    """Offline decode of one utterance: {features, config, beam?}"""
    payload = request.get_json(silent=True) or {}
    try:
        model = get_model()
        features = _features(payload, "features", model)
        cfg = _config(model, payload.get("config", f"[0] x {model.spec.depth}"), payload)
        beam = int(payload.get("beam", BEAM_SIZE))
        start_time = time.time()
        hyp = offline_decode(model, features, cfg, beam=beam, cache=LabelCache())
        processing_time = time.time() - start_time
    except CLIENT_ERRORS as e:
        logger.error(f"Bad decode request: {str(e)}")
        return jsonify({"error": str(e)}), 400
    except Exception as e:
        logger.error(f"Error decoding: {str(e)}")
        return jsonify({"error": "decode failed"}), 500

    logger.info(f"Decoded {len(features)} frames with {cfg.notation()} in {processing_time:.2f}s")
    return jsonify({
        "text": hyp.text(model.vocab),
        "labels": list(hyp.labels),
        "emission_times": hyp.times_ms(cfg.frame_ms),
        "score": hyp.score,
        "config": cfg.notation(),
        "processing_time": processing_time
    })


@app.route('/stream', methods=['POST'])
def start_stream_session():
    """Open a Y-model session: {low, high, shared, schedule?}"""
    payload = request.get_json(silent=True) or {}
    try:
        model = get_model()
        low = _config(model, payload["low"], payload)
        high = _config(model, payload["high"], payload)
        session = y_start(model, low, high, int(payload["shared"]),
                          schedule=payload.get("schedule", "cooperative"))
    except KeyError as e:
        return jsonify({"error": f"missing {str(e)}"}), 400
    except CLIENT_ERRORS as e:
        logger.error(f"Bad stream request: {str(e)}")
        return jsonify({"error": str(e)}), 400

    session_id = str(uuid.uuid4())
    _admit(session_id, session)
    logger.info(f"Opened stream session {session_id}")
    return jsonify({
        "session_id": session_id,
        "low": low.notation(),
        "high": high.notation(),
        "lag_frames": session.lag_frames,
        "off_menu": session.off_menu
    })


@app.route('/stream/<session_id>/feed', methods=['POST'])
def feed_stream_session(session_id):
    """Feed frames to a session and return the partial results they produced"""
    session = stream_sessions.get(session_id)
    if session is None:
        return jsonify({"error": "Session not found"}), 404
    payload = request.get_json(silent=True) or {}
    try:
        frames = _features(payload, "frames", session.model)
        events = y_feed(session, frames)
    except SessionStateError as e:
        return jsonify({"error": str(e)}), 409
    except CLIENT_ERRORS as e:
        return jsonify({"error": str(e)}), 400

    _touch(session_id, len(frames), len(events))
    records = [event.model_dump() for event in events]
    for record in records:
        append_jsonl(dict(record, session_id=session_id), log_path("stream", LOG_DIR))
    return jsonify({"events": records, "consumed_frames": session.consumed})


@app.route('/stream/<session_id>/finalize', methods=['POST'])
def finalize_stream_session(session_id):
    """Flush the high-latency branch and return the final result"""
    session = stream_sessions.get(session_id)
    if session is None:
        return jsonify({"error": "Session not found"}), 404
    try:
        result = y_finalize(session)
    except SessionStateError as e:
        return jsonify({"error": str(e)}), 409
    finally:
        with _sessions_lock:
            stream_sessions.pop(session_id, None)
        _touch(session_id)

    final_event = result.events[-1].model_dump()
    append_jsonl(dict(final_event, session_id=session_id), log_path("stream", LOG_DIR))
    logger.info(f"Finalized stream session {session_id}: '{result.text}'")
    return jsonify(result.model_dump())


@app.route('/dashboard', methods=['GET'])
def dashboard():
    """Session statistics for monitoring"""
    if DEBUG_MODE:
        with _sessions_lock:
            sessions = [
                {"session_id": sid, "frames": m["frames"], "events": m["events"],
                 "open": sid in stream_sessions}
                for sid, m in session_metrics.items()
            ]
        return jsonify({"active_sessions": sum(s["open"] for s in sessions), "sessions": sessions})
    else:
        return jsonify({"error": "Dashboard only available in debug mode"})


def init_app(model=None):
    """Initialize the Flask application, optionally with an in-memory model"""
    if model is not None:
        set_model(model)
    return app


if __name__ == '__main__':
    app = init_app()
    app.run(host="0.0.0.0", port=PORT, debug=DEBUG_MODE)
