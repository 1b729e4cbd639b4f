"""Transformer-Transducer: audio encoder, label encoders and joint network.

The joint combines the two encoders additively,
``logits = W_o tanh(W_a a_t + b_a + W_l l_u + b_l) + b_o``, and the
log-softmax over (t, u) forms the lattice consumed by the RNN-T loss.
"""
import threading
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, model_validator

from .attention import (
    ContextConfig,
    TransformerLayer,
    UnsupportedConfigError,
    mask_from_offsets,
    position_offsets,
    stack_frames,
    unstack_frames,
)
from .config import (
    FEATURE_DIM,
    FFN_DIM,
    FRAME_MS,
    LABEL_CONTEXT,
    LABEL_LAYERS,
    LABEL_MODE,
    MAX_RELATIVE_POSITION,
    MODEL_DIM,
    NUM_HEADS,
    NUM_LAYERS,
)
from .nn import (
    CheckpointError,
    ParamStore,
    glorot_uniform,
    layer_norm_backward,
    layer_norm_forward,
    linear,
    linear_backward,
    load_checkpoint,
    log_softmax,
    save_checkpoint,
    scaled_normal,
    softmax,
)
from .rnnt import Lattice, rnnt_loss_and_grad

TOY_SYMBOLS = ("<b>",) + tuple("abcdefghij") + (" ",)


class VocabError(ValueError):
    """A token id or symbol is outside the vocabulary."""


class Vocab:
    """Ordered output symbols; id 0 is blank and doubles as start-of-sequence."""

    blank_id = 0

    def __init__(self, symbols: Sequence[str] = TOY_SYMBOLS):
        symbols = tuple(symbols)
        if len(symbols) < 2:
            raise VocabError("vocabulary needs blank plus at least one label")
        if len(set(symbols)) != len(symbols):
            raise VocabError("vocabulary symbols must be unique")
        self.symbols = symbols
        self._ids = {s: i for i, s in enumerate(symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def space_id(self) -> Optional[int]:
        return self._ids.get(" ")

    @property
    def label_ids(self) -> List[int]:
        return list(range(1, self.size))

    def encode(self, text: str) -> List[int]:
        try:
            return [self._ids[ch] for ch in text]
        except KeyError as e:
            raise VocabError(f"symbol {e.args[0]!r} not in vocabulary") from e

    def decode(self, ids: Sequence[int]) -> str:
        for i in ids:
            if not 0 <= i < self.size:
                raise VocabError(f"token id {i} outside [0, {self.size})")
        return "".join(self.symbols[i] for i in ids if i != self.blank_id)

    def to_list(self) -> List[str]:
        return list(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def __hash__(self) -> int:
        return hash(self.symbols)

    def __repr__(self) -> str:
        return f"Vocab({self.size} symbols)"


class ModelSpec(BaseModel):
    """Architecture header stored in every checkpoint."""
    feature_dim: int = FEATURE_DIM
    d: int = MODEL_DIM
    heads: int = NUM_HEADS
    ffn: int = FFN_DIM
    depth: int = NUM_LAYERS
    max_relative: int = MAX_RELATIVE_POSITION
    vocab: List[str] = list(TOY_SYMBOLS)
    label_mode: Literal['transformer', 'bigram'] = LABEL_MODE
    label_context: int = LABEL_CONTEXT
    label_layers: int = LABEL_LAYERS
    joint_dim: Optional[int] = None
    stack_factor: int = 1
    stack_after: Optional[int] = None
    frame_ms: float = FRAME_MS
    default_configs: List[str] = []

    @model_validator(mode='after')
    def _check(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.label_context < 1:
            raise ValueError("label_context must be >= 1")
        if self.stack_factor < 1:
            raise ValueError("stack_factor must be >= 1")
        if self.stack_factor > 1 and (self.stack_after is None or
                                      not 0 <= self.stack_after < self.depth - 1):
            raise ValueError("stacking needs stack_after in [0, depth-2]")
        return self

    @property
    def stacked(self) -> bool:
        return self.stack_factor > 1

    @property
    def label_tag(self) -> str:
        return "bigram" if self.label_mode == 'bigram' else f"transformer-{self.label_context}"

    def frame_rates(self) -> Tuple[int, ...]:
        if not self.stacked:
            return (1,) * self.depth
        return tuple(1 if layer <= self.stack_after else self.stack_factor
                     for layer in range(self.depth))

    def context(self, rights: Sequence[int], left: Optional[int] = None,
                output_delay: int = 0) -> ContextConfig:
        if len(rights) != self.depth:
            raise UnsupportedConfigError(
                f"config has {len(rights)} layers, model has {self.depth}"
            )
        return ContextConfig.from_rights(rights, left=left, output_delay=output_delay,
                                         frame_ms=self.frame_ms, frame_rates=self.frame_rates())


# ===== Audio encoder =====

class AudioEncoder:
    """Input projection, transformer stack with optional stack/unstack, final norm."""

    def __init__(self, params: ParamStore, spec: ModelSpec):
        self.params = params
        self.spec = spec
        self.layers = [
            TransformerLayer(params, f"enc.layers.{i}", spec.d, spec.heads, spec.ffn, spec.max_relative)
            for i in range(spec.depth)
        ]

    def init(self, rng: np.random.Generator) -> None:
        s, p = self.spec, self.params
        p.add("enc.in.w", glorot_uniform(rng, s.feature_dim, s.d))
        p.add("enc.in.b", np.zeros(s.d))
        for layer in self.layers:
            layer.init(rng)
        if s.stacked:
            f = s.stack_factor
            p.add("enc.stack.w", glorot_uniform(rng, f * s.d, s.d))
            p.add("enc.stack.b", np.zeros(s.d))
            p.add("enc.unstack.w", glorot_uniform(rng, s.d, f * s.d))
            p.add("enc.unstack.b", np.zeros(f * s.d))
        p.add("enc.ln.g", np.ones(s.d))
        p.add("enc.ln.b", np.zeros(s.d))

    def check_config(self, cfg: ContextConfig) -> None:
        if cfg.depth != self.spec.depth:
            raise UnsupportedConfigError(
                f"context config depth {cfg.depth} != encoder depth {self.spec.depth}"
            )

    def _pad(self, x: np.ndarray, cfg: ContextConfig) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.feature_dim:
            raise UnsupportedConfigError(
                f"features must be (T, {self.spec.feature_dim}), got {x.shape}"
            )
        if cfg.output_delay:
            x = np.vstack([x, self.padding(cfg.output_delay)])
        return x

    def init_padding(self, rng: np.random.Generator) -> None:
        # nonzero, so padded rows are never constant at the first layer norm
        self.params.add("enc.pad", rng.standard_normal(self.spec.feature_dim))

    def padding(self, n: int) -> np.ndarray:
        """``n`` output-delay frames of the learned pad vector."""
        return np.tile(self.params["enc.pad"], (n, 1))

    def encode(self, x: np.ndarray, cfg: ContextConfig, block: Optional[int] = None,
               meter=None) -> np.ndarray:
        """Inference encode; ``block`` switches to query-sliced attention."""
        self.check_config(cfg)
        T = len(x)
        xp = self._pad(x, cfg)
        total = len(xp)
        h = linear(xp, self.params["enc.in.w"], self.params["enc.in.b"])
        positions = np.arange(total)
        for i, layer in enumerate(self.layers):
            h = layer.apply(h, positions, cfg.per_layer_left[i], cfg.per_layer_right[i], block, meter)
            if self.spec.stacked and i == self.spec.stack_after:
                h = linear(stack_frames(h, self.spec.stack_factor),
                           self.params["enc.stack.w"], self.params["enc.stack.b"])
                positions = np.arange(len(h))
        if self.spec.stacked:
            h = unstack_frames(linear(h, self.params["enc.unstack.w"], self.params["enc.unstack.b"]),
                               self.spec.stack_factor, total)
        h = h[cfg.output_delay:cfg.output_delay + T]
        return layer_norm_forward(h, self.params["enc.ln.g"], self.params["enc.ln.b"])[0]

    def forward(self, x: np.ndarray, cfg: ContextConfig):
        """Training-mode encode keeping activations for ``backward``."""
        self.check_config(cfg)
        T = len(x)
        xp = self._pad(x, cfg)
        total = len(xp)
        caches: Dict[str, Any] = {"layers": []}
        caches["in"] = xp
        h = linear(xp, self.params["enc.in.w"], self.params["enc.in.b"])
        positions = np.arange(total)
        for i, layer in enumerate(self.layers):
            offsets = position_offsets(positions, positions)
            mask = mask_from_offsets(offsets, cfg.per_layer_left[i], cfg.per_layer_right[i])
            h, cache = layer.forward(h, mask, offsets)
            caches["layers"].append(cache)
            if self.spec.stacked and i == self.spec.stack_after:
                caches["pre_stack_len"] = len(h)
                stacked = stack_frames(h, self.spec.stack_factor)
                caches["stacked"] = stacked
                h = linear(stacked, self.params["enc.stack.w"], self.params["enc.stack.b"])
                positions = np.arange(len(h))
        if self.spec.stacked:
            caches["pre_unstack"] = h
            expanded = linear(h, self.params["enc.unstack.w"], self.params["enc.unstack.b"])
            caches["unstack_rows"] = expanded.shape[0]
            h = unstack_frames(expanded, self.spec.stack_factor, total)
        caches["total"] = total
        caches["delay"] = cfg.output_delay
        h = h[cfg.output_delay:cfg.output_delay + T]
        out, caches["ln"] = layer_norm_forward(h, self.params["enc.ln.g"], self.params["enc.ln.b"])
        return out, caches

    def backward(self, dout: np.ndarray, caches) -> None:
        s, p = self.spec, self.params
        dh_trim, dg, db = layer_norm_backward(dout, caches["ln"])
        p.accumulate("enc.ln.g", dg)
        p.accumulate("enc.ln.b", db)
        total, delay = caches["total"], caches["delay"]
        dh = np.zeros((total, s.d))
        dh[delay:delay + len(dout)] = dh_trim

        if s.stacked:
            f = s.stack_factor
            dexpanded = np.zeros((caches["unstack_rows"] * f, s.d))
            dexpanded[:total] = dh
            dexpanded = dexpanded.reshape(caches["unstack_rows"], f * s.d)
            dh, dW, dbias = linear_backward(dexpanded, caches["pre_unstack"], p["enc.unstack.w"])
            p.accumulate("enc.unstack.w", dW)
            p.accumulate("enc.unstack.b", dbias)

        for i in reversed(range(s.depth)):
            if s.stacked and i == s.stack_after:
                dstacked, dW, dbias = linear_backward(dh, caches["stacked"], p["enc.stack.w"])
                p.accumulate("enc.stack.w", dW)
                p.accumulate("enc.stack.b", dbias)
                dh = dstacked.reshape(-1, s.d)[:caches["pre_stack_len"]]
            dh = self.layers[i].backward(dh, caches["layers"][i])

        dx, dW, dbias = linear_backward(dh, caches["in"], p["enc.in.w"])
        p.accumulate("enc.in.w", dW)
        p.accumulate("enc.in.b", dbias)
        if delay:
            p.accumulate("enc.pad", dx[total - delay:].sum(axis=0))


# ===== Label encoders =====

class TransformerLabelEncoder:
    """Transformer over the last ``ctx_len`` tokens of [SOS] + prefix.

    Each prefix is encoded from its own window, so the output depends on
    nothing older than the window.
    """

    def __init__(self, params: ParamStore, spec: ModelSpec):
        self.params = params
        self.spec = spec
        self.ctx_len = spec.label_context
        self.layers = [
            TransformerLayer(params, f"lab.layers.{i}", spec.d, spec.heads, spec.ffn, spec.max_relative)
            for i in range(spec.label_layers)
        ]

    def init(self, rng: np.random.Generator) -> None:
        n, d = len(self.spec.vocab), self.spec.d
        self.params.add("lab.emb", scaled_normal(rng, (n, d), scale=1.0))
        for layer in self.layers:
            layer.init(rng)
        self.params.add("lab.ln.g", np.ones(d))
        self.params.add("lab.ln.b", np.zeros(d))

    def window(self, prefix: Sequence[int]) -> Tuple[int, ...]:
        tokens = (Vocab.blank_id,) + tuple(prefix)
        return tokens[-self.ctx_len:]

    def _forward_windows(self, windows: np.ndarray, keep: bool):
        L = windows.shape[1]
        positions = np.arange(L)
        offsets = position_offsets(positions, positions)
        mask = mask_from_offsets(offsets, L - 1, 0)
        h = self.params["lab.emb"][windows]
        layer_caches = []
        for layer in self.layers:
            h, cache = layer.forward(h, mask, offsets)
            if keep:
                layer_caches.append(cache)
        out, ln = layer_norm_forward(h[:, -1, :], self.params["lab.ln.g"], self.params["lab.ln.b"])
        return out, (windows, layer_caches, ln, h.shape)

    def encode_windows(self, windows: np.ndarray) -> np.ndarray:
        return self._forward_windows(np.asarray(windows, dtype=np.int64), keep=False)[0]

    def encode(self, prefix: Sequence[int]) -> np.ndarray:
        return self.encode_windows(np.array([self.window(prefix)]))[0]

    def forward_prefixes(self, labels: Sequence[int]):
        """Encodings for every prefix y[:u], u = 0..U, plus backward cache."""
        windows = [self.window(labels[:u]) for u in range(len(labels) + 1)]
        out = np.zeros((len(windows), self.spec.d))
        groups = []
        for length in sorted({len(w) for w in windows}):
            rows = [u for u, w in enumerate(windows) if len(w) == length]
            encoded, cache = self._forward_windows(np.array([windows[u] for u in rows]), keep=True)
            out[rows] = encoded
            groups.append((rows, cache))
        return out, groups

    def backward(self, dout: np.ndarray, groups) -> None:
        p = self.params
        for rows, (windows, layer_caches, ln, shape) in groups:
            dlast, dg, db = layer_norm_backward(dout[rows], ln)
            p.accumulate("lab.ln.g", dg)
            p.accumulate("lab.ln.b", db)
            dh = np.zeros(shape)
            dh[:, -1, :] = dlast
            for layer, cache in zip(reversed(self.layers), reversed(layer_caches)):
                dh = layer.backward(dh, cache)
            demb = np.zeros_like(p["lab.emb"])
            np.add.at(demb, windows.reshape(-1), dh.reshape(-1, self.spec.d))
            p.accumulate("lab.emb", demb)


def label_encode_bigram(prev2: int, prev1: int, table: np.ndarray) -> np.ndarray:
    """Row ``prev2 * N + prev1`` of an (N*N, d) bigram table."""
    n = int(round(np.sqrt(table.shape[0])))
    if not (0 <= prev2 < n and 0 <= prev1 < n):
        raise VocabError(f"bigram context ({prev2}, {prev1}) outside vocabulary of {n}")
    return table[prev2 * n + prev1]


class BigramLabelEncoder:
    """Embedding lookup keyed by the two previous labels (N^2 * d parameters)."""

    ctx_len = 2

    def __init__(self, params: ParamStore, spec: ModelSpec):
        self.params = params
        self.spec = spec
        self.n = len(spec.vocab)

    def init(self, rng: np.random.Generator) -> None:
        self.params.add("lab.bigram", scaled_normal(rng, (self.n * self.n, self.spec.d), scale=1.0))

    def window(self, prefix: Sequence[int]) -> Tuple[int, ...]:
        return ((Vocab.blank_id, Vocab.blank_id) + tuple(prefix))[-2:]

    def encode(self, prefix: Sequence[int]) -> np.ndarray:
        prev2, prev1 = self.window(prefix)
        return label_encode_bigram(prev2, prev1, self.params["lab.bigram"])

    def forward_prefixes(self, labels: Sequence[int]):
        rows = []
        for u in range(len(labels) + 1):
            prev2, prev1 = self.window(labels[:u])
            if not (0 <= prev2 < self.n and 0 <= prev1 < self.n):
                raise VocabError(f"bigram context ({prev2}, {prev1}) outside vocabulary")
            rows.append(prev2 * self.n + prev1)
        rows = np.array(rows, dtype=np.int64)
        return self.params["lab.bigram"][rows], rows

    def backward(self, dout: np.ndarray, rows) -> None:
        dtable = np.zeros_like(self.params["lab.bigram"])
        np.add.at(dtable, rows, dout)
        self.params.accumulate("lab.bigram", dtable)


# ===== Joint network =====

class JointNetwork:
    def __init__(self, params: ParamStore, spec: ModelSpec):
        self.params = params
        self.spec = spec
        self.dim = spec.joint_dim or spec.d

    def init(self, rng: np.random.Generator) -> None:
        d, J, N = self.spec.d, self.dim, len(self.spec.vocab)
        self.params.add("joint.wa", glorot_uniform(rng, d, J))
        self.params.add("joint.ba", np.zeros(J))
        self.params.add("joint.wl", glorot_uniform(rng, d, J))
        self.params.add("joint.bl", np.zeros(J))
        self.params.add("joint.wo", glorot_uniform(rng, J, N))
        self.params.add("joint.bo", np.zeros(N))

    def logits(self, a_t: np.ndarray, l_u: np.ndarray) -> np.ndarray:
        p = self.params
        hidden = np.tanh(linear(a_t, p["joint.wa"], p["joint.ba"]) + linear(l_u, p["joint.wl"], p["joint.bl"]))
        return linear(hidden, p["joint.wo"], p["joint.bo"])

    def forward_grid(self, enc: np.ndarray, lab: np.ndarray):
        p = self.params
        audio = linear(enc, p["joint.wa"], p["joint.ba"])
        label = linear(lab, p["joint.wl"], p["joint.bl"])
        hidden = np.tanh(audio[:, None, :] + label[None, :, :])
        logits = linear(hidden, p["joint.wo"], p["joint.bo"])
        return log_softmax(logits, axis=-1), (enc, lab, hidden, logits)

    def backward_grid(self, dlogp: np.ndarray, cache):
        enc, lab, hidden, logits = cache
        p = self.params
        dlogits = dlogp - softmax(logits, axis=-1) * dlogp.sum(axis=-1, keepdims=True)
        dhidden, dwo, dbo = linear_backward(dlogits, hidden, p["joint.wo"])
        p.accumulate("joint.wo", dwo)
        p.accumulate("joint.bo", dbo)
        dpre = dhidden * (1.0 - hidden ** 2)
        denc, dwa, dba = linear_backward(dpre.sum(axis=1), enc, p["joint.wa"])
        dlab, dwl, dbl = linear_backward(dpre.sum(axis=0), lab, p["joint.wl"])
        p.accumulate("joint.wa", dwa)
        p.accumulate("joint.ba", dba)
        p.accumulate("joint.wl", dwl)
        p.accumulate("joint.bl", dbl)
        return denc, dlab


# ===== Model =====

class TransducerModel:
    """Audio encoder + label encoder + joint over one parameter store."""

    def __init__(self, spec: Optional[ModelSpec] = None, params: Optional[ParamStore] = None,
                 seed: int = 0):
        self.spec = spec or ModelSpec()
        self.vocab = Vocab(self.spec.vocab)
        fresh = params is None
        self.params = ParamStore() if fresh else params
        self.encoder = AudioEncoder(self.params, self.spec)
        if self.spec.label_mode == 'bigram':
            self.label_encoder = BigramLabelEncoder(self.params, self.spec)
        else:
            self.label_encoder = TransformerLabelEncoder(self.params, self.spec)
        self.joint = JointNetwork(self.params, self.spec)
        self.label_encoder_calls = 0
        self._calls_lock = threading.Lock()
        if fresh:
            rng = np.random.default_rng(seed)
            self.encoder.init(rng)
            self.label_encoder.init(rng)
            self.joint.init(rng)
            self.encoder.init_padding(rng)

    # --- configuration ---

    def context(self, rights: Sequence[int], left: Optional[int] = None,
                output_delay: int = 0) -> ContextConfig:
        return self.spec.context(rights, left=left, output_delay=output_delay)

    # --- inference ---

    def audio_encode(self, x: np.ndarray, cfg: ContextConfig) -> np.ndarray:
        return self.encoder.encode(x, cfg)

    def label_key(self, prefix: Sequence[int]) -> Tuple[int, ...]:
        return self.label_encoder.window(prefix)

    def label_encode(self, prefix: Sequence[int], cache=None) -> np.ndarray:
        """Label-encoder output for a label prefix, through ``cache`` if given."""
        if cache is None:
            return self._encode_label(prefix)
        return cache.lookup(self.label_key(prefix), lambda: self._encode_label(prefix))

    def _encode_label(self, prefix: Sequence[int]) -> np.ndarray:
        # Y branches encode labels from worker threads
        with self._calls_lock:
            self.label_encoder_calls += 1
        return self.label_encoder.encode(prefix)

    def joint_logits(self, a_t: np.ndarray, l_u: np.ndarray) -> np.ndarray:
        return self.joint.logits(a_t, l_u)

    def log_probs(self, a_t: np.ndarray, l_u: np.ndarray) -> np.ndarray:
        return log_softmax(self.joint.logits(a_t, l_u))

    def logits_grid(self, x: np.ndarray, y: Sequence[int], cfg: ContextConfig,
                    cache=None) -> Lattice:
        """Log-softmax outputs for every (t, u), t < T, u <= U."""
        enc = self.audio_encode(x, cfg)
        return self.lattice_from_encodings(enc, y, cache)

    def lattice_from_encodings(self, enc: np.ndarray, y: Sequence[int], cache=None) -> Lattice:
        lab = np.stack([self.label_encode(list(y[:u]), cache) for u in range(len(y) + 1)])
        return Lattice(self.joint.forward_grid(enc, lab)[0], blank_id=self.vocab.blank_id)

    # --- training ---

    def loss_and_backward(self, x: np.ndarray, y: Sequence[int], cfg: ContextConfig,
                          align_mask=None, scale: float = 1.0) -> float:
        """RNN-T loss of one utterance; accumulates ``scale`` x gradients."""
        enc, enc_cache = self.encoder.forward(x, cfg)
        lab, lab_cache = self.label_encoder.forward_prefixes(list(y))
        logp, joint_cache = self.joint.forward_grid(enc, lab)
        loss, dlogp = rnnt_loss_and_grad(Lattice(logp, blank_id=self.vocab.blank_id), list(y), align_mask)
        denc, dlab = self.joint.backward_grid(dlogp * scale, joint_cache)
        self.label_encoder.backward(dlab, lab_cache)
        self.encoder.backward(denc, enc_cache)
        return loss

    # --- persistence ---

    def snapshot(self) -> "TransducerModel":
        return TransducerModel(self.spec, self.params.snapshot())

    def header(self, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        header = {"model": self.spec.model_dump(), "label_mode": self.spec.label_tag,
                  "param_version": self.params.version}
        header.update(extra or {})
        return header

    def save(self, path: str, extra: Optional[Dict[str, Any]] = None) -> str:
        return save_checkpoint(path, self.params, self.header(extra))

    @classmethod
    def load(cls, path: str) -> "TransducerModel":
        loaded, header = load_checkpoint(path)
        if "model" not in header:
            raise CheckpointError(f"{path}: header has no model section")
        spec = ModelSpec.model_validate(header["model"])
        model = cls(spec, seed=0)
        expected, found = set(model.params), set(loaded)
        if expected != found:
            missing = sorted(expected - found)[:5]
            extra = sorted(found - expected)[:5]
            raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, unexpected {extra})")
        for name in expected:
            model.params.set(name, loaded[name])
        model.params.version = int(header.get("param_version", 0))
        logger.info(f"Loaded {spec.label_tag} model from {path} ({model.params.num_parameters()} parameters)")
        return model
