"""Masked self-attention layers with limited left/right context.

The context mask is what turns one set of weights into a causal, a
limited-lookahead or a full-attention encoder, so every encoding mode
(training, query slicing, batch step) goes through the same
``attention_forward`` with absolute query and key positions.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .config import FRAME_MS, LAYER_NORM_EPS
from .nn import (
    DimensionError,
    ParamStore,
    gelu,
    gelu_backward,
    glorot_uniform,
    layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    linear,
    linear_backward,
    scaled_normal,
    softmax,
)

# Right context large enough to mean "the whole utterance"
FULL_CONTEXT = 2 ** 31 - 1


class UnsupportedConfigError(ValueError):
    """A context configuration cannot be used with this model or mode."""


class ContextConfig(BaseModel):
    """Per-layer attention context plus output delay.

    Context lengths are counted in frames at the layer's own rate;
    ``frame_rates`` gives the number of input frames per layer frame.
    """
    model_config = ConfigDict(frozen=True)

    per_layer_right: Tuple[int, ...]
    per_layer_left: Tuple[Optional[int], ...]
    output_delay: int = 0
    frame_ms: float = FRAME_MS
    frame_rates: Tuple[int, ...] = ()

    @model_validator(mode='before')
    @classmethod
    def _fill_rates(cls, data):
        if isinstance(data, dict) and not data.get('frame_rates'):
            data = dict(data)
            data['frame_rates'] = (1,) * len(data.get('per_layer_right', ()))
        return data

    @model_validator(mode='after')
    def _check(self):
        depth = len(self.per_layer_right)
        if depth == 0:
            raise ValueError("context config needs at least one layer")
        if len(self.per_layer_left) != depth or len(self.frame_rates) != depth:
            raise ValueError(
                f"per-layer lists disagree: {depth} rights, {len(self.per_layer_left)} lefts, "
                f"{len(self.frame_rates)} rates"
            )
        if any(r < 0 for r in self.per_layer_right):
            raise ValueError("right contexts must be >= 0")
        if any(left is not None and left < 0 for left in self.per_layer_left):
            raise ValueError("left contexts must be >= 0 or unbounded")
        if any(rate < 1 for rate in self.frame_rates):
            raise ValueError("frame rates must be >= 1")
        if self.frame_ms <= 0:
            raise ValueError("frame_ms must be positive")
        if self.output_delay < 0:
            raise ValueError("output_delay must be >= 0")
        return self

    @classmethod
    def from_rights(cls, rights: Sequence[int], left: Optional[int] = None,
                    output_delay: int = 0, frame_ms: float = FRAME_MS,
                    frame_rates: Optional[Sequence[int]] = None) -> "ContextConfig":
        rights = tuple(int(r) for r in rights)
        return cls(
            per_layer_right=rights,
            per_layer_left=(left,) * len(rights),
            output_delay=output_delay,
            frame_ms=frame_ms,
            frame_rates=tuple(frame_rates) if frame_rates else (1,) * len(rights),
        )

    @property
    def depth(self) -> int:
        return len(self.per_layer_right)

    @property
    def has_full_context(self) -> bool:
        return any(r >= FULL_CONTEXT for r in self.per_layer_right)

    def lookahead_frames(self) -> int:
        """Summed right context in input frames (stacking converted)."""
        return int(sum(r * rate for r, rate in zip(self.per_layer_right, self.frame_rates)))

    def with_left(self, left: Optional[int]) -> "ContextConfig":
        return self.model_copy(update={'per_layer_left': (left,) * self.depth})

    def notation(self) -> str:
        terms = []
        for right in self.per_layer_right:
            label = "full" if right >= FULL_CONTEXT else str(right)
            if terms and terms[-1][0] == label:
                terms[-1][1] += 1
            else:
                terms.append([label, 1])
        return " + ".join(f"[{k}] x {m}" if m > 1 else f"[{k}]" for k, m in terms)


def position_offsets(q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    return k_pos[None, :] - q_pos[:, None]


def mask_from_offsets(offsets: np.ndarray, left: Optional[int], right: int) -> np.ndarray:
    mask = offsets <= right
    if left is not None:
        mask &= offsets >= -left
    return mask


def build_context_mask(T: int, left: Optional[int], right: int) -> np.ndarray:
    """Boolean (T, T) mask; row t may attend to s iff t-left <= s <= t+right.

    Args:
        T: Sequence length (>= 1)
        left: Left context in frames, None for unbounded
        right: Right context in frames

    Returns:
        Attendable-position matrix, diagonal always true
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    positions = np.arange(T)
    return mask_from_offsets(position_offsets(positions, positions), left, right)


# ===== Relative position bias =====

def relpos_index(offsets: np.ndarray, max_relative: int) -> np.ndarray:
    return np.clip(offsets, -max_relative, max_relative) + max_relative


def relpos_bias(offset: int, table: np.ndarray) -> np.ndarray:
    """Learned per-head bias for a (clipped) key-minus-query offset."""
    max_relative = (table.shape[1] - 1) // 2
    return table[:, int(relpos_index(np.asarray(offset), max_relative))]


# ===== Multi-head attention =====

def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, T, d = x.shape
    if d % heads:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    return np.swapaxes(x.reshape(*lead, T, heads, d // heads), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, H, T, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, T, H * dh)


def attention_forward(q, k, v, mask, offsets, relpos):
    """Scaled dot-product attention with additive relative-position bias.

    Shapes: q (..., H, Tq, dh), k/v (..., H, Tk, dh), mask/offsets (Tq, Tk),
    relpos (H, 2*max_relative+1).
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    index = relpos_index(offsets, (relpos.shape[1] - 1) // 2)
    logits = (q @ np.swapaxes(k, -1, -2)) * scale + relpos[:, index]
    logits = np.where(mask, logits, -np.inf)
    probs = softmax(logits, axis=-1)
    return probs @ v, (q, k, v, probs, index, scale)


def attention_backward(dctx, cache, relpos_shape):
    q, k, v, probs, index, scale = cache
    dprobs = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(probs, -1, -2) @ dctx
    dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dq = (dlogits @ k) * scale
    dk = (np.swapaxes(dlogits, -1, -2) @ q) * scale

    heads, width = relpos_shape
    per_head = dlogits.reshape(-1, heads, *index.shape).sum(axis=0)
    drelpos = np.stack([
        np.bincount(index.reshape(-1), weights=per_head[h].reshape(-1), minlength=width)
        for h in range(heads)
    ])
    return dq, dk, dv, drelpos


def mhsa(x: np.ndarray, mask: np.ndarray, heads: int, relpos: np.ndarray,
         weights: Dict[str, np.ndarray]) -> np.ndarray:
    """Masked multi-head self-attention over (T, d) input.

    ``weights`` holds wq/bq/wk/wv/bv/wo/bo; keys carry no bias. Offsets are
    taken from row and column indices, so ``relpos`` biases depend on s - t only.
    """
    T = x.shape[-2]
    positions = np.arange(T)
    q = split_heads(linear(x, weights['wq'], weights['bq']), heads)
    k = split_heads(x @ weights['wk'], heads)
    v = split_heads(linear(x, weights['wv'], weights['bv']), heads)
    ctx, _ = attention_forward(q, k, v, mask, position_offsets(positions, positions), relpos)
    return linear(merge_heads(ctx), weights['wo'], weights['bo'])


# ===== Frame-rate change =====

def stack_frames(x: np.ndarray, factor: int) -> np.ndarray:
    """Concatenate groups of ``factor`` consecutive rows, zero-padding the tail."""
    if factor < 1:
        raise ValueError(f"stacking factor must be >= 1, got {factor}")
    T, d = x.shape
    rows = -(-T // factor)
    padded = np.zeros((rows * factor, d), dtype=x.dtype)
    padded[:T] = x
    return padded.reshape(rows, factor * d)


def unstack_frames(y: np.ndarray, factor: int, T: Optional[int] = None) -> np.ndarray:
    rows, width = y.shape
    out = y.reshape(rows * factor, width // factor)
    return out if T is None else out[:T]


# ===== Streaming state =====

@dataclass
class LayerState:
    """Key/value rows kept for the most recent ``left`` frames of one layer."""
    keys: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    start: int = 0

    @property
    def length(self) -> int:
        return 0 if self.keys is None else self.keys.shape[-2]

    @property
    def end(self) -> int:
        return self.start + self.length

    def append(self, keys: np.ndarray, values: np.ndarray) -> None:
        if self.keys is None:
            self.keys, self.values = keys, values
        else:
            self.keys = np.concatenate([self.keys, keys], axis=-2)
            self.values = np.concatenate([self.values, values], axis=-2)

    def trim(self, first_needed: int) -> None:
        drop = min(max(0, first_needed - self.start), self.length)
        if drop:
            self.keys = self.keys[..., drop:, :]
            self.values = self.values[..., drop:, :]
            self.start += drop


@dataclass
class AttentionMeter:
    """Peak attention-matrix entries per head, overall and per layer."""
    peak: int = 0
    calls: int = 0
    per_layer: Dict[str, int] = field(default_factory=dict)

    def record(self, layer: str, rows: int, cols: int) -> None:
        size = rows * cols
        self.calls += 1
        self.peak = max(self.peak, size)
        self.per_layer[layer] = max(self.per_layer.get(layer, 0), size)


# ===== Transformer layer =====

class TransformerLayer:
    """Pre-norm transformer block: x' = x + MHSA(LN(x)); y = x' + FFN(LN(x'))."""

    def __init__(self, params: ParamStore, prefix: str, d: int, heads: int, ffn: int,
                 max_relative: int, eps: float = LAYER_NORM_EPS):
        if d % heads:
            raise DimensionError(f"model dim {d} not divisible by {heads} heads")
        self.params = params
        self.prefix = prefix
        self.d = d
        self.heads = heads
        self.ffn = ffn
        self.max_relative = max_relative
        self.eps = eps

    def init(self, rng: np.random.Generator) -> None:
        d, f = self.d, self.ffn
        p = self.params
        p.add(f"{self.prefix}.ln1.g", np.ones(d))
        p.add(f"{self.prefix}.ln1.b", np.zeros(d))
        for name in ('wq', 'wk', 'wv', 'wo'):
            p.add(f"{self.prefix}.attn.{name}", glorot_uniform(rng, d, d))
            # a key bias only shifts a whole score row, which softmax ignores
            if name != 'wk':
                p.add(f"{self.prefix}.attn.b{name[1]}", np.zeros(d))
        p.add(f"{self.prefix}.attn.relpos",
              scaled_normal(rng, (self.heads, 2 * self.max_relative + 1)))
        p.add(f"{self.prefix}.ln2.g", np.ones(d))
        p.add(f"{self.prefix}.ln2.b", np.zeros(d))
        p.add(f"{self.prefix}.ffn.w1", glorot_uniform(rng, d, f))
        p.add(f"{self.prefix}.ffn.b1", np.zeros(f))
        p.add(f"{self.prefix}.ffn.w2", glorot_uniform(rng, f, d))
        p.add(f"{self.prefix}.ffn.b2", np.zeros(d))

    def w(self, name: str) -> np.ndarray:
        return self.params[f"{self.prefix}.{name}"]

    def _acc(self, name: str, gradient: np.ndarray) -> None:
        self.params.accumulate(f"{self.prefix}.{name}", gradient)

    def attention_weights(self) -> Dict[str, np.ndarray]:
        return {name: self.w(f"attn.{name}") for name in
                ('wq', 'bq', 'wk', 'wv', 'bv', 'wo', 'bo')}

    # --- inference pieces, shared by every encoding mode ---

    def project(self, x: np.ndarray):
        """Queries, keys and values (heads split) for rows of x."""
        n = layer_norm(x, self.w('ln1.g'), self.w('ln1.b'), self.eps)
        q = split_heads(linear(n, self.w('attn.wq'), self.w('attn.bq')), self.heads)
        k = split_heads(n @ self.w('attn.wk'), self.heads)
        v = split_heads(linear(n, self.w('attn.wv'), self.w('attn.bv')), self.heads)
        return q, k, v

    def attend(self, q, k, v, q_pos, k_pos, left, right, meter: Optional[AttentionMeter] = None):
        offsets = position_offsets(q_pos, k_pos)
        mask = mask_from_offsets(offsets, left, right)
        if meter is not None:
            meter.record(self.prefix, len(q_pos), len(k_pos))
        ctx, _ = attention_forward(q, k, v, mask, offsets, self.w('attn.relpos'))
        return ctx

    def finish(self, x: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        """Output projection, residual and feed-forward block."""
        x1 = x + linear(merge_heads(ctx), self.w('attn.wo'), self.w('attn.bo'))
        n2 = layer_norm(x1, self.w('ln2.g'), self.w('ln2.b'), self.eps)
        hidden = gelu(linear(n2, self.w('ffn.w1'), self.w('ffn.b1')))
        return x1 + linear(hidden, self.w('ffn.w2'), self.w('ffn.b2'))

    def apply(self, x: np.ndarray, positions: np.ndarray, left: Optional[int], right: int,
              block: Optional[int] = None, meter: Optional[AttentionMeter] = None) -> np.ndarray:
        """Encode a whole sequence, optionally one query block at a time."""
        q, k, v = self.project(x)
        T = x.shape[-2]
        if block is None or block >= T:
            ctx = self.attend(q, k, v, positions, positions, left, right, meter)
        else:
            ctx = np.empty_like(q)
            for i in range(0, T, block):
                j = min(T, i + block)
                ks = 0 if left is None else max(0, i - left)
                ke = min(T, j + right)
                ctx[..., i:j, :] = self.attend(
                    q[..., i:j, :], k[..., ks:ke, :], v[..., ks:ke, :],
                    positions[i:j], positions[ks:ke], left, right, meter,
                )
        return self.finish(x, ctx)

    def __call__(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return self.forward(x, mask)[0]

    # --- training ---

    def forward(self, x: np.ndarray, mask: np.ndarray, offsets: Optional[np.ndarray] = None):
        """Full-sequence forward keeping what ``backward`` needs."""
        T = x.shape[-2]
        if mask.shape != (T, T):
            raise DimensionError(f"mask {mask.shape} does not match sequence length {T}")
        if offsets is None:
            positions = np.arange(T)
            offsets = position_offsets(positions, positions)

        n1, ln1 = layer_norm_forward(x, self.w('ln1.g'), self.w('ln1.b'), self.eps)
        q = split_heads(linear(n1, self.w('attn.wq'), self.w('attn.bq')), self.heads)
        k = split_heads(n1 @ self.w('attn.wk'), self.heads)
        v = split_heads(linear(n1, self.w('attn.wv'), self.w('attn.bv')), self.heads)
        ctx, att = attention_forward(q, k, v, mask, offsets, self.w('attn.relpos'))
        merged = merge_heads(ctx)
        x1 = x + linear(merged, self.w('attn.wo'), self.w('attn.bo'))
        n2, ln2 = layer_norm_forward(x1, self.w('ln2.g'), self.w('ln2.b'), self.eps)
        pre = linear(n2, self.w('ffn.w1'), self.w('ffn.b1'))
        hidden = gelu(pre)
        y = x1 + linear(hidden, self.w('ffn.w2'), self.w('ffn.b2'))
        return y, (n1, ln1, att, merged, n2, ln2, pre, hidden)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        n1, ln1, att, merged, n2, ln2, pre, hidden = cache

        dhidden, dw2, db2 = linear_backward(dy, hidden, self.w('ffn.w2'))
        self._acc('ffn.w2', dw2)
        self._acc('ffn.b2', db2)
        dpre = gelu_backward(dhidden, pre)
        dn2, dw1, db1 = linear_backward(dpre, n2, self.w('ffn.w1'))
        self._acc('ffn.w1', dw1)
        self._acc('ffn.b1', db1)
        dx1_norm, dg2, db2_norm = layer_norm_backward(dn2, ln2)
        self._acc('ln2.g', dg2)
        self._acc('ln2.b', db2_norm)
        dx1 = dy + dx1_norm

        dmerged, dwo, dbo = linear_backward(dx1, merged, self.w('attn.wo'))
        self._acc('attn.wo', dwo)
        self._acc('attn.bo', dbo)
        relpos = self.w('attn.relpos')
        dq, dk, dv, drelpos = attention_backward(
            split_heads(dmerged, self.heads), att, relpos.shape
        )
        self._acc('attn.relpos', drelpos)

        dn1 = np.zeros_like(n1)
        for name, grad in (('q', dq), ('k', dk), ('v', dv)):
            dn, dW, db = linear_backward(merge_heads(grad), n1, self.w(f'attn.w{name}'))
            self._acc(f'attn.w{name}', dW)
            if name != 'k':
                self._acc(f'attn.b{name}', db)
            dn1 += dn
        dx_norm, dg1, db1_norm = layer_norm_backward(dn1, ln1)
        self._acc('ln1.g', dg1)
        self._acc('ln1.b', db1_norm)
        return dx1 + dx_norm
