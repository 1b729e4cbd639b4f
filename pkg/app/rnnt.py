"""RNN-T loss over the (T, U+1) alignment lattice.

Path convention: a path emits the U labels and exactly T blanks and ends with
the blank taken at node (T-1, U). A label emitted from node (t, u) happens
at frame t, so every path is fixed by its nondecreasing emission frames.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import math

import numpy as np
from loguru import logger

NEG_INF = float("-inf")


class LatticeError(ValueError):
    """Lattice and label sequence do not fit together."""


class InfeasibleConstraintError(ValueError):
    """An alignment mask leaves no path through the lattice."""


@dataclass
class Lattice:
    """Per-node log-probabilities, shape (T, U+1, N)."""
    log_probs: np.ndarray
    blank_id: int = 0

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U(self) -> int:
        return self.log_probs.shape[1] - 1

    @property
    def N(self) -> int:
        return self.log_probs.shape[2]

    def node_sums(self) -> np.ndarray:
        return np.logaddexp.reduce(self.log_probs, axis=-1)


@dataclass(frozen=True)
class AlignmentPath:
    """Emission frame of each label (nondecreasing) and the path log-probability."""
    emission_frames: Tuple[int, ...]
    log_prob: float = 0.0

    def times_ms(self, frame_ms: float) -> List[float]:
        return [frame * frame_ms for frame in self.emission_frames]


@dataclass
class AlignMask:
    """allowed[t, u]: label y_{u+1} may be emitted at frame t."""
    allowed: np.ndarray


def _logadd(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _edges(lat: Lattice, y: Sequence[int], mask: Optional[AlignMask] = None):
    if lat.log_probs.ndim != 3:
        raise LatticeError(f"lattice must be (T, U+1, N), got {lat.log_probs.shape}")
    if lat.T < 1:
        raise LatticeError("lattice has no frames (T = 0)")
    if len(y) != lat.U:
        raise LatticeError(f"lattice has U={lat.U}, label sequence has {len(y)}")
    for u, label in enumerate(y):
        if not 0 <= label < lat.N or label == lat.blank_id:
            raise LatticeError(f"label {u} has id {label}, outside the label range of N={lat.N}")

    blank = lat.log_probs[:, :, lat.blank_id]
    U = lat.U
    label = lat.log_probs[:, np.arange(U), np.asarray(y, dtype=np.int64)] if U else np.zeros((lat.T, 0))
    if mask is not None:
        if mask.allowed.shape != (lat.T, U):
            raise LatticeError(f"mask shape {mask.allowed.shape} != ({lat.T}, {U})")
        label = np.where(mask.allowed, label, -np.inf)
    return blank, label


def _forward(blank: np.ndarray, label: np.ndarray) -> np.ndarray:
    T, width = blank.shape
    b = blank.tolist()
    l = label.tolist()
    alpha = [[NEG_INF] * width for _ in range(T)]
    alpha[0][0] = 0.0
    for t in range(T):
        row = alpha[t]
        above = alpha[t - 1] if t else None
        above_blank = b[t - 1] if t else None
        for u in range(width):
            if t == 0 and u == 0:
                continue
            from_blank = above[u] + above_blank[u] if t else NEG_INF
            from_label = row[u - 1] + l[t][u - 1] if u else NEG_INF
            row[u] = _logadd(from_blank, from_label)
    return np.array(alpha)


def _backward(blank: np.ndarray, label: np.ndarray) -> np.ndarray:
    T, width = blank.shape
    U = width - 1
    b = blank.tolist()
    l = label.tolist()
    beta = [[NEG_INF] * width for _ in range(T)]
    beta[T - 1][U] = b[T - 1][U]
    for t in range(T - 1, -1, -1):
        row = beta[t]
        below = beta[t + 1] if t + 1 < T else None
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            via_blank = below[u] + b[t][u] if below is not None else NEG_INF
            via_label = row[u + 1] + l[t][u] if u < U else NEG_INF
            row[u] = _logadd(via_blank, via_label)
    return np.array(beta)


def _log_likelihood(alpha: np.ndarray, blank: np.ndarray) -> float:
    return float(alpha[-1, -1] + blank[-1, -1])


def rnnt_loss(lat: Lattice, y: Sequence[int]) -> float:
    """Negative log-likelihood of y summed over all alignment paths.

    Args:
        lat: Lattice of log-probabilities for (T, U+1) nodes
        y: Label sequence of length U

    Returns:
        -log P(y | x)
    """
    blank, label = _edges(lat, y)
    return -_log_likelihood(_forward(blank, label), blank)


def rnnt_loss_and_grad(lat: Lattice, y: Sequence[int], mask: Optional[AlignMask] = None):
    """Loss and d(loss)/d(log_probs) by forward-backward, optionally constrained."""
    blank, label = _edges(lat, y, mask)
    alpha = _forward(blank, label)
    log_p = _log_likelihood(alpha, blank)
    if log_p == NEG_INF:
        raise InfeasibleConstraintError("alignment mask admits no path")
    beta = _backward(blank, label)

    T, width = blank.shape
    U = width - 1
    grad = np.zeros_like(lat.log_probs)
    with np.errstate(invalid='ignore'):
        g_blank = np.zeros((T, width))
        if T > 1:
            g_blank[:-1] = -np.exp(alpha[:-1] + blank[:-1] + beta[1:] - log_p)
        g_blank[T - 1, U] = -np.exp(alpha[T - 1, U] + blank[T - 1, U] - log_p)
        grad[:, :, lat.blank_id] = g_blank
        if U:
            g_label = -np.exp(alpha[:, :U] + label + beta[:, 1:] - log_p)
            grad[:, np.arange(U), np.asarray(y, dtype=np.int64)] = g_label
    return -log_p, np.nan_to_num(grad, nan=0.0)


def rnnt_grad(lat: Lattice, y: Sequence[int]) -> np.ndarray:
    return rnnt_loss_and_grad(lat, y)[1]


def constrained_mask(ref: AlignmentPath, w_left: Optional[int], w_right: Optional[int],
                     T: int, U: int) -> AlignMask:
    """Allow label u only within [e_u - w_left, e_u + w_right]; None means unbounded."""
    if len(ref.emission_frames) != U:
        raise LatticeError(f"reference has {len(ref.emission_frames)} emissions, expected {U}")
    frames = np.arange(T)[:, None]
    ref_frames = np.asarray(ref.emission_frames, dtype=np.int64)[None, :]
    allowed = np.ones((T, U), dtype=bool)
    if w_left is not None:
        allowed &= frames >= ref_frames - w_left
    if w_right is not None:
        allowed &= frames <= ref_frames + w_right
    return AlignMask(allowed)


def mask_admits_path(mask: AlignMask) -> bool:
    """True when some nondecreasing emission-frame sequence fits the mask."""
    allowed = np.asarray(mask.allowed, dtype=bool)
    frame = 0
    for u in range(allowed.shape[1]):
        candidates = np.flatnonzero(allowed[frame:, u])
        if not len(candidates):
            return False
        frame += int(candidates[0])
    return True


def word_reference(ref: AlignmentPath, labels: Sequence[int], space_id: Optional[int]) -> AlignmentPath:
    """Give every token of a word the reference frame of the word's last token."""
    if space_id is None:
        return ref
    frames = list(ref.emission_frames)
    out = list(frames)
    start = 0
    for u in range(len(labels) + 1):
        if u == len(labels) or labels[u] == space_id:
            if u > start:
                for k in range(start, u):
                    out[k] = frames[u - 1]
            start = u + 1
    return AlignmentPath(tuple(out), ref.log_prob)


def rnnt_loss_constrained(lat: Lattice, y: Sequence[int], mask: AlignMask) -> float:
    blank, label = _edges(lat, y, mask)
    log_p = _log_likelihood(_forward(blank, label), blank)
    if log_p == NEG_INF:
        raise InfeasibleConstraintError("alignment mask admits no path")
    return -log_p


def viterbi_alignment(lat: Lattice, y: Sequence[int]) -> AlignmentPath:
    """Most probable path; ties go to the blank predecessor (earliest emission)."""
    blank, label = _edges(lat, y)
    T, width = blank.shape
    U = width - 1
    b = blank.tolist()
    l = label.tolist()
    best = [[NEG_INF] * width for _ in range(T)]
    came_by_label = [[False] * width for _ in range(T)]
    best[0][0] = 0.0
    for t in range(T):
        for u in range(width):
            if t == 0 and u == 0:
                continue
            from_blank = best[t - 1][u] + b[t - 1][u] if t else NEG_INF
            from_label = best[t][u - 1] + l[t][u - 1] if u else NEG_INF
            if from_label > from_blank:
                best[t][u] = from_label
                came_by_label[t][u] = True
            else:
                best[t][u] = from_blank

    frames = [0] * U
    t, u = T - 1, U
    while t > 0 or u > 0:
        if came_by_label[t][u]:
            frames[u - 1] = t
            u -= 1
        else:
            t -= 1
    return AlignmentPath(tuple(frames), float(best[T - 1][U] + b[T - 1][U]))


def alignment_records(path: AlignmentPath, labels: Sequence[int], frame_ms: float,
                      symbols: Optional[Sequence[str]] = None) -> List[Dict]:
    """Alignment dump entries: one {label, frame, time_ms} per emitted label."""
    records = []
    for label, frame in zip(labels, path.emission_frames):
        record = {"label": int(label), "frame": int(frame), "time_ms": frame * frame_ms}
        if symbols is not None:
            record["symbol"] = symbols[label]
        records.append(record)
    logger.debug(f"alignment of {len(records)} labels, path log-prob {path.log_prob:.4f}")
    return records
