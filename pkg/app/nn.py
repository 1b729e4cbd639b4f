"""Numerical core: dense maps, activations, normalization, parameters.

Every primitive comes as a forward function plus an analytic backward; there
is no tape. Layers combine these by hand and ``grad_check`` verifies them.
"""
from typing import Any, Callable, Dict, Iterable, Iterator, Optional, Tuple
import json
import math
import os

import numpy as np
from loguru import logger

from .config import ADAM_BETAS, LAYER_NORM_EPS, LEARNING_RATE

CHECKPOINT_FORMAT = "y-transducer-checkpoint"
CHECKPOINT_VERSION = 1

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DegenerateDistributionError(ValueError):
    """A softmax row has no finite entry."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the model."""


class ParamStore:
    """Named parameter tensors with one gradient accumulator each.

    ``version`` counts optimizer steps. Snapshots are read-only copies that
    inference can share across threads while training keeps writing.
    """

    def __init__(self):
        self._params: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}
        self.version = 0
        self.frozen = False

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"Parameter already registered: {name}")
        array = np.array(value, dtype=np.float64)
        self._params[name] = array
        self._grads[name] = np.zeros_like(array)
        return array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list:
        return [name for name in self._params if name.startswith(prefix)]

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        return self._params.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._params[name].shape:
            raise DimensionError(
                f"{name}: expected shape {self._params[name].shape}, got {value.shape}"
            )
        if self.frozen:
            raise RuntimeError("Cannot modify a parameter snapshot")
        self._params[name][...] = value

    def accumulate(self, name: str, gradient: np.ndarray) -> None:
        if gradient.shape != self._grads[name].shape:
            raise DimensionError(
                f"Gradient for {name} has shape {gradient.shape}, "
                f"parameter has {self._grads[name].shape}"
            )
        self._grads[name] += gradient

    def zero_grad(self) -> None:
        for gradient in self._grads.values():
            gradient.fill(0.0)

    def zero_(self) -> None:
        """Set every parameter to zero (uniform-output model)."""
        for array in self._params.values():
            array.fill(0.0)

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(a.size for n, a in self._params.items() if n.startswith(prefix)))

    def bump_version(self) -> None:
        self.version += 1

    def snapshot(self) -> "ParamStore":
        """Immutable copy for inference."""
        snap = ParamStore()
        for name, array in self._params.items():
            copy = array.copy()
            copy.setflags(write=False)
            snap._params[name] = copy
            snap._grads[name] = np.zeros_like(copy)
        snap.version = self.version
        snap.frozen = True
        return snap


# ===== Initialization =====

def glorot_uniform(rng: np.random.Generator, din: int, dout: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (din + dout))
    return rng.uniform(-limit, limit, size=(din, dout))


def scaled_normal(rng: np.random.Generator, shape, scale: float = 0.02) -> np.ndarray:
    return scale * rng.standard_normal(size=shape)


# ===== Dense maps =====

def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise affine map ``y = xW + b`` over the last axis.

    Args:
        x: Input of shape (..., din)
        W: Weights of shape (din, dout)
        b: Bias of shape (dout,)

    Returns:
        Array of shape (..., dout)
    """
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"linear: x {x.shape}, W {W.shape}, b {b.shape} do not agree"
        )
    return x @ W + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients of ``linear`` with respect to x, W and b."""
    din, dout = W.shape
    x2 = x.reshape(-1, din)
    dy2 = dy.reshape(-1, dout)
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner)


# ===== Distributions =====

def _check_rows(v: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(v, axis=axis, keepdims=True)
    if np.any(np.isneginf(peak)):
        raise DegenerateDistributionError("softmax over a row with every entry -inf")
    return peak


def softmax(v, axis: int = -1) -> np.ndarray:
    """Normalized exponentials; -inf entries come out exactly 0."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DimensionError("softmax needs at least one entry")
    shifted = v - _check_rows(v, axis)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DimensionError("log_softmax needs at least one entry")
    shifted = v - _check_rows(v, axis)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# ===== Normalization =====

def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                       eps: float = LAYER_NORM_EPS):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Per-row normalization over the feature axis."""
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gain = cache
    d = xhat.shape[-1]
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbias = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# ===== Gradient checking =====

def grad_check(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    eps: float = 1e-4,
    samples: int = 8,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
    floor: float = 1e-8,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must compute the loss and accumulate its gradients into
    ``params``. Up to ``samples`` coordinates are drawn from each tensor.

    Args:
        loss_fn: Callable returning the scalar loss for the current params
        params: Parameter store whose gradients are checked
        eps: Finite-difference step, within [1e-6, 1e-3]
        samples: Coordinates sampled per tensor
        seed: Seed for coordinate sampling
        names: Restrict the check to these tensors
        floor: Lower bound of the relative-error denominator

    Returns:
        Maximum relative error over the sampled coordinates
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")

    params.zero_grad()
    loss = loss_fn(params)
    if not math.isfinite(loss):
        raise NumericError(f"Non-finite loss at the checked point: {loss}")
    analytic = {name: params.grad(name).copy() for name in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in (names if names is not None else list(params)):
        array = params[name]
        flat = array.reshape(-1)
        count = min(samples, flat.size)
        for index in rng.choice(flat.size, size=count, replace=False):
            original = flat[index]
            flat[index] = original + eps
            plus = loss_fn(params)
            flat[index] = original - eps
            minus = loss_fn(params)
            flat[index] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericError(f"Non-finite loss while perturbing {name}[{index}]")
            numeric = (plus - minus) / (2.0 * eps)
            exact = analytic[name].reshape(-1)[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)

    params.zero_grad()
    for name, gradient in analytic.items():
        params.accumulate(name, gradient)
    logger.debug(f"grad_check: max relative error {worst:.3e} over {len(analytic)} tensors")
    return worst


# ===== Optimization =====

class AdamOptimizer:
    """Adam moment estimation with optional global-norm clipping."""

    def __init__(self, params: ParamStore, lr: float = LEARNING_RATE,
                 betas: Tuple[float, float] = ADAM_BETAS, eps: float = 1e-9,
                 clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {name: np.zeros_like(params[name]) for name in params}
        self._v = {name: np.zeros_like(params[name]) for name in params}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(self.params.grad(n) ** 2)) for n in self.params))

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if not math.isfinite(norm):
                raise NumericError("Non-finite gradient norm")
            if norm > self.clip_norm:
                scale = self.clip_norm / norm

        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name in self.params:
            g = self.params.grad(name) * scale
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name][...] -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
        self.params.bump_version()


# ===== Checkpoints =====

def _encode_checkpoint(params: ParamStore, header: Dict[str, Any]) -> str:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header,
        "params": {
            name: {"shape": list(array.shape), "values": array.reshape(-1).tolist()}
            for name, array in params.items()
        },
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(path: str, params: ParamStore, header: Dict[str, Any]) -> str:
    """Write parameters and a model header to a versioned JSON container.

    Keys are sorted and floats use their shortest round-trip form, so loading
    and saving again reproduces the file byte for byte.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(_encode_checkpoint(params, header))
    logger.info(f"Saved checkpoint {path} (version {params.version}, {params.num_parameters()} values)")
    return path


def load_checkpoint(path: str) -> Tuple[ParamStore, Dict[str, Any]]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Invalid checkpoint JSON in {path}: {e}") from e

    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint (format={payload.get('format')!r})")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {payload.get('version')}")

    params = ParamStore()
    for name in sorted(payload.get("params", {})):
        entry = payload["params"][name]
        shape = tuple(entry["shape"])
        values = entry["values"]
        if int(np.prod(shape, dtype=np.int64)) != len(values):
            raise CheckpointError(f"{name}: {len(values)} values for shape {shape}")
        params.add(name, np.array(values, dtype=np.float64).reshape(shape))
    return params, payload.get("header", {})
