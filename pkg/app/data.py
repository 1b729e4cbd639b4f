"""Synthetic speech-like data and dataset files.

Each token is rendered as 2-5 noisy frames of a per-symbol prototype; the
first frame of a token carries an onset marker in the last feature, so
repeated tokens stay distinguishable. Silence frames use the blank
prototype (all zeros).
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple
import json
import os

import numpy as np
from loguru import logger
from pydantic import BaseModel, ValidationError
from sklearn.metrics.pairwise import euclidean_distances

from .config import FEATURE_DIM, FRAME_MS
from .transducer import TOY_SYMBOLS, Vocab

PROTOTYPE_SEED = 1234
DEFAULT_TOKEN_RANGE = (3, 8)
DEFAULT_SPAN_RANGE = (2, 5)
DEFAULT_NOISE = 0.3
SPACE_PROBABILITY = 0.25


class DatasetParseError(ValueError):
    """A dataset file record could not be parsed."""


class VocabMismatchError(ValueError):
    """Dataset and model disagree about the vocabulary."""


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    labels: List[int]
    ref_times: List[int]
    frame_ms: float = FRAME_MS

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def duration_seconds(self) -> float:
        return self.num_frames * self.frame_ms / 1000.0

    def text(self, vocab: Vocab) -> str:
        return vocab.decode(self.labels)


@dataclass
class Dataset:
    utterances: List[Utterance]
    vocab: Vocab = field(default_factory=Vocab)
    frame_ms: float = FRAME_MS
    feature_dim: int = FEATURE_DIM
    seed: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, index):
        return self.utterances[index]

    def split(self, held_out: int) -> Tuple["Dataset", "Dataset"]:
        head = Dataset(self.utterances[:-held_out] if held_out else list(self.utterances),
                       self.vocab, self.frame_ms, self.feature_dim, self.seed, dict(self.params))
        tail = Dataset(self.utterances[-held_out:] if held_out else [],
                       self.vocab, self.frame_ms, self.feature_dim, self.seed, dict(self.params))
        return head, tail

    @property
    def audio_seconds(self) -> float:
        return sum(u.duration_seconds for u in self.utterances)


def check_vocab(dataset_vocab: Vocab, model_vocab: Vocab) -> None:
    if dataset_vocab != model_vocab:
        raise VocabMismatchError(
            f"dataset vocabulary {dataset_vocab.to_list()} does not match model vocabulary "
            f"{model_vocab.to_list()}"
        )


# ===== Generation =====

def prototype_table(vocab: Vocab, feature_dim: int = FEATURE_DIM,
                    seed: int = PROTOTYPE_SEED) -> np.ndarray:
    """One prototype per symbol; row 0 (blank) is silence, last column is the onset channel."""
    rng = np.random.default_rng(seed)
    table = np.zeros((vocab.size, feature_dim))
    table[1:, :feature_dim - 1] = rng.standard_normal((vocab.size - 1, feature_dim - 1))
    return table


def _draw_tokens(rng: np.random.Generator, length: int, vocab: Vocab) -> List[int]:
    letters = [i for i in vocab.label_ids if i != vocab.space_id]
    tokens: List[int] = []
    for position in range(length):
        inner = 0 < position < length - 1
        if (vocab.space_id is not None and inner and tokens[-1] != vocab.space_id
                and rng.random() < SPACE_PROBABILITY):
            tokens.append(vocab.space_id)
        else:
            tokens.append(int(rng.choice(letters)))
    return tokens


def generate_utterance(rng: np.random.Generator, len_range: Tuple[int, int] = DEFAULT_TOKEN_RANGE,
                       vocab: Optional[Vocab] = None, prototypes: Optional[np.ndarray] = None,
                       noise: float = DEFAULT_NOISE, frame_ms: float = FRAME_MS,
                       uid: str = "utt", span_range: Tuple[int, int] = DEFAULT_SPAN_RANGE,
                       feature_dim: int = FEATURE_DIM) -> Utterance:
    """Draw a token sequence and render its features.

    Args:
        rng: Random generator owned by this utterance
        len_range: Inclusive range of token counts
        vocab: Output vocabulary (blank never drawn as a target)
        prototypes: Symbol prototype table, see ``prototype_table``
        noise: Standard deviation of additive Gaussian noise
        frame_ms: Frame duration
        uid: Utterance id
        span_range: Inclusive range of frames per token

    Returns:
        Utterance with ref_times at the first frame of each token's span
    """
    vocab = vocab or Vocab()
    if prototypes is None:
        prototypes = prototype_table(vocab, feature_dim)
    length = int(rng.integers(len_range[0], len_range[1] + 1))
    tokens = _draw_tokens(rng, length, vocab)

    lead = int(rng.integers(0, 3))
    trail = int(rng.integers(0, 3))
    rows: List[np.ndarray] = [prototypes[vocab.blank_id]] * lead
    ref_times: List[int] = []
    for token in tokens:
        span = int(rng.integers(span_range[0], span_range[1] + 1))
        ref_times.append(len(rows))
        onset = prototypes[token].copy()
        onset[-1] = 1.0
        rows.append(onset)
        rows.extend([prototypes[token]] * (span - 1))
    rows.extend([prototypes[vocab.blank_id]] * trail)

    clean = np.array(rows)
    features = clean + noise * rng.standard_normal(clean.shape) if noise > 0 else clean
    return Utterance(uid, features, tokens, ref_times, frame_ms)


def generate_dataset(n: int, seed: int, len_range: Tuple[int, int] = DEFAULT_TOKEN_RANGE,
                     noise: float = DEFAULT_NOISE, vocab: Optional[Vocab] = None,
                     frame_ms: float = FRAME_MS, feature_dim: int = FEATURE_DIM,
                     prefix: str = "utt") -> Dataset:
    """Generate n utterances, each from its own child of the master seed."""
    vocab = vocab or Vocab()
    prototypes = prototype_table(vocab, feature_dim)
    children = np.random.SeedSequence(seed).spawn(n)
    utterances = [
        generate_utterance(np.random.default_rng(child), len_range, vocab, prototypes, noise,
                           frame_ms, f"{prefix}-{index:05d}", feature_dim=feature_dim)
        for index, child in enumerate(children)
    ]
    params = {"n": n, "len_range": list(len_range), "noise": noise, "prototype_seed": PROTOTYPE_SEED}
    logger.info(f"Generated {n} utterances (seed {seed}, {sum(u.num_frames for u in utterances)} frames)")
    return Dataset(utterances, vocab, frame_ms, feature_dim, seed, params)


def nearest_prototype_labels(features: np.ndarray, prototypes: np.ndarray) -> List[int]:
    """Oracle decoder: a token starts at each onset frame and takes its nearest prototype."""
    distances = euclidean_distances(features[:, :-1], prototypes[:, :-1])
    nearest = distances.argmin(axis=1)
    return [int(nearest[t]) for t in range(len(features))
            if features[t, -1] > 0.5 and nearest[t] != 0]


# ===== Files =====

class DatasetHeader(BaseModel):
    type: str = "header"
    vocab: List[str]
    frame_ms: float
    feature_dim: int
    seed: Optional[int] = None
    params: Dict[str, Any] = {}


class UtteranceRecord(BaseModel):
    id: str
    features: List[List[float]]
    labels: List[int]
    ref_times: List[int]
    frame_ms: float


def _record(utt: Utterance) -> Dict[str, Any]:
    return {
        "id": utt.id,
        "features": utt.features.tolist(),
        "labels": [int(x) for x in utt.labels],
        "ref_times": [int(x) for x in utt.ref_times],
        "frame_ms": utt.frame_ms,
    }


def write_dataset(dataset: Dataset, path: str) -> str:
    """Write a header line then one JSON record per utterance."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    header = DatasetHeader(vocab=dataset.vocab.to_list(), frame_ms=dataset.frame_ms,
                           feature_dim=dataset.feature_dim, seed=dataset.seed, params=dataset.params)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(header.model_dump_json() + "\n")
        for utt in dataset.utterances:
            f.write(json.dumps(_record(utt)) + "\n")
    logger.info(f"Wrote {len(dataset)} utterances to {path}")
    return path


def read_dataset(path: str) -> Dataset:
    """Read a dataset file; errors name the offending line."""
    dataset = Dataset([])
    seen = set()
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                if line_no == 1 and payload.get("type") == "header":
                    header = DatasetHeader.model_validate(payload)
                    dataset.vocab = Vocab(header.vocab)
                    dataset.frame_ms = header.frame_ms
                    dataset.feature_dim = header.feature_dim
                    dataset.seed = header.seed
                    dataset.params = header.params
                    continue
                record = UtteranceRecord.model_validate(payload)
            except (json.JSONDecodeError, ValidationError, AttributeError) as e:
                raise DatasetParseError(f"{path}, line {line_no}: {e}") from e

            features = np.array(record.features, dtype=np.float64).reshape(-1, dataset.feature_dim) \
                if record.features else np.zeros((0, dataset.feature_dim))
            if len(record.labels) != len(record.ref_times):
                raise DatasetParseError(f"{path}, line {line_no}: labels and ref_times differ in length")
            if any(not 0 <= t < len(features) for t in record.ref_times) or \
                    any(a > b for a, b in zip(record.ref_times, record.ref_times[1:])):
                raise DatasetParseError(f"{path}, line {line_no}: ref_times out of order or range")
            if record.id in seen:
                raise DatasetParseError(f"{path}, line {line_no}: duplicate id {record.id}")
            seen.add(record.id)
            dataset.utterances.append(
                Utterance(record.id, features, list(record.labels), list(record.ref_times), record.frame_ms)
            )
    logger.info(f"Read {len(dataset)} utterances from {path}")
    return dataset
