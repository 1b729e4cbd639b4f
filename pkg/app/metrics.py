"""Recognition metrics: WER, token accuracy, alignment delay and RTF."""
from typing import Dict, List, Optional, Sequence, Tuple, Union
import time

import numpy as np
from editdistance import eval as levenshtein
from loguru import logger
from pydantic import BaseModel

from .attention import ContextConfig
from .data import Dataset, check_vocab
from .infer import LabelCache, offline_decode
from .rnnt import AlignmentPath
from .transducer import TransducerModel

Words = Union[str, Sequence[str]]


def _words(value: Words) -> List[str]:
    return value.split() if isinstance(value, str) else list(value)


def wer(ref: Words, hyp: Words) -> float:
    """(S + D + I) / len(ref) by minimal word edit distance.

    An empty reference counts every hypothesis word as an insertion over a
    denominator of 1, so wer([], []) == 0 and wer([], ["a", "b"]) == 2.
    """
    ref_words, hyp_words = _words(ref), _words(hyp)
    errors = levenshtein(ref_words, hyp_words)
    return errors / max(len(ref_words), 1)


def corpus_wer(refs: Sequence[Words], hyps: Sequence[Words]) -> float:
    """Total word errors over total reference words."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    errors = sum(levenshtein(_words(r), _words(h)) for r, h in zip(refs, hyps))
    words = sum(len(_words(r)) for r in refs)
    return errors / max(words, 1)


def token_accuracy(ref: Sequence[int], hyp: Sequence[int]) -> float:
    """1 - token edit distance / reference length, floored at 0."""
    if not ref:
        return 1.0 if not hyp else 0.0
    return max(0.0, 1.0 - levenshtein(list(ref), list(hyp)) / len(ref))


def align_words(ref: Sequence, hyp: Sequence) -> Tuple[List[Tuple[int, int]], int, int]:
    """Minimum-edit alignment of two word lists.

    Returns:
        (pairs, deletions, insertions): ``pairs`` holds (ref index, hyp index)
        for matched and substituted words; ties prefer the diagonal
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = min(cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                             cost[i - 1, j] + 1,
                             cost[i, j - 1] + 1)

    pairs: List[Tuple[int, int]] = []
    deletions = insertions = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            deletions += 1
            i -= 1
        else:
            insertions += 1
            j -= 1
    pairs.reverse()
    return pairs, deletions, insertions


def word_times(labels: Sequence[int], frames: Sequence[int], space_id: Optional[int],
               frame_ms: float) -> Tuple[List[Tuple[int, ...]], List[float]]:
    """Split a token sequence into words; a word's time is its last token's emission."""
    words: List[Tuple[int, ...]] = []
    times: List[float] = []
    current: List[int] = []
    last_frame = 0
    for label, frame in zip(labels, frames):
        if label == space_id:
            if current:
                words.append(tuple(current))
                times.append(last_frame * frame_ms)
            current = []
            continue
        current.append(int(label))
        last_frame = frame
    if current:
        words.append(tuple(current))
        times.append(last_frame * frame_ms)
    return words, times


def alignment_delay(ref_times: Sequence[float], hyp_times: Sequence[float]) -> float:
    """Mean of hyp - ref over paired words; positive means the hypothesis is late."""
    if len(ref_times) != len(hyp_times):
        raise ValueError(f"{len(ref_times)} reference times but {len(hyp_times)} hypothesis times")
    if not ref_times:
        return 0.0
    return float(np.mean(np.asarray(hyp_times, dtype=np.float64) - np.asarray(ref_times, dtype=np.float64)))


class DelayReport(BaseModel):
    per_utterance: List[float]
    words_per_utterance: List[int]
    mean_ms: float
    words: int
    unpaired_words: int = 0


def measure_delay(references: Sequence[Tuple[Sequence[int], Sequence[int]]],
                  hypotheses: Sequence[Tuple[Sequence[int], Sequence[int]]],
                  space_id: Optional[int], frame_ms: float) -> DelayReport:
    """Corpus alignment delay from (labels, emission frames) pairs.

    Words are paired by minimum-edit alignment of the two transcripts;
    matched and substituted words contribute, inserted and deleted words are
    only counted. The corpus mean weights utterances by paired words.
    """
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references but {len(hypotheses)} hypotheses")
    per_utt: List[float] = []
    counts: List[int] = []
    total = 0.0
    unpaired = 0
    for (ref_labels, ref_frames), (hyp_labels, hyp_frames) in zip(references, hypotheses):
        ref_words, ref_t = word_times(ref_labels, ref_frames, space_id, frame_ms)
        hyp_words, hyp_t = word_times(hyp_labels, hyp_frames, space_id, frame_ms)
        pairs, deletions, insertions = align_words(ref_words, hyp_words)
        unpaired += deletions + insertions
        delay = alignment_delay([ref_t[i] for i, _ in pairs], [hyp_t[j] for _, j in pairs])
        per_utt.append(delay)
        counts.append(len(pairs))
        total += delay * len(pairs)
    words = sum(counts)
    return DelayReport(per_utterance=per_utt, words_per_utterance=counts,
                       mean_ms=total / words if words else 0.0, words=words,
                       unpaired_words=unpaired)


def rtf(wall_seconds: float, audio_seconds: float) -> float:
    if audio_seconds <= 0:
        raise ValueError("audio duration must be positive")
    return wall_seconds / audio_seconds


class EvalReport(BaseModel):
    config: str
    utterances: int
    wer: float
    token_accuracy: float
    rtf: float
    delay: Optional[DelayReport] = None
    label_encoder_calls: int = 0
    cache_hits: int = 0


def evaluate(model: TransducerModel, dataset: Dataset, cfg: ContextConfig, beam: int = 1,
             use_cache: bool = True,
             references: Optional[Dict[str, AlignmentPath]] = None) -> EvalReport:
    """Decode a dataset offline under ``cfg`` and score it.

    When ``references`` maps utterance ids to reference alignments of the
    ground-truth labels, the report includes the alignment delay of the
    decoded emission times against them.
    """
    check_vocab(dataset.vocab, model.vocab)
    cache = LabelCache() if use_cache else None
    calls_before = model.label_encoder_calls
    refs, hyps, ref_tokens, hyp_tokens = [], [], [], []
    delay_refs, delay_hyps = [], []
    started = time.perf_counter()
    for utt in dataset:
        hyp = offline_decode(model, utt.features, cfg, beam=beam, cache=cache)
        refs.append(model.vocab.decode(utt.labels))
        hyps.append(hyp.text(model.vocab))
        ref_tokens.append(utt.labels)
        hyp_tokens.append(hyp.labels)
        if references is not None and utt.id in references:
            delay_refs.append((utt.labels, references[utt.id].emission_frames))
            delay_hyps.append((hyp.labels, hyp.frames))
    wall = time.perf_counter() - started

    total_ref = sum(len(r) for r in ref_tokens)
    errors = sum(levenshtein(list(r), list(h)) for r, h in zip(ref_tokens, hyp_tokens))
    accuracy = max(0.0, 1.0 - errors / total_ref) if total_ref else 1.0
    delay = None
    if references is not None:
        delay = measure_delay(delay_refs, delay_hyps, model.vocab.space_id, dataset.frame_ms)
    report = EvalReport(
        config=cfg.notation(),
        utterances=len(dataset),
        wer=corpus_wer(refs, hyps),
        token_accuracy=accuracy,
        rtf=rtf(wall, dataset.audio_seconds) if dataset.audio_seconds > 0 else 0.0,
        delay=delay,
        label_encoder_calls=model.label_encoder_calls - calls_before,
        cache_hits=cache.hits if cache is not None else 0,
    )
    logger.info(
        f"eval {report.config}: WER {report.wer:.3f}, token accuracy {report.token_accuracy:.3f}, "
        f"RTF {report.rtf:.3f}"
    )
    return report
