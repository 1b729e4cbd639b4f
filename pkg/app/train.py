"""Variable-context training.

Context configurations are written as sums of ``[k] x m`` terms, e.g.
``[0] x 15 + [8] x 5``: the first 15 layers see no future frames, the last
5 see 8. Each batch samples one configuration uniformly from the run's
menu, and the sampled right contexts decide the attention masks.
"""
from typing import List, Literal, Optional, Sequence
import math
import os
import re
import time

import numpy as np
from loguru import logger
from pydantic import BaseModel, ValidationError, model_validator

from .attention import FULL_CONTEXT, ContextConfig, UnsupportedConfigError
from .config import (
    ADAM_BETAS,
    BATCH_SIZE,
    CHECKPOINT_DIR,
    CHECKPOINT_EVERY,
    DEFAULT_WINDOW_LEFT,
    DEFAULT_WINDOW_RIGHT,
    LEARNING_RATE,
    LOG_DIR,
    OUTPUT_DELAY,
    TRAIN_STEPS,
    TRAINING_LEFT_CONTEXT,
)
from .data import Dataset, Utterance, check_vocab, generate_dataset, read_dataset
from .nn import AdamOptimizer
from .rnnt import (
    AlignmentPath,
    AlignMask,
    constrained_mask,
    mask_admits_path,
    viterbi_alignment,
    word_reference,
)
from .transducer import ModelSpec, TransducerModel
from .utils import append_jsonl, load_json_data, log_path, save_json_data

_TERM = re.compile(r"^\[\s*(full|\d+)\s*\]\s*(?:[x×*]\s*(\d+))?$", re.IGNORECASE)


class ConfigParseError(ValueError):
    """Malformed context-config text or run spec."""


# ===== Configuration notation =====

def parse_context_config(text: str, depth: Optional[int] = None) -> List[int]:
    """Per-layer right contexts from ``[k] x m + ...`` notation.

    Args:
        text: Config string; ``x``, ``×`` and ``*`` all mean repetition,
            ``[full]`` is an unbounded right context
        depth: Expected number of layers, checked when given

    Returns:
        One right context per layer
    """
    if not text or not text.strip():
        raise ConfigParseError("empty context config")
    rights: List[int] = []
    for term in text.split('+'):
        match = _TERM.match(term.strip())
        if not match:
            raise ConfigParseError(f"malformed term {term.strip()!r} in {text!r}")
        value = FULL_CONTEXT if match.group(1).lower() == 'full' else int(match.group(1))
        count = int(match.group(2)) if match.group(2) else 1
        if count < 1:
            raise ConfigParseError(f"repeat count must be >= 1 in {term.strip()!r}")
        rights.extend([value] * count)
    if depth is not None and len(rights) != depth:
        raise ConfigParseError(f"{text!r} describes {len(rights)} layers, model has {depth}")
    return rights


def context_from_text(spec: ModelSpec, text: str, left: Optional[int] = None,
                      output_delay: int = 0) -> ContextConfig:
    return spec.context(parse_context_config(text, spec.depth), left=left, output_delay=output_delay)


def format_context_config(rights: Sequence[int]) -> str:
    return ContextConfig.from_rights(rights).notation()


def cumulative_lookahead(cfg: ContextConfig) -> float:
    """Total right context in milliseconds (inf for full context).

    Output delay is not included; it is reported separately.
    """
    if cfg.has_full_context:
        return math.inf
    return cfg.lookahead_frames() * cfg.frame_ms


class ConfigMenu(BaseModel):
    """Configurations a model is trained (and may be decoded) with."""
    entries: List[ContextConfig]

    @model_validator(mode='after')
    def _check(self):
        if not self.entries:
            raise ValueError("config menu must not be empty")
        depths = {cfg.depth for cfg in self.entries}
        if len(depths) != 1:
            raise ValueError(f"config menu mixes depths {sorted(depths)}")
        return self

    @classmethod
    def from_strings(cls, texts: Sequence[str], spec: ModelSpec, left: Optional[int] = None,
                     output_delay: int = 0) -> "ConfigMenu":
        return cls(entries=[context_from_text(spec, text, left, output_delay) for text in texts])

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> List[str]:
        return [cfg.notation() for cfg in self.entries]

    def contains(self, cfg: ContextConfig) -> bool:
        return any(entry.per_layer_right == cfg.per_layer_right for entry in self.entries)

    def largest_lookahead(self) -> ContextConfig:
        return max(self.entries, key=cumulative_lookahead)

    def smallest_lookahead(self) -> ContextConfig:
        return min(self.entries, key=cumulative_lookahead)


def sample_config(menu: ConfigMenu, rng: np.random.Generator) -> ContextConfig:
    if not menu.entries:
        raise ValueError("cannot sample from an empty config menu")
    return menu.entries[int(rng.integers(len(menu.entries)))]


def sample_per_layer(menu: ConfigMenu, rng: np.random.Generator) -> ContextConfig:
    """Independent right context per layer drawn from the menu's entries.

    Experimental only; this mode trains unstably and is off by default.
    """
    base = menu.entries[0]
    rights = tuple(
        menu.entries[int(rng.integers(len(menu.entries)))].per_layer_right[layer]
        for layer in range(base.depth)
    )
    return base.model_copy(update={'per_layer_right': rights})


# ===== Run spec =====

class TrainRun(BaseModel):
    """Training run spec, usually loaded from a JSON file."""
    name: str = "run"
    model: ModelSpec = ModelSpec()
    menu: List[str] = ["[full] x 6"]
    dataset: Optional[str] = None
    dataset_size: int = 50
    data_seed: int = 7
    loss_mode: Literal['plain', 'constrained'] = 'plain'
    alignment_source: Literal['model', 'dataset'] = 'model'
    reference_checkpoint: Optional[str] = None
    window_left: Optional[int] = DEFAULT_WINDOW_LEFT
    window_right: Optional[int] = DEFAULT_WINDOW_RIGHT
    word_boundaries: bool = False
    steps: int = TRAIN_STEPS
    batch_size: int = BATCH_SIZE
    seed: int = 0
    checkpoint_every: int = CHECKPOINT_EVERY
    lr: float = LEARNING_RATE
    clip_norm: Optional[float] = 5.0
    left_context: Optional[int] = TRAINING_LEFT_CONTEXT
    output_delay: int = OUTPUT_DELAY
    per_layer_sampling: bool = False
    out_dir: str = CHECKPOINT_DIR
    log_dir: str = LOG_DIR

    @model_validator(mode='after')
    def _check(self):
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and checkpoint_every >= 1 required")
        if (self.loss_mode == 'constrained' and self.alignment_source == 'model'
                and not self.reference_checkpoint):
            raise ValueError("constrained training from a reference model needs reference_checkpoint")
        return self

    @classmethod
    def load(cls, path: str) -> "TrainRun":
        data = load_json_data(path)
        if data is None:
            raise ConfigParseError(f"Could not read run spec {path}")
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigParseError(f"Invalid run spec {path}: {e}") from e

    def model_spec(self) -> ModelSpec:
        if self.model.default_configs:
            return self.model
        return self.model.model_copy(update={'default_configs': list(self.menu)})

    def build_menu(self, spec: ModelSpec) -> ConfigMenu:
        try:
            return ConfigMenu.from_strings(self.menu, spec, left=self.left_context,
                                           output_delay=self.output_delay)
        except (ValidationError, UnsupportedConfigError) as e:
            raise ConfigParseError(f"Invalid menu {self.menu}: {e}") from e

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, f"{self.name}.json")


# ===== Reference alignments =====

class ReferenceAligner:
    """Viterbi emission frames of a frozen full-context model, cached per utterance id."""

    def __init__(self, model: TransducerModel, cache_dir: Optional[str] = None):
        self.model = model.snapshot()
        self.cfg = self.model.context([FULL_CONTEXT] * self.model.spec.depth)
        self.cache_dir = cache_dir
        self.hits = 0
        self.misses = 0

    def _cache_file(self, utt_id: str) -> Optional[str]:
        if not self.cache_dir:
            return None
        return os.path.join(self.cache_dir, f"{utt_id}.json")

    def reference(self, utt: Utterance) -> AlignmentPath:
        path = self._cache_file(utt.id)
        if path and os.path.exists(path):
            cached = load_json_data(path)
            if cached and len(cached.get("frames", [])) == len(utt.labels):
                self.hits += 1
                return AlignmentPath(tuple(cached["frames"]), cached.get("log_prob", 0.0))
        self.misses += 1
        lattice = self.model.logits_grid(utt.features, utt.labels, self.cfg)
        alignment = viterbi_alignment(lattice, utt.labels)
        if path:
            save_json_data({"id": utt.id, "frames": list(alignment.emission_frames),
                            "log_prob": alignment.log_prob}, path)
        return alignment


class DatasetAligner:
    """Ground-truth token onsets stored with the synthetic data."""

    def reference(self, utt: Utterance) -> AlignmentPath:
        return AlignmentPath(tuple(utt.ref_times))


# ===== Training =====

class Trainer:
    """Owns the model, its optimizer and the alignment constraints."""

    def __init__(self, model: TransducerModel, lr: float = LEARNING_RATE, betas=ADAM_BETAS,
                 clip_norm: Optional[float] = None, aligner=None,
                 window_left: Optional[int] = DEFAULT_WINDOW_LEFT,
                 window_right: Optional[int] = DEFAULT_WINDOW_RIGHT,
                 word_boundaries: bool = False):
        self.model = model
        self.optimizer = AdamOptimizer(model.params, lr=lr, betas=betas, clip_norm=clip_norm)
        self.aligner = aligner
        self.window_left = window_left
        self.window_right = window_right
        self.word_boundaries = word_boundaries
        self.last_skipped = 0
        self.skipped_total = 0

    def alignment_mask(self, utt: Utterance) -> AlignMask:
        if self.aligner is None:
            raise ValueError("constrained training needs a reference aligner")
        ref = self.aligner.reference(utt)
        if self.word_boundaries:
            ref = word_reference(ref, utt.labels, self.model.vocab.space_id)
        return constrained_mask(ref, self.window_left, self.window_right,
                                utt.num_frames, len(utt.labels))

    def train_step(self, batch: Sequence[Utterance], cfg: ContextConfig,
                   mode: str = 'plain') -> float:
        """One optimizer step on the batch under ``cfg``; returns the mean loss.

        In constrained mode utterances whose mask admits no path are skipped
        and counted in ``last_skipped``.
        """
        if mode not in ('plain', 'constrained'):
            raise ValueError(f"unknown loss mode {mode!r}")
        usable = []
        for utt in batch:
            mask = None
            if mode == 'constrained':
                mask = self.alignment_mask(utt)
                if not mask_admits_path(mask):
                    logger.warning(f"Skipping {utt.id}: alignment window admits no path")
                    continue
            usable.append((utt, mask))

        self.last_skipped = len(batch) - len(usable)
        self.skipped_total += self.last_skipped
        if not usable:
            logger.warning("Every utterance in the batch was skipped; no update")
            return float('nan')

        self.model.params.zero_grad()
        scale = 1.0 / len(usable)
        total = 0.0
        for utt, mask in usable:
            total += self.model.loss_and_backward(utt.features, utt.labels, cfg,
                                                  align_mask=mask, scale=scale)
        loss = total / len(usable)
        if not math.isfinite(loss):
            raise ArithmeticError(f"non-finite training loss {loss}")
        self.optimizer.step()
        return loss


class TrainResult(BaseModel):
    checkpoint: str
    steps: int
    first_loss: Optional[float] = None
    final_loss: Optional[float] = None
    losses: List[float] = []
    skipped: int = 0
    log_file: Optional[str] = None
    seconds: float = 0.0


def load_training_data(run: TrainRun) -> Dataset:
    if run.dataset:
        return read_dataset(run.dataset)
    return generate_dataset(run.dataset_size, run.data_seed, feature_dim=run.model.feature_dim)


def build_aligner(run: TrainRun):
    if run.loss_mode != 'constrained':
        return None
    if run.alignment_source == 'dataset':
        return DatasetAligner()
    reference = TransducerModel.load(run.reference_checkpoint)
    cache_dir = os.path.join(run.out_dir, "alignments",
                             os.path.splitext(os.path.basename(run.reference_checkpoint))[0])
    logger.info(f"Reference alignments from {run.reference_checkpoint} (cache {cache_dir})")
    return ReferenceAligner(reference, cache_dir)


def train(run: TrainRun, dataset: Optional[Dataset] = None) -> TrainResult:
    """Run the training loop, logging one record per step and checkpointing.

    The run seed drives batch selection and config sampling, so two runs
    with the same spec produce the same losses.
    """
    start = time.perf_counter()
    spec = run.model_spec()
    model = TransducerModel(spec, seed=run.seed)
    menu = run.build_menu(spec)
    dataset = dataset if dataset is not None else load_training_data(run)
    check_vocab(dataset.vocab, model.vocab)
    if not len(dataset):
        raise ValueError("training dataset is empty")

    trainer = Trainer(model, lr=run.lr, clip_norm=run.clip_norm, aligner=build_aligner(run),
                      window_left=run.window_left, window_right=run.window_right,
                      word_boundaries=run.word_boundaries)
    rng = np.random.default_rng(run.seed)
    log_file = log_path(f"train_{run.name}", run.log_dir)
    logger.info(
        f"Training {run.name}: {run.steps} steps, menu {menu.names()}, mode {run.loss_mode}, "
        f"{len(dataset)} utterances, {model.params.num_parameters()} parameters"
    )

    losses: List[float] = []
    batch_size = min(run.batch_size, len(dataset))
    for step in range(1, run.steps + 1):
        picks = rng.choice(len(dataset), size=batch_size, replace=False)
        batch = [dataset[int(i)] for i in picks]
        cfg = sample_per_layer(menu, rng) if run.per_layer_sampling else sample_config(menu, rng)
        loss = trainer.train_step(batch, cfg, run.loss_mode)
        losses.append(loss)
        append_jsonl({"step": step, "config": cfg.notation(), "loss": loss,
                      "skipped": trainer.last_skipped, "version": model.params.version}, log_file)
        if step == 1 or step % 50 == 0:
            logger.info(f"step {step}: loss {loss:.4f} with {cfg.notation()}")
        if step % run.checkpoint_every == 0 and step < run.steps:
            model.save(os.path.join(run.out_dir, f"{run.name}-step{step}.json"),
                       {"menu": run.menu, "loss_mode": run.loss_mode, "step": step})

    checkpoint = model.save(run.checkpoint_path,
                            {"menu": run.menu, "loss_mode": run.loss_mode, "step": run.steps})
    finite = [loss for loss in losses if math.isfinite(loss)]
    result = TrainResult(
        checkpoint=checkpoint,
        steps=run.steps,
        first_loss=finite[0] if finite else None,
        final_loss=finite[-1] if finite else None,
        losses=losses,
        skipped=trainer.skipped_total,
        log_file=log_file,
        seconds=time.perf_counter() - start,
    )
    logger.info(f"Finished {run.name} in {result.seconds:.1f}s, final loss {result.final_loss}")
    return result
