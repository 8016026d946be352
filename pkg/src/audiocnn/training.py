"""Weak-label multi-label training: sampling, steps, schedule, validation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from audiocnn import checkpoint
from audiocnn.architectures import ArchitectureSpec
from audiocnn.dataset import (
    ClipFeatures,
    LabelVocabulary,
    PatchStore,
    label_matrix,
    project,
    sample_minibatch,
)
from audiocnn.engine import ops
from audiocnn.engine.optim import AdamState, adam_step
from audiocnn.engine.tensor import backward
from audiocnn.metrics import MetricsReport, aggregate_clip, evaluate, report_from_scores
from audiocnn.network import Network


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 3e-5
    lr_decay_factor: float = 10.0
    lr_decay_step: int = 0  # 0 disables decay
    max_steps: int = 1000
    seed: int = 0
    vocabulary_size: int = 0  # 0 keeps the whole vocabulary
    validation_interval: int = 500
    validation_clips: int = 512

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "validation_interval", "validation_clips"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.lr_decay_factor > 0:
            raise ConfigError("lr_decay_factor must be positive")
        if self.lr_decay_step < 0 or self.lr_decay_step > self.max_steps:
            raise ConfigError("lr_decay_step must lie in [0, max_steps] (0 disables)")
        if self.vocabulary_size < 0 or self.seed < 0:
            raise ConfigError("vocabulary_size and seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, config: TrainConfig) -> float:
    if config.lr_decay_step and step >= config.lr_decay_step:
        return config.learning_rate / config.lr_decay_factor
    return config.learning_rate


@dataclass
class TrainState:
    network: Network
    optimizer: AdamState
    config: TrainConfig
    rng: np.random.Generator
    step: int = 0
    running_loss: float = float("nan")
    history: list[dict] = field(default_factory=list)


def sampler_rng(seed: int) -> np.random.Generator:
    # separate stream from the one that initializes the weights
    return np.random.default_rng([seed, 1])


def init_state(spec: ArchitectureSpec, config: TrainConfig) -> TrainState:
    net = Network(spec, seed=config.seed)
    return TrainState(net, AdamState(config.learning_rate), config, sampler_rng(config.seed))


def train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray, np.ndarray]) -> float:
    """One forward, backward and Adam update on ``(patch_ids, inputs, targets)``."""
    ids, x, y = batch
    net = state.network
    scores = net.forward(x, training=True)
    loss = ops.multilabel_bce(scores, y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {state.step}; batch patch ids {ids.tolist()}")
    params = net.trainable_parameters()
    backward(loss, params)
    adam_step(params, state.optimizer, lr_schedule(state.step, state.config))
    state.step += 1
    state.running_loss = value if math.isnan(state.running_loss) else 0.99 * state.running_loss + 0.01 * value
    return value


def one_best_accuracy(clip_scores: np.ndarray, targets: np.ndarray, vocab: LabelVocabulary) -> float:
    """Share of clips whose top-scoring class is one of their labels.

    Ties go to the label with the lowest id.
    """
    ids = np.asarray(vocab.ids)
    hits = 0
    for s, t in zip(clip_scores, targets):
        best = np.flatnonzero(s == s.max())
        pick = best[np.argmin(ids[best])]
        hits += bool(t[pick])
    return hits / len(clip_scores)


def validate(model, clips: Sequence[ClipFeatures], vocab: LabelVocabulary) -> dict:
    if not clips:
        raise ValueError("empty validation set")
    predict = model.predict if hasattr(model, "predict") else model
    scores = np.stack([aggregate_clip(predict(c.patches)) for c in clips])
    targets = label_matrix(clips, vocab)
    report = report_from_scores(scores, targets, vocab, [c.clip_id for c in clips])
    return {"one_best_accuracy": one_best_accuracy(scores, targets, vocab), "mAP": report.balanced_map}


def validation_subset(clips: Sequence[ClipFeatures], config: TrainConfig) -> list[ClipFeatures]:
    if len(clips) <= config.validation_clips:
        return list(clips)
    rng = np.random.default_rng([config.seed, 2])
    keep = np.sort(rng.choice(len(clips), size=config.validation_clips, replace=False))
    return [clips[i] for i in keep]


def train(
    state: TrainState,
    store: PatchStore,
    validation: Sequence[ClipFeatures] = (),
    until: int | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run steps until ``until`` (default ``config.max_steps``).

    Every step appends a history row; validation columns are filled every
    ``validation_interval`` steps and at the final step.
    """
    cfg = state.config
    until = cfg.max_steps if until is None else until
    while state.step < until:
        lr = lr_schedule(state.step, cfg)
        loss = train_step(state, sample_minibatch(store, cfg.batch_size, state.rng))
        row = {"step": state.step, "loss": loss, "lr": lr, "val_acc": None, "val_map": None}
        if validation and (state.step % cfg.validation_interval == 0 or state.step == cfg.max_steps):
            v = validate(state.network, validation, store.vocab)
            row["val_acc"], row["val_map"] = v["one_best_accuracy"], v["mAP"]
            if on_checkpoint is not None:
                on_checkpoint(state)
        state.history.append(row)
    return state


def write_history(history: Sequence[dict], path: str | Path) -> None:
    fmt = lambda v: "" if v is None else (str(v) if isinstance(v, int) else f"{v:.9g}")  # noqa: E731
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "val_acc", "val_map"])
        for r in history:
            w.writerow([fmt(r[k]) for k in ("step", "loss", "lr", "val_acc", "val_map")])


# -- checkpoints -------------------------------------------------------


def save_state(state: TrainState, path: str | Path) -> None:
    extra = {
        "step": state.step,
        "running_loss": state.running_loss.hex(),
        "rng": state.rng.bit_generator.state,
        "config": state.config.to_dict(),
    }
    checkpoint.save_checkpoint(path, state.network, state.optimizer, extra)


def load_state(path: str | Path, spec: ArchitectureSpec, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` that continues exactly where it stopped.

    The step history before the checkpoint is not restored.
    """
    probe = Network(spec, seed=0)
    opt = AdamState(1.0)
    extra = checkpoint.load_checkpoint(path, probe, opt)
    stored = TrainConfig.from_dict(extra["config"])
    config = config or stored
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng"]
    opt.learning_rate = config.learning_rate
    return TrainState(probe, opt, config, rng, extra["step"], float.fromhex(extra["running_loss"]))


# -- training-set-size sweep -----------------------------------------


def run_training_size_sweep(
    spec: ArchitectureSpec,
    config: TrainConfig,
    train_clips: Sequence[ClipFeatures],
    eval_set,
    vocab: LabelVocabulary,
    sizes: Sequence[int],
) -> dict[int, MetricsReport]:
    """Train once per size on a seeded clip subset and evaluate on ``eval_set``.

    Subsets are nested prefixes of one seeded permutation; every run starts
    from the same initialization (``config.seed``).
    """
    clips = project(train_clips, vocab, drop_empty=True)
    if max(sizes) > len(clips):
        raise ConfigError(f"size {max(sizes)} exceeds {len(clips)} training clips")
    order = np.random.default_rng([config.seed, 3]).permutation(len(clips))
    out = {}
    for size in sizes:
        subset = [clips[i] for i in order[:size]]
        state = init_state(spec, config)
        train(state, PatchStore(subset, vocab))
        out[size] = evaluate(state.network, eval_set, vocab)
    return out
