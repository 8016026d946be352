"""Experiment configs, end-to-end runs, sweeps and the consolidated report."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from audiocnn import architectures as arch
from audiocnn.dataset import (
    ClipFeatures,
    LabelVocabulary,
    PatchStore,
    load_clips,
    project,
    restrict_vocabulary,
    split_of,
)
from audiocnn.metrics import (
    EvalSet,
    build_balanced_eval,
    evaluate,
    scatter_prior_dprime,
    top_peak_timeline,
    write_scatter_csv,
)
from audiocnn.synth import LABEL_IDS, SynthConfig, synth_features
from audiocnn.training import ConfigError, TrainConfig, init_state, save_state, train, validation_subset, write_history

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class TransferSetup:
    """Source task on one class subset, transfer task on a disjoint one."""

    source_classes: tuple[str, ...] = ("tone-low", "tone-mid", "tone-high", "white-noise", "filtered-noise")
    target_classes: tuple[str, ...] = ("chirp-up", "chirp-down", "am-tone")
    source_clips: int = 1000
    source_steps: int = 1200
    target_clips: int = 240
    target_duration_s: float = 10.0
    target_train_fraction: float = 0.5
    target_seed_offset: int = 1
    classifier_steps: int = 1500

    def __post_init__(self):
        object.__setattr__(self, "source_classes", tuple(self.source_classes))
        object.__setattr__(self, "target_classes", tuple(self.target_classes))
        if set(self.source_classes) & set(self.target_classes):
            raise ConfigError("transfer source and target classes must be disjoint")
        if not 0 < self.target_train_fraction < 1:
            raise ConfigError("target_train_fraction must lie in (0, 1)")
        if min(self.source_clips, self.source_steps, self.target_clips, self.classifier_steps) < 1:
            raise ConfigError("transfer counts must be positive")


class StageError(RuntimeError):
    """A failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    architecture: str = "resnet"
    width_factor: float = 0.125
    bottleneck: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    manifest: str = ""  # when set, clips come from this manifest instead of the synthesizer
    split_seed: int = 0
    split_fractions: tuple[float, float, float] = (0.75, 0.05, 0.2)
    eval_per_class: int = 33
    eval_seed: int = 0
    timeline_k: int = 16
    training_sizes: tuple[int, ...] = ()
    vocabulary_sizes: tuple[int, ...] = ()
    bottleneck_axis: bool = False
    transfer: TransferSetup = field(default_factory=TransferSetup)

    def __post_init__(self):
        if self.architecture not in arch.BUILDERS:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if not 0 < self.width_factor <= 1:
            raise ConfigError("width_factor must lie in (0, 1]")
        fr = tuple(float(f) for f in self.split_fractions)
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1) > 1e-9 or fr[0] == 0 or fr[2] == 0:
            raise ConfigError("split_fractions must be three non-negative shares summing to 1")
        if self.eval_per_class < 1 or self.timeline_k < 1:
            raise ConfigError("eval_per_class and timeline_k must be positive")
        object.__setattr__(self, "split_fractions", fr)
        object.__setattr__(self, "training_sizes", tuple(int(s) for s in self.training_sizes))
        object.__setattr__(self, "vocabulary_sizes", tuple(int(s) for s in self.vocabulary_sizes))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
        try:
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
            if "synth" in d:
                d["synth"] = SynthConfig.from_dict(d["synth"])
            if "transfer" in d:
                d["transfer"] = TransferSetup(**d["transfer"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# -- data --------------------------------------------------------------


@dataclass
class Corpus:
    clips: list[ClipFeatures]
    events: dict  # clip_id -> list of synth events (empty for manifest corpora)

    def split(self, seed: int, fractions: Sequence[float]) -> dict[str, list[ClipFeatures]]:
        out = {name: [] for name in SPLITS}
        for c in self.clips:
            out[SPLITS[min(split_of(c.clip_id, seed, fractions), 2)]].append(c)
        return out


_CORPUS_CACHE: dict[str, Corpus] = {}


def load_corpus(config: ExperimentConfig) -> Corpus:
    """Synthesize (memoized per synth config) or read the manifest."""
    if config.manifest:
        return Corpus(load_clips(config.manifest), {})
    key = json.dumps(config.synth.to_dict(), sort_keys=True)
    if key not in _CORPUS_CACHE:
        feats, clips = synth_features(config.synth)
        _CORPUS_CACHE[key] = Corpus(feats, {c.clip_id: c.events for c in clips})
    return _CORPUS_CACHE[key]


def training_vocabulary(train_clips: Sequence[ClipFeatures], size: int = 0) -> LabelVocabulary:
    names = sorted({n for c in train_clips for n in c.labels})
    ids = {n: LABEL_IDS.get(n, len(LABEL_IDS) + i) for i, n in enumerate(names)}
    vocab = LabelVocabulary.from_label_sets([c.labels for c in train_clips], ids)
    return restrict_vocabulary(vocab, size) if size else vocab


def architecture_for(config: ExperimentConfig, num_labels: int, bottleneck: bool | None = None) -> arch.ArchitectureSpec:
    spec = arch.build(config.architecture, num_labels)
    if config.bottleneck if bottleneck is None else bottleneck:
        spec = arch.with_bottleneck(spec)
    return arch.shrink(spec, config.width_factor)


# -- single run --------------------------------------------------------


def _stage(name):
    def wrap(fn):
        def inner(*a, **k):
            try:
                return fn(*a, **k)
            except StageError:
                raise
            except Exception as e:  # noqa: BLE001 - re-raised with the stage tag
                raise StageError(name, e) from e

        return inner

    return wrap


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_experiment(config: ExperimentConfig, out_dir: str | Path, corpus: Corpus | None = None) -> dict:
    """Train, evaluate and write all artifacts into ``out_dir``.

    Artifacts: ``checkpoint.wck``, ``history.csv``, ``per_class.csv``,
    ``summary.json``, ``scatter.csv``, ``timeline.csv``, ``costs.csv`` and
    ``run_info.json`` (the only file with wall-clock numbers).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    corpus = corpus or _stage("data")(load_corpus)(config)

    @_stage("prepare")
    def prepare():
        splits = corpus.split(config.split_seed, config.split_fractions)
        vocab = training_vocabulary(splits["train"], config.train.vocabulary_size)
        train_clips = project(splits["train"], vocab, drop_empty=True)
        val = validation_subset(project(splits["validation"], vocab, drop_empty=False), config.train)
        test = project(splits["test"], vocab, drop_empty=False)
        eval_set = build_balanced_eval(test, vocab, config.eval_per_class, config.eval_seed)
        spec = architecture_for(config, len(vocab))
        return vocab, train_clips, val, eval_set, spec

    vocab, train_clips, val, eval_set, spec = prepare()

    @_stage("train")
    def fit():
        state = init_state(spec, config.train)
        train(state, PatchStore(train_clips, vocab), val)
        return state

    state = fit()
    train_seconds = time.time() - started

    @_stage("evaluate")
    def score():
        return evaluate(state.network, eval_set, vocab)

    report = score()

    @_stage("write")
    def write():
        digest = config.digest()
        costs = arch.count_costs(spec)
        save_state(state, out / "checkpoint.wck")
        write_history(state.history, out / "history.csv")
        report.write_csv(out / "per_class.csv")
        write_scatter_csv(scatter_prior_dprime(report), out / "scatter.csv")
        clip = _timeline_clip(eval_set, corpus)
        if clip is not None:
            top_peak_timeline(state.network.predict(clip.patches), config.timeline_k).write_csv(
                out / "timeline.csv", vocab.names
            )
        (out / "costs.csv").write_text(costs.to_csv())
        vocab.to_csv(out / "vocabulary.csv")
        _json(out / "config.json", config.to_dict())
        summary = {
            "config_digest": digest,
            "name": config.name,
            "architecture": spec.name,
            "weights": costs.weights,
            "multiplies": costs.multiplies,
            "steps": state.step,
            "final_running_loss": state.running_loss,
            "train_clips": len(train_clips),
            "timeline_clip": clip.clip_id if clip is not None else None,
            "metrics": report.summary(),
        }
        _json(out / "summary.json", summary)
        _json(
            out / "run_info.json",
            {"config_digest": digest, "train_seconds": train_seconds, "total_seconds": time.time() - started},
        )
        return summary

    summary = write()
    return {"summary": summary, "report": report, "state": state, "vocab": vocab, "eval_set": eval_set, "spec": spec}


def _timeline_clip(eval_set: EvalSet, corpus: Corpus) -> ClipFeatures | None:
    # the longest eval clip that carries at least one event
    candidates = [c for c in eval_set.clips if c.labels and c.num_patches]
    if not candidates:
        return None
    return max(candidates, key=lambda c: (c.num_patches, c.clip_id))


# -- sweeps ------------------------------------------------------------


def _subset_predictor(network, full: LabelVocabulary, target: LabelVocabulary):
    cols = [full.index()[n] for n in target.names]
    return lambda patches: network.predict(patches)[:, cols]


def run_sweeps(config: ExperimentConfig, out_dir: str | Path, corpus: Corpus | None = None) -> list[dict]:
    """Label-set-size (with optional bottleneck pairing) and training-size sweeps.

    Label sweep rows are all scored on the smallest vocabulary's eval set.
    Training-size rows share one eval set on the configured vocabulary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = corpus or _stage("data")(load_corpus)(config)
    splits = corpus.split(config.split_seed, config.split_fractions)
    full_vocab = training_vocabulary(splits["train"])
    rows = []

    if config.vocabulary_sizes:
        smallest = restrict_vocabulary(full_vocab, min(config.vocabulary_sizes))
        eval_set = build_balanced_eval(
            project(splits["test"], smallest, drop_empty=False), smallest, config.eval_per_class, config.eval_seed
        )
        for size in sorted(config.vocabulary_sizes, reverse=True):
            vocab = restrict_vocabulary(full_vocab, size)
            clips = project(splits["train"], vocab, drop_empty=True)
            for bneck in (False, True) if config.bottleneck_axis else (config.bottleneck,):
                spec = architecture_for(config, size, bneck)
                state = _stage("train")(lambda: train(init_state(spec, config.train), PatchStore(clips, vocab)))()
                report = evaluate(_subset_predictor(state.network, vocab, smallest), eval_set, smallest)
                rows.append(_row("vocabulary", size, bneck, spec, report, size))
    if config.training_sizes:
        vocab = training_vocabulary(splits["train"], config.train.vocabulary_size)
        train_clips = project(splits["train"], vocab, drop_empty=True)
        eval_set = build_balanced_eval(
            project(splits["test"], vocab, drop_empty=False), vocab, config.eval_per_class, config.eval_seed
        )
        order = np.random.default_rng([config.train.seed, 3]).permutation(len(train_clips))
        for size in config.training_sizes:
            if size > len(train_clips):
                raise ConfigError(f"training size {size} exceeds {len(train_clips)} training clips")
            subset = [train_clips[i] for i in order[:size]]
            spec = architecture_for(config, len(vocab))
            state = _stage("train")(lambda: train(init_state(spec, config.train), PatchStore(subset, vocab)))()
            rows.append(_row("training_size", size, config.bottleneck, spec, evaluate(state.network, eval_set, vocab), len(vocab)))

    write_rows(rows, out / "sweeps.csv")
    _json(out / "sweeps.json", {"config_digest": config.digest(), "rows": rows})
    return rows


def _row(axis, value, bneck, spec, report, vocab_size) -> dict:
    return {
        "axis": axis,
        "value": value,
        "bottleneck": bool(bneck),
        "train_vocab": vocab_size,
        "eval_vocab": report.vocab_size,
        "head_weights": arch.output_head_weights(spec),
        "balanced_auc": report.balanced_auc,
        "balanced_dprime": report.balanced_dprime,
        "balanced_map": report.balanced_map,
    }


SWEEP_COLUMNS = (
    "axis", "value", "bottleneck", "train_vocab", "eval_vocab", "head_weights",
    "balanced_auc", "balanced_dprime", "balanced_map",
)


def write_rows(rows: Sequence[dict], path: Path, columns: Sequence[str] = SWEEP_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([f"{r[c]:.9g}" if isinstance(r[c], float) else r[c] for c in columns])


# -- transfer ----------------------------------------------------------


def transfer_configs(config: ExperimentConfig) -> tuple[ExperimentConfig, SynthConfig]:
    t = config.transfer
    source = replace(
        config,
        name=f"{config.name}-source",
        synth=replace(config.synth, classes=t.source_classes, num_clips=t.source_clips, prefix="src"),
        train=replace(config.train, max_steps=t.source_steps, lr_decay_step=0),
        manifest="",
    )
    target = replace(
        config.synth,
        seed=config.synth.seed + t.target_seed_offset,
        classes=t.target_classes,
        num_clips=t.target_clips,
        duration_range=(t.target_duration_s, t.target_duration_s),
        prefix="aed",
    )
    return source, target


def build_transfer_task(config: ExperimentConfig, target: SynthConfig):
    from audiocnn.transfer import TransferTask

    feats, _ = synth_features(target)
    frac = config.transfer.target_train_fraction
    parts = {0: [], 1: []}
    for c in feats:
        parts[min(split_of(c.clip_id, config.split_seed, (frac, 1 - frac)), 1)].append(c)
    vocab = training_vocabulary(parts[0])
    return TransferTask(
        project(parts[0], vocab, drop_empty=True),
        project(parts[1], vocab, drop_empty=False),
        vocab,
        config.eval_per_class,
        config.eval_seed,
    )


def run_transfer(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Train a source network, then compare an embedding classifier with the
    log-mel baseline on the disjoint target task (same splits and seeds)."""
    from audiocnn.transfer import CLASSIFIER_CONFIG, train_embedding_classifier, train_logmel_baseline

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source_cfg, target_cfg = transfer_configs(config)
    source = run_experiment(source_cfg, out / "source")
    task = _stage("data")(build_transfer_task)(config, target_cfg)
    task.check_disjoint(source["vocab"])
    clf_cfg = replace(CLASSIFIER_CONFIG, seed=config.train.seed, max_steps=config.transfer.classifier_steps)
    _, emb_report = _stage("train")(train_embedding_classifier)(source["state"].network, task, clf_cfg)
    _, base_report = _stage("train")(train_logmel_baseline)(task, clf_cfg)
    emb_report.write_csv(out / "embedding_per_class.csv")
    base_report.write_csv(out / "logmel_per_class.csv")
    result = {
        "config_digest": config.digest(),
        "source_vocab": source["vocab"].names,
        "target_vocab": task.vocab.names,
        "target_train_clips": len(task.train),
        "target_test_clips": len(task.test),
        "embedding_dim": int(source["state"].network.embed(task.test[0].patches[:1]).shape[1]),
        "embedding": emb_report.summary(),
        "logmel": base_report.summary(),
    }
    _json(out / "transfer.json", result)
    return result


# -- report ------------------------------------------------------------

REPORT_COLUMNS = ("run", "architecture", "weights", "multiplies", "steps", "seconds", "auc", "dprime", "map")


def report(run_dirs: Sequence[str | Path]) -> tuple[str, list[dict], list[str]]:
    """Consolidate run directories into a text table.

    Returns ``(text, rows, absent)``; directories without a summary are
    listed in ``absent`` rather than raising.
    """
    rows, absent = [], []
    for d in run_dirs:
        d = Path(d)
        try:
            s = json.loads((d / "summary.json").read_text())
        except (OSError, json.JSONDecodeError):
            absent.append(str(d))
            continue
        try:
            seconds = json.loads((d / "run_info.json").read_text())["train_seconds"]
        except (OSError, json.JSONDecodeError, KeyError):
            seconds = None
        m = s["metrics"]
        rows.append(
            {
                "run": d.name,
                "architecture": s["architecture"],
                "weights": s["weights"],
                "multiplies": s["multiplies"],
                "steps": s["steps"],
                "seconds": seconds,
                "auc": m["balanced_auc"],
                "dprime": m["balanced_dprime"],
                "map": m["balanced_map"],
            }
        )
    fmt = {"auc": "{:.3f}", "dprime": "{:.3f}", "map": "{:.3f}", "seconds": "{:.0f}"}
    table = [list(REPORT_COLUMNS)]
    for r in rows:
        table.append(["-" if r[c] is None else fmt.get(c, "{}").format(r[c]) for c in REPORT_COLUMNS])
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    if absent:
        lines.append("absent: " + ", ".join(absent))
    return "\n".join(lines) + "\n", rows, absent


def with_overrides(config: ExperimentConfig, **train_fields) -> ExperimentConfig:
    return replace(config, train=replace(config.train, **train_fields))
