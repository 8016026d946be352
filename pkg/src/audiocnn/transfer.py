"""Embedding extraction and the embedding-vs-log-mel transfer comparison."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from audiocnn.architectures import ArchitectureSpec, LayerSpec, dense
from audiocnn.dataset import ClipFeatures, LabelVocabulary, PatchStore, label_matrix, project, split_of
from audiocnn.frontend import NUM_BANDS
from audiocnn.metrics import MetricsReport, build_balanced_eval, evaluate
from audiocnn.network import Network
from audiocnn.training import TrainConfig, init_state, train, validate

EMB_MAGIC = b"WEM1"
EMB_VERSION = 1
SUBPATCH_FRAMES = 20
HIDDEN_UNITS = 512
# fixed so both arms of the comparison see the same optimizer budget; the
# parameters kept are the ones with the best held-out mAP at a multiple of
# validation_interval
CLASSIFIER_CONFIG = TrainConfig(batch_size=64, learning_rate=1e-3, max_steps=1500, seed=0, validation_interval=100)
HOLDOUT_FRACTION = 0.2


class EmbeddingFileError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingRecord:
    clip_id: str
    patch_index: int
    vector: np.ndarray


def extract_embeddings(model: Network, clips: Sequence[ClipFeatures], batch_size: int = 256) -> list[EmbeddingRecord]:
    """Inference-mode activations feeding the output head, one per patch."""
    out = []
    for c in clips:
        vecs = model.embed(c.patches, batch_size).astype(np.float32)
        if not np.all(np.isfinite(vecs)):
            raise FloatingPointError(f"non-finite embedding for {c.clip_id}")
        out.extend(EmbeddingRecord(c.clip_id, i, v) for i, v in enumerate(vecs))
    return out


def write_embeddings(target: str | Path | BinaryIO, records: Sequence[EmbeddingRecord]) -> None:
    """``WEM1 | u32 version | u32 dim`` then per record
    ``u16 id length | id | u32 patch index | dim f32``."""
    dims = {r.vector.shape for r in records}
    if len(dims) > 1:
        raise EmbeddingFileError(f"mixed embedding dimensions {sorted(dims)}")
    dim = records[0].vector.shape[0] if records else 0
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    buf.write(struct.pack("<II", EMB_VERSION, dim))
    for r in records:
        raw = r.clip_id.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", r.patch_index))
        buf.write(np.ascontiguousarray(r.vector, dtype="<f4").tobytes())
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(buf.getvalue())
    else:
        target.write(buf.getvalue())


def read_embeddings(source: str | Path | BinaryIO) -> list[EmbeddingRecord]:
    data = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    if data[:4] != EMB_MAGIC:
        raise EmbeddingFileError("bad magic")
    version, dim = struct.unpack_from("<II", data, 4)
    if version != EMB_VERSION:
        raise EmbeddingFileError(f"unsupported version {version}")
    pos, out = 12, []
    while pos < len(data):
        try:
            (n,) = struct.unpack_from("<H", data, pos)
            clip_id = data[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (idx,) = struct.unpack_from("<I", data, pos)
            pos += 4
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        except (struct.error, ValueError) as e:
            raise EmbeddingFileError("truncated embedding file") from e
        pos += 4 * dim
        out.append(EmbeddingRecord(clip_id, idx, vec))
    return out


def records_to_clips(records: Sequence[EmbeddingRecord], clips: Sequence[ClipFeatures]) -> list[ClipFeatures]:
    """Regroup per-patch records into clips carrying the clips' labels."""
    by_clip: dict[str, list[EmbeddingRecord]] = {}
    for r in records:
        by_clip.setdefault(r.clip_id, []).append(r)
    out = []
    for c in clips:
        recs = sorted(by_clip.get(c.clip_id, []), key=lambda r: r.patch_index)
        if not recs:
            raise EmbeddingFileError(f"no embeddings for clip {c.clip_id}")
        out.append(ClipFeatures(c.clip_id, c.labels, np.stack([r.vector for r in recs])))
    return out


def logmel_subpatches(patches: np.ndarray, frames: int = SUBPATCH_FRAMES) -> np.ndarray:
    """Cut each 96-frame patch into non-overlapping ``frames``-long slices,
    flattened to ``frames * 64`` values; trailing frames are dropped."""
    p = np.asarray(patches)
    k = p.shape[1] // frames
    return p[:, : k * frames].reshape(len(p) * k, frames * NUM_BANDS)


# -- the comparison ----------------------------------------------------


@dataclass
class TransferTask:
    """Labelled clips of a target vocabulary disjoint from the source task."""

    train: list[ClipFeatures]
    test: list[ClipFeatures]
    vocab: LabelVocabulary
    per_class: int = 33
    eval_seed: int = 0

    def check_disjoint(self, source_vocab: LabelVocabulary, source_clip_ids: set[str] = frozenset()) -> None:
        shared = set(self.vocab.names) & set(source_vocab.names)
        if shared:
            raise ValueError(f"transfer vocabulary overlaps the source: {sorted(shared)}")
        leaked = {c.clip_id for c in self.test} & set(source_clip_ids)
        if leaked:
            raise ValueError(f"{len(leaked)} test clips were used for source training")


def classifier_spec(input_dim: int, num_labels: int, hidden: int = HIDDEN_UNITS) -> ArchitectureSpec:
    layers = (
        dense("hidden", hidden),
        LayerSpec("relu", "hidden_relu"),
        dense("output", num_labels),
        LayerSpec("sigmoid", "output_sigmoid"),
    )
    return ArchitectureSpec(f"mlp{hidden}", layers, num_labels, input_shape=(input_dim,))


class _Standardized:
    """Per-dimension standardization fitted on training inputs, then a model."""

    def __init__(self, mean, std, network: Network, transform=None):
        self.mean, self.std, self.network, self.transform = mean, std, network, transform

    def predict(self, patches: np.ndarray) -> np.ndarray:
        x = self.transform(patches) if self.transform else patches
        return self.network.predict((x - self.mean) / self.std)


def holdout_split(clips: Sequence[ClipFeatures], seed: int, fraction: float = HOLDOUT_FRACTION):
    """Seeded (fit, held-out) split of the transfer training clips."""
    # salted key: the target train/test partition hashes the same ids, and
    # reusing its stream would leave the held-out share empty
    parts = ([], [])
    for c in clips:
        parts[split_of(f"holdout:{c.clip_id}", seed, (1 - fraction, fraction))].append(c)
    return parts


def _fit_classifier(train_clips, test_clips, task: TransferTask, config: TrainConfig, transform=None):
    if transform is not None:
        train_clips = [ClipFeatures(c.clip_id, c.labels, transform(c.patches)) for c in train_clips]
    dims = {c.patches.shape[1:] for c in train_clips}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError(f"dimension mismatch across training inputs: {sorted(dims)}")
    fit, held = holdout_split(train_clips, config.seed)
    stacked = np.concatenate([c.patches for c in fit]).astype(np.float64)
    mean = stacked.mean(axis=0).astype(np.float32)
    std = (stacked.std(axis=0) + 1e-6).astype(np.float32)
    scale = lambda cs: [ClipFeatures(c.clip_id, c.labels, (c.patches - mean) / std) for c in cs]  # noqa: E731
    spec = classifier_spec(stacked.shape[1], len(task.vocab))
    state = init_state(spec, config)
    store = PatchStore(project(scale(fit), task.vocab, drop_empty=True), task.vocab)
    held = scale(held)

    # keep the parameters with the best held-out mAP (earliest on ties); a
    # held-out share with no class having both positives and negatives
    # cannot rank anything, so training then just runs to max_steps
    y = label_matrix(held, task.vocab)
    selectable = len(held) > 0 and bool(np.any((y.sum(axis=0) > 0) & (y.sum(axis=0) < len(held))))
    best_map, best_step, best_params = float("nan"), config.max_steps, None
    interval = config.validation_interval if selectable else config.max_steps
    for until in range(interval, config.max_steps + interval, interval):
        train(state, store, until=min(until, config.max_steps))
        if selectable:
            score = validate(state.network, held, task.vocab)["mAP"]
            if best_params is None or score > best_map:
                best_map, best_step = score, state.step
                best_params = [p.data.copy() for p in state.network.parameters()]
    if best_params is not None:
        for p, kept in zip(state.network.parameters(), best_params):
            p.data[...] = kept

    model = _Standardized(mean, std, state.network, transform)
    model.selected_step, model.held_out_map = best_step, best_map
    eval_set = build_balanced_eval(test_clips, task.vocab, task.per_class, task.eval_seed)
    return model, evaluate(model, eval_set, task.vocab)


def train_embedding_classifier(
    source: Network, task: TransferTask, config: TrainConfig = CLASSIFIER_CONFIG
) -> tuple[_Standardized, MetricsReport]:
    """Classifier on per-patch embeddings; clip scores by patch averaging."""
    train_emb = records_to_clips(extract_embeddings(source, task.train), task.train)
    test_emb = records_to_clips(extract_embeddings(source, task.test), task.test)
    return _fit_classifier(train_emb, test_emb, task, config)


def train_logmel_baseline(
    task: TransferTask, config: TrainConfig = CLASSIFIER_CONFIG
) -> tuple[_Standardized, MetricsReport]:
    """Same classifier on 20-frame x 64-band log-mel slices (1280 inputs)."""
    return _fit_classifier(task.train, task.test, task, config, transform=logmel_subpatches)


def with_steps(config: TrainConfig, steps: int) -> TrainConfig:
    return replace(config, max_steps=steps)
