"""Clip collections, label vocabularies, manifests and the patch store."""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from audiocnn import frontend


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class VocabEntry:
    label_id: int
    name: str
    frequency: int


@dataclass(frozen=True)
class LabelVocabulary:
    """Labels ordered by descending training frequency, ties by id.

    Position in ``entries`` is the column index of that label in score and
    target matrices.
    """

    entries: tuple[VocabEntry, ...]

    def __post_init__(self):
        ids = [e.label_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate label ids in vocabulary")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError("duplicate label names in vocabulary")
        if any(e.frequency < 1 for e in self.entries):
            raise DataError("vocabulary frequencies must be >= 1")
        ordered = sorted(self.entries, key=lambda e: (-e.frequency, e.label_id))
        object.__setattr__(self, "entries", tuple(ordered))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def ids(self) -> list[int]:
        return [e.label_id for e in self.entries]

    def index(self) -> dict[str, int]:
        return {e.name: i for i, e in enumerate(self.entries)}

    def id_of(self) -> dict[str, int]:
        return {e.name: e.label_id for e in self.entries}

    @classmethod
    def from_label_sets(cls, label_sets: Iterable[Iterable[str]], label_ids: dict[str, int] | None = None):
        counts = Counter(name for labels in label_sets for name in set(labels))
        if label_ids is None:
            label_ids = {name: i for i, name in enumerate(sorted(counts))}
        missing = set(counts) - set(label_ids)
        if missing:
            raise DataError(f"labels without ids: {sorted(missing)}")
        return cls(tuple(VocabEntry(label_ids[n], n, c) for n, c in counts.items()))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "id", "frequency"])
            for e in self.entries:
                w.writerow([e.name, e.label_id, e.frequency])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LabelVocabulary":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(tuple(VocabEntry(int(r["id"]), r["name"], int(r["frequency"])) for r in rows))


def restrict_vocabulary(vocab: LabelVocabulary, top_k: int) -> LabelVocabulary:
    if not 1 <= top_k <= len(vocab):
        raise DataError(f"top_k={top_k} outside [1, {len(vocab)}]")
    return LabelVocabulary(vocab.entries[:top_k])


@dataclass
class ClipFeatures:
    clip_id: str
    labels: frozenset
    patches: np.ndarray  # [P, 96, 64] float32

    @property
    def num_patches(self) -> int:
        return len(self.patches)


def project(clips: Sequence[ClipFeatures], vocab: LabelVocabulary, drop_empty: bool) -> list[ClipFeatures]:
    """Restrict clip labels to ``vocab``.

    Training sets drop clips left without labels; evaluation sets keep them
    as negatives for every class.
    """
    keep = set(vocab.names)
    out = []
    for c in clips:
        labels = frozenset(c.labels) & keep
        if drop_empty and not labels:
            continue
        out.append(ClipFeatures(c.clip_id, labels, c.patches))
    return out


def targets_for(labels: Iterable[str], vocab: LabelVocabulary) -> np.ndarray:
    index = vocab.index()
    y = np.zeros(len(vocab), dtype=np.float32)
    for name in labels:
        if name in index:
            y[index[name]] = 1.0
    return y


def label_matrix(clips: Sequence[ClipFeatures], vocab: LabelVocabulary) -> np.ndarray:
    return np.stack([targets_for(c.labels, vocab) for c in clips]) if clips else np.zeros((0, len(vocab)))


class PatchStore:
    """All patches of a clip set in one array, with their parent clip index.

    Sampling draws uniformly from the global patch pool, so a clip's share
    of a batch is proportional to its patch count.
    """

    def __init__(self, clips: Sequence[ClipFeatures], vocab: LabelVocabulary):
        clips = [c for c in clips if c.num_patches]
        if not clips:
            raise DataError("empty store")
        self.clips = list(clips)
        self.vocab = vocab
        self.patches = np.concatenate([c.patches for c in clips]).astype(np.float32, copy=False)
        self.clip_of_patch = np.repeat(np.arange(len(clips)), [c.num_patches for c in clips])
        self.clip_targets = label_matrix(clips, vocab).astype(np.float32)

    def __len__(self) -> int:
        return len(self.patches)

    def batch(self, patch_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.patches[patch_ids], self.clip_targets[self.clip_of_patch[patch_ids]]


def sample_minibatch(store: PatchStore, batch_size: int, rng: np.random.Generator):
    """Draw ``batch_size`` patches uniformly with replacement from all patches.

    Returns ``(patch_ids, inputs [B,96,64], targets [B,C])``.
    """
    if len(store) == 0:
        raise DataError("empty store")
    ids = rng.integers(0, len(store), size=batch_size)
    x, y = store.batch(ids)
    return ids, x, y


# -- featurization and manifests ------------------------------------------


def featurize(clip: frontend.WaveformClip, offset: float = frontend.LOG_OFFSET) -> ClipFeatures:
    patches = frontend.extract_patches(clip, offset)
    values = (
        np.stack([p.values for p in patches])
        if patches
        else np.zeros((0, frontend.PATCH_FRAMES, frontend.NUM_BANDS), np.float32)
    )
    return ClipFeatures(clip.clip_id, frozenset(clip.labels), values)


@dataclass(frozen=True)
class ManifestRecord:
    clip_id: str
    path: str
    labels: tuple[str, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        d = {"clip_id": self.clip_id, "path": self.path, "labels": list(self.labels)}
        d.update(self.meta)
        return json.dumps(d, sort_keys=True)


def write_manifest(path: str | Path, records: Sequence[ManifestRecord]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_manifest(path: str | Path, vocab: LabelVocabulary | None = None) -> list[ManifestRecord]:
    records = []
    seen = set()
    known = set(vocab.names) if vocab is not None else None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = ManifestRecord(
                d.pop("clip_id"), d.pop("path"), tuple(d.pop("labels")), meta=d
            )
        except (json.JSONDecodeError, KeyError) as e:
            raise DataError(f"{path}:{lineno}: bad manifest record ({e})") from e
        if rec.clip_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate clip id {rec.clip_id!r}")
        if known is not None and not set(rec.labels) <= known:
            raise DataError(f"{path}:{lineno}: unknown labels {sorted(set(rec.labels) - known)}")
        seen.add(rec.clip_id)
        records.append(rec)
    return records


def load_clips(manifest: str | Path, offset: float = frontend.LOG_OFFSET) -> list[ClipFeatures]:
    base = Path(manifest).parent
    out = []
    for rec in read_manifest(manifest):
        wav = Path(rec.path)
        if not wav.is_absolute():
            wav = base / wav
        clip = frontend.read_wav(wav, rec.clip_id, rec.labels)
        out.append(featurize(clip, offset))
    return out


def split_of(clip_id: str, seed: int, fractions: Sequence[float]) -> int:
    """Stable split assignment from a hash of ``(seed, clip_id)``."""
    h = hashlib.sha256(f"{seed}:{clip_id}".encode()).digest()
    u = int.from_bytes(h[:8], "little") / 2**64
    edges = np.cumsum(fractions)
    # cumsum can land a hair under 1.0; the tail belongs to the last split
    return min(int(np.searchsorted(edges, u, side="right")), len(fractions) - 1)


def corpus_digest(clips: Sequence[ClipFeatures]) -> str:
    h = hashlib.sha256()
    for c in clips:
        h.update(c.clip_id.encode())
        h.update(",".join(sorted(c.labels)).encode())
        h.update(np.ascontiguousarray(c.patches).tobytes())
    return h.hexdigest()
