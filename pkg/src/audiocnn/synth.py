"""Seeded synthetic weakly-labeled corpus.

Each clip is low-level background noise with a few non-overlapping events
from spectrally distinct classes. The clip's labels are the set of event
classes it contains; the event log keeps the exact intervals.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from audiocnn.dataset import (
    ClipFeatures,
    DataError,
    LabelVocabulary,
    ManifestRecord,
    featurize,
    write_manifest,
)
from audiocnn.frontend import SAMPLE_RATE, WaveformClip, to_pcm16, write_wav

EVENT_CLASSES = (
    "tone-low",
    "tone-mid",
    "tone-high",
    "white-noise",
    "filtered-noise",
    "chirp-up",
    "chirp-down",
    "am-tone",
)
LABEL_IDS = {name: i for i, name in enumerate(EVENT_CLASSES)}
NOISE_RMS = 0.01
FADE_S = 0.01


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    num_clips: int = 2000
    duration_range: tuple[float, float] = (3.0, 8.0)
    classes: tuple[str, ...] = EVENT_CLASSES
    events_per_clip: tuple[int, int] = (1, 3)
    event_duration_range: tuple[float, float] = (0.5, 2.0)
    snr_db: float = 10.0
    uninformative_fraction: float = 0.3
    prefix: str = "clip"

    def __post_init__(self):
        object.__setattr__(self, "duration_range", tuple(self.duration_range))
        object.__setattr__(self, "event_duration_range", tuple(self.event_duration_range))
        object.__setattr__(self, "events_per_clip", tuple(self.events_per_clip))
        object.__setattr__(self, "classes", tuple(self.classes))
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise SynthError("duration_range must be positive and ordered")
        elo, ehi = self.event_duration_range
        if not 0 < elo <= ehi:
            raise SynthError("event_duration_range must be positive and ordered")
        nlo, nhi = self.events_per_clip
        if not 1 <= nlo <= nhi:
            raise SynthError("events_per_clip must satisfy 1 <= min <= max")
        if not 0 <= self.uninformative_fraction < 1:
            raise SynthError("uninformative_fraction must lie in [0, 1)")
        unknown = set(self.classes) - set(EVENT_CLASSES)
        if unknown or not self.classes or len(set(self.classes)) != len(self.classes):
            raise SynthError(f"invalid event classes {sorted(unknown) or list(self.classes)}")
        if self.num_clips < 1:
            raise SynthError("num_clips must be positive")
        if (1 - self.uninformative_fraction) * lo < elo:
            raise SynthError("shortest clip cannot hold one shortest event within the informative budget")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SynthError(f"unknown synth fields {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Event:
    label: str
    start_s: float
    end_s: float


@dataclass
class SynthClip:
    clip_id: str
    samples: np.ndarray
    events: list[Event] = field(default_factory=list)

    @property
    def labels(self) -> frozenset:
        return frozenset(e.label for e in self.events)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / SAMPLE_RATE

    def event_free_seconds(self) -> float:
        return self.duration_s - sum(e.end_s - e.start_s for e in self.events)

    def waveform(self) -> WaveformClip:
        return WaveformClip(self.clip_id, self.samples, SAMPLE_RATE, self.labels)


def clip_seed(seed: int, clip_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{clip_id}".encode()).digest()[:8], "little")


def _fade(n: int) -> np.ndarray:
    ramp = min(int(FADE_S * SAMPLE_RATE), n // 2)
    env = np.ones(n)
    if ramp:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp :] = r[::-1]
    return env


def _bandpass_noise(rng, n, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    spec[(f < lo) | (f > hi)] = 0
    return np.fft.irfft(spec, n)


def event_waveform(label: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS waveform of ``n`` samples for one event class."""
    t = np.arange(n) / SAMPLE_RATE
    dur = n / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    if label in ("tone-low", "tone-mid", "tone-high"):
        lo, hi = {"tone-low": (200, 400), "tone-mid": (800, 1500), "tone-high": (3000, 5000)}[label]
        x = np.sin(2 * np.pi * rng.uniform(lo, hi) * t + phase)
    elif label == "white-noise":
        x = rng.standard_normal(n)
    elif label == "filtered-noise":
        x = _bandpass_noise(rng, n, 1500, 3000)
    elif label in ("chirp-up", "chirp-down"):
        f0, f1 = (300.0, 4000.0) if label == "chirp-up" else (4000.0, 300.0)
        k = np.log(f1 / f0) / dur
        x = np.sin(2 * np.pi * f0 * (np.exp(k * t) - 1) / k + phase)
    elif label == "am-tone":
        carrier = np.sin(2 * np.pi * rng.uniform(2000, 2500) * t + phase)
        x = carrier * (1 + 0.8 * np.sin(2 * np.pi * rng.uniform(8, 16) * t))
    else:
        raise SynthError(f"unknown event class {label!r}")
    rms = np.sqrt(np.mean(x * x))
    return x / rms if rms > 0 else x


def _place_events(config: SynthConfig, duration: float, rng: np.random.Generator) -> list[tuple[str, float, float]]:
    budget = (1 - config.uninformative_fraction) * duration
    lo, hi = config.events_per_clip
    count = int(rng.integers(lo, hi + 1))
    elo, ehi = config.event_duration_range
    durs = []
    for _ in range(count):
        d = float(rng.uniform(elo, ehi))
        if sum(durs) + d > budget:
            d = budget - sum(durs)
            if d < elo:
                break
        durs.append(d)
    labels = [config.classes[int(i)] for i in rng.integers(0, len(config.classes), size=len(durs))]
    free = duration - sum(durs)
    cuts = np.sort(rng.uniform(0, free, size=len(durs)))
    gaps = np.diff(np.concatenate([[0.0], cuts]))
    out, cursor = [], 0.0
    for label, d, g in zip(labels, durs, gaps):
        start = cursor + g
        out.append((label, start, start + d))
        cursor = start + d
    return out


def synth_clip(config: SynthConfig, index: int) -> SynthClip:
    clip_id = f"{config.prefix}-{index:05d}"
    rng = np.random.default_rng(clip_seed(config.seed, clip_id))
    duration = float(rng.uniform(*config.duration_range))
    n = int(round(duration * SAMPLE_RATE))
    x = NOISE_RMS * rng.standard_normal(n)
    level = NOISE_RMS * 10 ** (config.snr_db / 20)
    events = []
    for label, start, end in _place_events(config, n / SAMPLE_RATE, rng):
        a, b = int(np.ceil(start * SAMPLE_RATE)), int(np.floor(end * SAMPLE_RATE))
        if b - a < 2:
            continue
        x[a:b] += level * event_waveform(label, b - a, rng) * _fade(b - a)
        events.append(Event(label, a / SAMPLE_RATE, b / SAMPLE_RATE))
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    # quantize now so in-memory clips equal what a WAV round trip gives back
    pcm = np.frombuffer(to_pcm16(x), dtype="<i2")
    return SynthClip(clip_id, pcm.astype(np.float64) / 32768.0, events)


def synth_clips(config: SynthConfig) -> list[SynthClip]:
    return [synth_clip(config, i) for i in range(config.num_clips)]


def synth_features(config: SynthConfig) -> tuple[list[ClipFeatures], list[SynthClip]]:
    """Generate and featurize the corpus in memory (no files)."""
    clips = synth_clips(config)
    return [featurize(c.waveform()) for c in clips], clips


def vocabulary_of(clips: Sequence) -> LabelVocabulary:
    return LabelVocabulary.from_label_sets([c.labels for c in clips], LABEL_IDS)


def synth_dataset(config: SynthConfig, out_dir: str | Path) -> Path:
    """Write WAVs, ``manifest.jsonl``, ``vocabulary.csv`` and ``events.jsonl``.

    Returns the manifest path.
    """
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot write to {out}: {e}") from e
    clips = synth_clips(config)
    records = []
    with open(out / "events.jsonl", "w") as log:
        for c in clips:
            rel = f"audio/{c.clip_id}.wav"
            write_wav(out / rel, c.samples)
            records.append(ManifestRecord(c.clip_id, rel, tuple(sorted(c.labels))))
            log.write(
                json.dumps(
                    {"clip_id": c.clip_id, "duration_s": c.duration_s, "events": [asdict(e) for e in c.events]},
                    sort_keys=True,
                )
                + "\n"
            )
    write_manifest(out / "manifest.jsonl", records)
    vocabulary_of(clips).to_csv(out / "vocabulary.csv")
    (out / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return out / "manifest.jsonl"


def read_event_log(path: str | Path) -> dict[str, list[Event]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        out[d["clip_id"]] = [Event(**e) for e in d["events"]]
    return out
