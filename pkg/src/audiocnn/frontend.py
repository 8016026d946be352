"""Waveform -> log-mel patch frontend.

16 kHz mono input, 25 ms Hann windows every 10 ms (400/160 samples), a
512-point real FFT, 64 triangular mel bands over 125-7500 Hz, and
``ln(offset + mel_energy)``. The whole-clip log-mel matrix is cut into
consecutive non-overlapping blocks of 96 frames.
"""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

SAMPLE_RATE = 16000
WINDOW = 400
HOP = 160
FFT_SIZE = 512
FFT_BINS = FFT_SIZE // 2 + 1
NUM_BANDS = 64
PATCH_FRAMES = 96
PATCH_SECONDS = PATCH_FRAMES * HOP / SAMPLE_RATE
LOWER_EDGE_HZ = 125.0
UPPER_EDGE_HZ = 7500.0
LOG_OFFSET = 0.01


class AudioError(ValueError):
    pass


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


@dataclass(frozen=True)
class WaveformClip:
    clip_id: str
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    labels: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.sample_rate_hz != SAMPLE_RATE:
            raise AudioError(f"{self.clip_id}: sample rate {self.sample_rate_hz} Hz, expected {SAMPLE_RATE}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError(f"{self.clip_id}: expected mono samples")
        if not np.all(np.isfinite(samples)) or np.any(np.abs(samples) > 1.0):
            raise AudioError(f"{self.clip_id}: samples must be finite and within [-1, 1]")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", frozenset(self.labels))

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # [num_bands, fft_bins]
    band_edges_hz: np.ndarray  # num_bands + 2 ascending edges

    @property
    def num_bands(self) -> int:
        return self.weights.shape[0]

    @property
    def fft_bins(self) -> int:
        return self.weights.shape[1]

    @property
    def centers_hz(self) -> np.ndarray:
        return self.band_edges_hz[1:-1]

    def response(self, freq_hz: float) -> np.ndarray:
        """Exact triangle responses of every band at a single frequency."""
        lo, ctr, hi = self.band_edges_hz[:-2], self.band_edges_hz[1:-1], self.band_edges_hz[2:]
        m = hz_to_mel(freq_hz)
        up = (m - hz_to_mel(lo)) / (hz_to_mel(ctr) - hz_to_mel(lo))
        down = (hz_to_mel(hi) - m) / (hz_to_mel(hi) - hz_to_mel(ctr))
        return np.maximum(0.0, np.minimum(up, down))


@dataclass(frozen=True)
class LogMelPatch:
    clip_id: str
    patch_index: int
    values: np.ndarray  # [96, 64]
    labels: frozenset = field(default_factory=frozenset)

    @property
    def start_time_s(self) -> float:
        return self.patch_index * PATCH_SECONDS


def stft_magnitude(samples) -> np.ndarray:
    """Magnitude spectra of Hann-windowed 400-sample frames, hop 160.

    Returns ``[num_frames, 257]`` with ``num_frames = (len - 400) // 160 + 1``.
    """
    if isinstance(samples, WaveformClip):
        samples = samples.samples
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < WINDOW:
        raise AudioError("clip too short")
    frames = np.lib.stride_tricks.sliding_window_view(x, WINDOW)[::HOP]
    window = np.hanning(WINDOW + 1)[:-1]  # periodic Hann
    return np.abs(np.fft.rfft(frames * window, n=FFT_SIZE, axis=1))


def build_mel_filterbank(
    fft_bins: int = FFT_BINS,
    sample_rate_hz: int = SAMPLE_RATE,
    num_bands: int = NUM_BANDS,
    lower_edge_hz: float = LOWER_EDGE_HZ,
    upper_edge_hz: float = UPPER_EDGE_HZ,
) -> MelFilterbank:
    nyquist = sample_rate_hz / 2
    if not (0 < lower_edge_hz < upper_edge_hz <= nyquist):
        raise AudioError("invalid band edges")
    if fft_bins < 2:
        raise AudioError("fft_bins must be at least 2")
    edges_mel = np.linspace(hz_to_mel(lower_edge_hz), hz_to_mel(upper_edge_hz), num_bands + 2)
    edges_hz = mel_to_hz(edges_mel)
    bin_mel = hz_to_mel(np.linspace(0.0, nyquist, fft_bins))
    lo, ctr, hi = edges_mel[:-2, None], edges_mel[1:-1, None], edges_mel[2:, None]
    up = (bin_mel - lo) / (ctr - lo)
    down = (hi - bin_mel) / (hi - ctr)
    weights = np.maximum(0.0, np.minimum(up, down))
    if np.any(weights.max(axis=1) <= 0):
        raise AudioError("invalid band edges: a mel band falls between FFT bins")
    return MelFilterbank(weights, edges_hz)


_DEFAULT_FILTERBANK: MelFilterbank | None = None


def default_filterbank() -> MelFilterbank:
    global _DEFAULT_FILTERBANK
    if _DEFAULT_FILTERBANK is None:
        _DEFAULT_FILTERBANK = build_mel_filterbank()
    return _DEFAULT_FILTERBANK


def mel_energies(spectrogram: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    spectrogram = np.asarray(spectrogram, dtype=np.float64)
    if spectrogram.shape[-1] != fb.fft_bins:
        raise AudioError(f"spectrogram has {spectrogram.shape[-1]} bins, filterbank expects {fb.fft_bins}")
    return spectrogram @ fb.weights.T


def band_energy(samples, fb: MelFilterbank | None = None) -> np.ndarray:
    """Per-band linear mel energy of a waveform, summed over frames.

    Energy integrates the power spectrum through the filterbank; the log-mel
    features themselves integrate magnitudes.
    """
    fb = fb or default_filterbank()
    power = stft_magnitude(samples) ** 2
    return (power @ fb.weights.T).sum(axis=0)


def log_mel(spectrogram: np.ndarray, fb: MelFilterbank | None = None, offset: float = LOG_OFFSET) -> np.ndarray:
    if offset <= 0:
        raise AudioError("offset must be positive")
    fb = fb or default_filterbank()
    return np.log(offset + mel_energies(spectrogram, fb))


def clip_log_mel(clip: WaveformClip, offset: float = LOG_OFFSET, fb: MelFilterbank | None = None) -> np.ndarray:
    return log_mel(stft_magnitude(clip.samples), fb, offset)


def extract_patches(
    clip: WaveformClip, offset: float = LOG_OFFSET, fb: MelFilterbank | None = None
) -> list[LogMelPatch]:
    if len(clip.samples) < WINDOW:
        return []
    lm = clip_log_mel(clip, offset, fb)
    count = len(lm) // PATCH_FRAMES
    patches = []
    for k in range(count):
        values = lm[k * PATCH_FRAMES : (k + 1) * PATCH_FRAMES].astype(np.float32)
        assert values.shape == (PATCH_FRAMES, NUM_BANDS)
        patches.append(LogMelPatch(clip.clip_id, k, values, clip.labels))
    return patches


def patch_count(num_samples: int) -> int:
    if num_samples < WINDOW:
        return 0
    return ((num_samples - WINDOW) // HOP + 1) // PATCH_FRAMES


# -- WAV I/O ---------------------------------------------------------------


def read_wav(source: str | Path | BinaryIO, clip_id: str | None = None, labels: Iterable = ()) -> WaveformClip:
    """Read 16-bit PCM mono 16 kHz RIFF WAV; anything else is rejected."""
    try:
        with wave.open(source if not isinstance(source, Path) else str(source), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if w.getcomptype() != "NONE":
                raise AudioError(f"unsupported WAV compression {w.getcomptype()!r}")
            if width != 2:
                raise AudioError(f"unsupported sample width {8 * width} bits; need 16-bit PCM")
            if channels != 1:
                raise AudioError(f"unsupported channel count {channels}; need mono")
            if rate != SAMPLE_RATE:
                raise AudioError(f"unsupported sample rate {rate} Hz; need {SAMPLE_RATE}")
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise AudioError(f"not a PCM WAV file: {e}") from e
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if clip_id is None:
        clip_id = Path(str(source)).stem if isinstance(source, (str, Path)) else "clip"
    return WaveformClip(clip_id, pcm, SAMPLE_RATE, frozenset(labels))


def to_pcm16(samples: np.ndarray) -> bytes:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    return pcm.tobytes()


def write_wav(path: str | Path | BinaryIO, samples: np.ndarray) -> None:
    target = str(path) if isinstance(path, Path) else path
    with wave.open(target, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(to_pcm16(samples))


# -- patch cache -----------------------------------------------------------

CACHE_MAGIC = b"WVC1"
CACHE_VERSION = 1


def write_patch_cache(target: str | Path | BinaryIO, patches: Sequence[LogMelPatch], label_ids: dict) -> None:
    """Binary cache: header, then per patch clip id, index, label ids, floats.

    ``label_ids`` maps label names to integer ids.
    """
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<IIII", CACHE_VERSION, PATCH_FRAMES, NUM_BANDS, len(patches)))
    for p in patches:
        cid = p.clip_id.encode()
        ids = sorted(label_ids[name] for name in p.labels)
        buf.write(struct.pack("<H", len(cid)))
        buf.write(cid)
        buf.write(struct.pack("<II", p.patch_index, len(ids)))
        buf.write(struct.pack(f"<{len(ids)}I", *ids))
        buf.write(np.ascontiguousarray(p.values, dtype="<f4").tobytes())
    data = buf.getvalue()
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(data)
    else:
        target.write(data)


def read_patch_cache(source: str | Path | BinaryIO, label_names: dict) -> list[LogMelPatch]:
    """Inverse of :func:`write_patch_cache`; ``label_names`` maps ids to names."""
    data = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    if data[:4] != CACHE_MAGIC:
        raise AudioError("not a patch cache (bad magic)")
    if len(data) < 20:
        raise AudioError("truncated patch cache header")
    version, frames, bands, count = struct.unpack_from("<IIII", data, 4)
    if version != CACHE_VERSION or (frames, bands) != (PATCH_FRAMES, NUM_BANDS):
        raise AudioError(f"unsupported patch cache v{version} {frames}x{bands}")
    pos = 20
    size = frames * bands * 4
    patches = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            cid = data[pos : pos + n].decode()
            pos += n
            index, k = struct.unpack_from("<II", data, pos)
            pos += 8
            ids = struct.unpack_from(f"<{k}I", data, pos)
            pos += 4 * k
            values = np.frombuffer(data, dtype="<f4", count=frames * bands, offset=pos).reshape(frames, bands)
            pos += size
            names = frozenset(label_names[i] for i in ids)
            patches.append(LogMelPatch(cid, index, values.astype(np.float32), names))
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise AudioError(f"truncated or corrupt patch cache at byte {pos}") from e
    except KeyError as e:
        raise AudioError(f"patch cache refers to unknown label id {e.args[0]}") from e
    if pos != len(data):
        raise AudioError(f"patch cache has {len(data) - pos} trailing bytes")
    return patches
