"""Audio ingestion: WAV loading, resampling, segmentation, manifests and
synthetic hive recordings."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

MANIFEST_HEADER = ("path", "hive_id", "queen_present")

# windowed-sinc design: taps per side measured at the lower of the two rates
RESAMPLE_TAPS = 64
RESAMPLE_BETA = 8.0
MAX_RATIO_DENOMINATOR = 2000


class AudioError(Exception):
    """Raised for unreadable or unsupported audio files."""


class ManifestError(Exception):
    """Raised when a dataset manifest fails validation."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class ClipEntry:
    path: str
    hive_id: str
    queen_present: bool
    duration_s: float | None = None


@dataclass
class DatasetManifest:
    entries: list[ClipEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def hives(self) -> list[str]:
        return sorted({e.hive_id for e in self.entries})


def load_wav(path: str | os.PathLike) -> AudioClip:
    """Read a PCM16 or float32 WAV file as mono samples in [-1, 1]."""
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (OSError, ValueError) as exc:
        raise AudioError(f"{path}: cannot read WAV ({exc})") from exc

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample encoding {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(np.clip(x, -1.0, 1.0), int(rate), str(path))


def save_wav(path: str | os.PathLike, clip: AudioClip, encoding: str = "pcm16") -> None:
    x = np.clip(np.asarray(clip.samples, dtype=np.float64), -1.0, 1.0)
    if encoding == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    elif encoding == "float32":
        data = x.astype("<f4")
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    wavfile.write(os.fspath(path), clip.sample_rate, data)


def _sinc_filter(up: int, down: int) -> np.ndarray:
    # Kaiser-windowed sinc low-pass at the narrower Nyquist, on the upsampled grid;
    # unit DC gain (resample_poly applies the factor `up` itself)
    width = max(up, down)
    n_taps = RESAMPLE_TAPS * width + 1
    n = np.arange(n_taps) - (n_taps - 1) / 2
    cutoff = 1.0 / width
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(n_taps, RESAMPLE_BETA)
    return h


def resample_array(x: np.ndarray, ratio: Fraction | float) -> np.ndarray:
    """Resample ``x`` so its length scales by ``ratio`` (output/input rate)."""
    ratio = Fraction(ratio).limit_denominator(MAX_RATIO_DENOMINATOR)
    up, down = ratio.numerator, ratio.denominator
    if up == down:
        return np.array(x, dtype=np.float64, copy=True)
    y = resample_poly(np.asarray(x, dtype=np.float64), up, down, window=_sinc_filter(up, down))
    return y


def _fit_length(y: np.ndarray, n: int) -> np.ndarray:
    if len(y) >= n:
        return y[:n]
    return np.concatenate([y, np.zeros(n - len(y))])


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return clip
    n_out = int(round(len(clip.samples) * target_rate / clip.sample_rate))
    y = resample_array(clip.samples, Fraction(target_rate, clip.sample_rate))
    return AudioClip(_fit_length(y, n_out), int(target_rate), clip.source_id)


def segment(clip: AudioClip, seconds: float) -> list[AudioClip]:
    """Split into consecutive non-overlapping segments, dropping the tail."""
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    seg_len = int(round(seconds * clip.sample_rate))
    n_seg = len(clip.samples) // seg_len
    return [
        AudioClip(clip.samples[i * seg_len:(i + 1) * seg_len], clip.sample_rate,
                  f"{clip.source_id}#{i}")
        for i in range(n_seg)
    ]


def _parse_bool(value: str, row: int) -> bool:
    v = value.strip().lower()
    if v in ("1", "true"):
        return True
    if v in ("0", "false"):
        return False
    raise ManifestError(f"row {row}: queen_present must be 0 or 1, got {value!r}")


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Parse a ``path,hive_id,queen_present[,duration_s]`` CSV.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    entries: list[ClipEntry] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest (no header)") from None
        if tuple(header[:3]) != MANIFEST_HEADER or len(header) > 4 or (
                len(header) == 4 and header[3] != "duration_s"):
            raise ManifestError(
                f"{path}: header must be {','.join(MANIFEST_HEADER)}[,duration_s], got {','.join(header)}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise ManifestError(f"row {row_no}: expected at least 3 columns")
            rel, hive, queen = (c.strip() for c in row[:3])
            if not hive:
                raise ManifestError(f"row {row_no}: empty hive_id")
            full = rel if os.path.isabs(rel) else os.fspath(base / rel)
            key = os.path.normpath(full)
            if key in seen:
                raise ManifestError(f"row {row_no}: duplicate path {rel}")
            seen.add(key)
            if check_files and not os.path.isfile(full):
                raise ManifestError(f"row {row_no}: missing audio file {full}")
            duration = None
            if len(row) > 3 and row[3].strip():
                try:
                    duration = float(row[3])
                except ValueError:
                    raise ManifestError(f"row {row_no}: bad duration_s {row[3]!r}") from None
            entries.append(ClipEntry(full, hive, _parse_bool(queen, row_no), duration))
    return DatasetManifest(entries)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write a manifest; paths under the manifest directory are stored relative."""
    path = Path(path)
    base = path.parent.resolve()
    with_duration = any(e.duration_s is not None for e in manifest.entries)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(MANIFEST_HEADER) + (["duration_s"] if with_duration else []))
        for e in manifest.entries:
            p = Path(e.path)
            try:
                p = p.resolve().relative_to(base)
            except ValueError:
                pass
            row = [str(p), e.hive_id, "1" if e.queen_present else "0"]
            if with_duration:
                row.append("" if e.duration_s is None else repr(float(e.duration_s)))
            w.writerow(row)


@dataclass(frozen=True)
class HiveProfile:
    """Harmonic recipe for a synthetic hive.

    A queenless hive raises the fundamental by ``queenless_shift_hz`` and
    multiplies every harmonic above the first by ``queenless_tilt``.
    """

    fundamental_hz: float = 250.0
    harmonic_amps: Sequence[float] = (1.0, 0.5, 0.25)
    noise_floor: float = 0.05
    queenless_shift_hz: float = 40.0
    queenless_tilt: float = 1.5
    jitter: float = 0.01
    target_rms: float = 0.1


def synth_hive_clip(profile: HiveProfile, queen: bool, duration_s: float,
                    rate: int, seed: int) -> AudioClip:
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate

    f0 = profile.fundamental_hz if queen else profile.fundamental_hz + profile.queenless_shift_hz
    # small per-clip detuning so recordings of the same state are not identical
    f0 *= 1.0 + profile.jitter * rng.uniform(-1.0, 1.0)
    x = np.zeros(n)
    for k, amp in enumerate(profile.harmonic_amps, start=1):
        if k > 1 and not queen:
            amp *= profile.queenless_tilt
        if amp == 0 or k * f0 >= rate / 2:
            continue
        x += amp * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))

    if profile.noise_floor > 0:
        x += profile.noise_floor * rng.standard_normal(n)

    rms = np.sqrt(np.mean(x ** 2)) if n else 0.0
    if rms > 0:
        x *= float(np.clip(profile.target_rms, 0.05, 0.5)) / rms
    return AudioClip(x, int(rate), f"synth-{'q' if queen else 'nq'}-{seed}")
