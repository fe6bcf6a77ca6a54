"""Classifier inputs: time-averaged band vectors for the SVM, slice stacks for
the CNN."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip, resample
from . import emd
from .spectral import (BandKind, FeatureMatrix, iter_stft, log_mel, mel_spectrogram, mfcc,
                       stft_magnitude)

N_MELS = 120
N_MFCC = 20
N_SVM_BANDS = 20
N_SLICES = 30
WINDOW = 2048
HOP = 512
CNN_RATE = 22050


class Provenance(str, enum.Enum):
    MFCC20 = "mfcc20"
    HHT20 = "hht20"
    MFCC20_HHT20 = "mfcc20+hht20"
    MEL20 = "mel20"
    LOGMEL20 = "logmel20"


_EXPECTED_LEN = {
    Provenance.MFCC20: 20,
    Provenance.HHT20: 20,
    Provenance.MFCC20_HHT20: 40,
    Provenance.MEL20: 20,
    Provenance.LOGMEL20: 20,
}

_COMBINABLE = {(Provenance.MFCC20, Provenance.HHT20): Provenance.MFCC20_HHT20}


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        want = _EXPECTED_LEN[self.provenance]
        if len(self.values) != want:
            raise ValueError(f"{self.provenance.value} vector must have {want} entries, got {len(self.values)}")


@dataclass(frozen=True)
class SliceStack:
    data: np.ndarray  # (n_slices, bands)

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]


def time_average(m: FeatureMatrix | np.ndarray) -> np.ndarray:
    data = m.data if isinstance(m, FeatureMatrix) else np.asarray(m)
    if data.shape[0] == 0:
        raise ValueError("cannot average an empty matrix")
    return data.mean(axis=0)


def downsample_bands(v: np.ndarray, out: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if out < 1 or len(v) % out:
        raise ValueError(f"length {len(v)} is not divisible into {out} bands")
    return v.reshape(out, -1).mean(axis=1)


def concat(a: FeatureVector, b: FeatureVector) -> FeatureVector:
    combined = _COMBINABLE.get((a.provenance, b.provenance))
    if combined is None:
        raise ValueError(f"cannot concatenate {a.provenance.value} with {b.provenance.value}")
    return FeatureVector(np.concatenate([a.values, b.values]), combined)


def slice_stack(m: FeatureMatrix | np.ndarray, n_slices: int = N_SLICES) -> SliceStack:
    """Average ``n_slices`` contiguous row groups; leftover rows join the last group."""
    data = m.data if isinstance(m, FeatureMatrix) else np.asarray(m, dtype=np.float64)
    rows = data.shape[0]
    if n_slices < 1 or rows < n_slices:
        raise ValueError(f"{rows} frames cannot be cut into {n_slices} slices")
    size = rows // n_slices
    bounds = [i * size for i in range(n_slices)] + [rows]
    out = np.stack([data[bounds[i]:bounds[i + 1]].mean(axis=0) for i in range(n_slices)])
    return SliceStack(out)


# -- pipelines from audio ------------------------------------------------------

SPECTRAL_KINDS = ("mfcc", "mel", "logmel")


def _kind_frames(spec: FeatureMatrix, kind: str) -> FeatureMatrix:
    mel = mel_spectrogram(spec, N_MELS)
    if kind == "mel":
        return mel
    lm = log_mel(mel)
    if kind == "logmel":
        return lm
    if kind == "mfcc":
        return mfcc(lm, N_MFCC)
    raise ValueError(f"unknown spectral kind {kind!r}")


def spectral_frames(clip: AudioClip, kind: str, window: int = WINDOW, hop: int = HOP) -> FeatureMatrix:
    """Full per-frame Mel, log-Mel or MFCC matrix."""
    return _kind_frames(stft_magnitude(clip, window, hop), kind)


def spectral_time_mean(clip: AudioClip, kind: str, window: int = WINDOW, hop: int = HOP) -> np.ndarray:
    """Time average of ``spectral_frames(clip, kind)`` computed in blocks, so a
    10-minute recording never needs its full spectrogram in memory."""
    total = None
    count = 0
    for block in iter_stft(clip, window, hop):
        frames = _kind_frames(block, kind).data
        s = frames.sum(axis=0)
        total = s if total is None else total + s
        count += frames.shape[0]
    return total / count


def svm_vector(clip: AudioClip, kind: str, hht_workers: int = 1) -> np.ndarray:
    """Band vector for one recording before downsampling to 20 bands.

    ``mfcc`` gives 20 coefficients, ``mel``/``logmel`` 120 bands and ``hht``
    the 20-band HHT vector.
    """
    if kind == "hht":
        return emd.hht_band_vector(emd.hht_spectrogram(clip, workers=hht_workers))
    return spectral_time_mean(clip, kind)


def svm_feature(vectors: dict[str, np.ndarray], provenance: Provenance) -> FeatureVector:
    """Assemble the experiment's SVM input from cached per-kind vectors."""
    if provenance is Provenance.MFCC20:
        return FeatureVector(vectors["mfcc"], provenance)
    if provenance is Provenance.HHT20:
        return FeatureVector(vectors["hht"], provenance)
    if provenance is Provenance.MFCC20_HHT20:
        return concat(FeatureVector(vectors["mfcc"], Provenance.MFCC20),
                      FeatureVector(vectors["hht"], Provenance.HHT20))
    if provenance is Provenance.MEL20:
        return FeatureVector(downsample_bands(vectors["mel"], N_SVM_BANDS), provenance)
    if provenance is Provenance.LOGMEL20:
        return FeatureVector(downsample_bands(vectors["logmel"], N_SVM_BANDS), provenance)
    raise ValueError(provenance)


def cnn_stack(segment: AudioClip, kind: str, n_slices: int = N_SLICES) -> SliceStack:
    """Slice stack of one 1-minute segment at 22.05 kHz."""
    if segment.sample_rate != CNN_RATE:
        segment = resample(segment, CNN_RATE)
    return slice_stack(spectral_frames(segment, kind), n_slices)


def as_matrix(v: np.ndarray, kind: BandKind, hop_s: float = 0.0) -> FeatureMatrix:
    return FeatureMatrix(np.asarray(v, dtype=np.float64).reshape(1, -1), kind, hop_s)
