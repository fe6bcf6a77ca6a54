"""Short-time spectra, Mel/log-Mel/MFCC features, z-scoring and pitch-shift
augmentation."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.fft import dct, idct
from scipy.signal import welch

from .audio_io import AudioClip, resample_array

LOG_FLOOR = 1e-10


class BandKind(enum.IntEnum):
    LINEAR_HZ = 0
    MEL = 1
    MFCC = 2
    HHT_BAND = 3


@dataclass(frozen=True)
class FeatureMatrix:
    """Time x band matrix plus axis metadata."""

    data: np.ndarray
    band_kind: BandKind
    frame_hop_s: float
    band_centers: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"feature matrix must be 2-D and nonempty, got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bands(self) -> int:
        return self.data.shape[1]


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def n_stft_frames(n_samples: int, window_len: int, hop: int) -> int:
    # a trailing partial frame is kept (zero-filled), hence the ceiling
    if n_samples < window_len:
        return 0
    return 1 + -(-(n_samples - window_len) // hop)


def _padded(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    need = (n_stft_frames(len(x), window_len, hop) - 1) * hop + window_len
    return x if need == len(x) else np.concatenate([x, np.zeros(need - len(x))])


def _check_stft_args(n_samples: int, window_len: int, hop: int) -> None:
    if not window_len >= hop >= 1:
        raise ValueError(f"need window_len >= hop >= 1, got {window_len}, {hop}")
    if n_samples < window_len:
        raise ValueError(f"clip of {n_samples} samples is shorter than one window ({window_len})")


def _stft_block(x: np.ndarray, window: np.ndarray, hop: int) -> np.ndarray:
    frames = np.lib.stride_tricks.sliding_window_view(x, len(window))[::hop]
    return np.abs(np.fft.rfft(frames * window, axis=1))


def stft_magnitude(clip: AudioClip, window_len: int = 2048, hop: int = 512) -> FeatureMatrix:
    """Magnitude STFT with a Hann window, first frame at sample 0.

    Frames advance by ``hop`` until the signal is covered; a last partial frame
    is zero-filled on the right.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    _check_stft_args(len(x), window_len, hop)
    x = _padded(x, window_len, hop)
    mag = _stft_block(x, hann(window_len), hop)
    centers = np.fft.rfftfreq(window_len, 1.0 / clip.sample_rate)
    return FeatureMatrix(mag, BandKind.LINEAR_HZ, hop / clip.sample_rate, centers)


def iter_stft(clip: AudioClip, window_len: int = 2048, hop: int = 512,
              frames_per_chunk: int = 4096) -> Iterator[FeatureMatrix]:
    """Yield consecutive row blocks of ``stft_magnitude(clip)`` without holding
    the whole spectrogram in memory."""
    x = np.asarray(clip.samples, dtype=np.float64)
    _check_stft_args(len(x), window_len, hop)
    x = _padded(x, window_len, hop)
    window = hann(window_len)
    centers = np.fft.rfftfreq(window_len, 1.0 / clip.sample_rate)
    total = n_stft_frames(len(x), window_len, hop)
    for start in range(0, total, frames_per_chunk):
        stop = min(total, start + frames_per_chunk)
        block = x[start * hop:(stop - 1) * hop + window_len]
        yield FeatureMatrix(_stft_block(block, window, hop), BandKind.LINEAR_HZ,
                            hop / clip.sample_rate, centers)


# Slaney mel scale: linear below 1 kHz, logarithmic above
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (np.maximum(m, _MIN_LOG_MEL) - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


def mel_filterbank(bin_freqs: np.ndarray, n_mels: int, fmin: float, fmax: float) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters (unit peak) over ``bin_freqs``.

    Returns ``(weights, centers)`` with weights shaped ``(n_mels, n_bins)``.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    f = np.asarray(bin_freqs)[None, :]
    rising = (f - lower) / (center - lower)
    falling = (upper - f) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges[1:-1]


def mel_spectrogram(spec: FeatureMatrix, n_mels: int = 120, fmin: float = 0.0,
                    fmax: float | None = None) -> FeatureMatrix:
    if spec.band_kind != BandKind.LINEAR_HZ:
        raise ValueError(f"mel_spectrogram expects a linear-Hz spectrogram, got {spec.band_kind.name}")
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if spec.band_centers is None:
        raise ValueError("linear spectrogram needs band_centers")
    nyquist = float(spec.band_centers[-1])
    if fmax is None:
        fmax = nyquist
    if fmax > nyquist + 1e-9:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {nyquist}")
    weights, centers = mel_filterbank(spec.band_centers, n_mels, fmin, fmax)
    return FeatureMatrix(spec.data @ weights.T, BandKind.MEL, spec.frame_hop_s, centers)


def log_mel(spec: FeatureMatrix, floor: float = LOG_FLOOR) -> FeatureMatrix:
    if spec.band_kind != BandKind.MEL:
        raise ValueError(f"log_mel expects a mel spectrogram, got {spec.band_kind.name}")
    return FeatureMatrix(np.log(np.maximum(spec.data, floor)), BandKind.MEL,
                         spec.frame_hop_s, spec.band_centers)


def mfcc(mel_log: FeatureMatrix, n_coeffs: int = 20) -> FeatureMatrix:
    """Orthonormal DCT-II of each log-Mel frame, first ``n_coeffs`` kept."""
    if mel_log.band_kind != BandKind.MEL:
        raise ValueError(f"mfcc expects log-Mel input, got {mel_log.band_kind.name}")
    if not 1 <= n_coeffs <= mel_log.n_bands:
        raise ValueError(f"n_coeffs must be in [1, {mel_log.n_bands}]")
    c = dct(mel_log.data, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    return FeatureMatrix(c, BandKind.MFCC, mel_log.frame_hop_s)


def inverse_mfcc(coeffs: FeatureMatrix, n_mels: int) -> np.ndarray:
    c = np.zeros((coeffs.n_frames, n_mels))
    c[:, :coeffs.n_bands] = coeffs.data
    return idct(c, type=2, norm="ortho", axis=1)


# -- z-score normalisation ---------------------------------------------------

class ZMode(str, enum.Enum):
    PER_FEATURE = "per-feature"
    FREQUENCY_WISE = "frequency-wise"


@dataclass(frozen=True)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray
    mode: ZMode

    @property
    def constant_bands(self) -> np.ndarray:
        return np.flatnonzero(self.std == 0)

    @property
    def scale(self) -> np.ndarray:
        return np.where(self.std == 0, 1.0, self.std)


def _as_array(sample) -> np.ndarray:
    return np.asarray(sample.data if isinstance(sample, FeatureMatrix) else sample, dtype=np.float64)


def zscore_fit(samples: Sequence, mode: ZMode | str = ZMode.PER_FEATURE) -> ZScoreStats:
    """Estimate per-band mean and (population) std.

    Frequency-wise mode pools every time row of every sample; per-feature mode
    treats each sample as one vector.
    """
    mode = ZMode(mode)
    if len(samples) == 0:
        raise ValueError("zscore_fit needs at least one sample")
    arrays = [_as_array(s) for s in samples]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("zscore_fit samples have inconsistent shapes")
    if mode is ZMode.FREQUENCY_WISE:
        pooled = np.concatenate([a.reshape(-1, shape[-1]) for a in arrays], axis=0)
    else:
        pooled = np.stack([a.ravel() for a in arrays])
    return ZScoreStats(pooled.mean(axis=0), pooled.std(axis=0), mode)


def _broadcast_stats(stats: ZScoreStats, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if stats.mode is ZMode.FREQUENCY_WISE:
        if x.shape[-1] != stats.mean.shape[0]:
            raise ValueError(f"sample has {x.shape[-1]} bands, stats have {stats.mean.shape[0]}")
        return stats.mean, stats.scale
    if x.size != stats.mean.size:
        raise ValueError(f"sample has {x.size} features, stats have {stats.mean.size}")
    return stats.mean.reshape(x.shape), stats.scale.reshape(x.shape)


def zscore_apply(stats: ZScoreStats, sample):
    x = _as_array(sample)
    mean, scale = _broadcast_stats(stats, x)
    out = (x - mean) / scale
    if isinstance(sample, FeatureMatrix):
        return FeatureMatrix(out, sample.band_kind, sample.frame_hop_s, sample.band_centers)
    return out


def zscore_invert(stats: ZScoreStats, sample):
    x = _as_array(sample)
    mean, scale = _broadcast_stats(stats, x)
    out = x * scale + mean
    if isinstance(sample, FeatureMatrix):
        return FeatureMatrix(out, sample.band_kind, sample.frame_hop_s, sample.band_centers)
    return out


# -- pitch shift ---------------------------------------------------------------

def _nearest_peak(mag: np.ndarray) -> np.ndarray:
    """Per frame, the index of the spectral peak closest to each bin."""
    n_bins = mag.shape[1]
    k = np.arange(n_bins)
    inner = (mag[:, 1:-1] >= mag[:, :-2]) & (mag[:, 1:-1] > mag[:, 2:])
    peaks = np.zeros(mag.shape, dtype=bool)
    peaks[:, 1:-1] = inner
    peaks[:, 0] |= ~peaks.any(axis=1)
    prev = np.maximum.accumulate(np.where(peaks, k, -1), axis=1)
    nxt = np.minimum.accumulate(np.where(peaks, k, n_bins)[:, ::-1], axis=1)[:, ::-1]
    use_prev = (nxt == n_bins) | ((prev >= 0) & (k - prev <= nxt - k))
    return np.where(use_prev, prev, nxt)


def _ola_stretch(x: np.ndarray, n_out: int, grain: int) -> np.ndarray:
    """Stretch ``x`` to ``n_out`` samples by phase-locked overlap-add.

    Hann grains at 75% overlap. Peak bins advance by their measured phase
    increment; the bins around each peak keep their analysis phase offset to
    it, so tones stay coherent across grains.
    """
    hop = grain // 4
    if len(x) < grain or n_out < grain:
        return resample_array(x, n_out / max(len(x), 1))[:n_out]
    win = hann(grain)
    xp = np.pad(x, grain, mode="reflect")
    spec = np.fft.rfft(np.lib.stride_tricks.sliding_window_view(xp, grain)[::hop] * win, axis=1)
    n_frames = spec.shape[0]
    rate = len(x) / n_out
    steps = np.arange(0.0, n_frames - 1, rate)
    i0 = steps.astype(int)
    frac = (steps - i0)[:, None]
    mag = (1 - frac) * np.abs(spec[i0]) + frac * np.abs(spec[i0 + 1])

    expected = 2 * np.pi * hop * np.arange(spec.shape[1]) / grain
    ana_phase = np.angle(spec)
    dphi = ana_phase[i0 + 1] - ana_phase[i0] - expected
    dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
    acc = ana_phase[0] + np.concatenate(
        [np.zeros((1, spec.shape[1])), np.cumsum(dphi + expected, axis=0)[:-1]])

    peak = _nearest_peak(mag)
    rows = np.arange(len(steps))[:, None]
    local = ana_phase[i0]
    phase = acc[rows, peak] + local - local[rows, peak]

    grains = np.fft.irfft(mag * np.exp(1j * phase), n=grain, axis=1) * win
    idx = (np.arange(len(steps)) * hop)[:, None] + np.arange(grain)
    length = idx[-1, -1] + 1
    y = np.bincount(idx.ravel(), weights=grains.ravel(), minlength=length)
    norm = np.bincount(idx.ravel(), weights=np.broadcast_to(win ** 2, grains.shape).ravel(),
                       minlength=length)
    y = y / np.maximum(norm, 1e-3)
    start = int(round(grain / rate))
    return y[start:start + n_out]


def _match_spectrum(y: np.ndarray, ref: np.ndarray, grain: int, max_gain: float = 4.0) -> np.ndarray:
    """Equalize ``y`` to the long-term power spectrum of ``ref``.

    Overlap-add of re-phased grains cancels part of any incoherent (noise-like)
    content, while tones pass at unit gain. A zero-phase per-bin gain restores
    the balance between the two.
    """
    _, p_ref = welch(ref, nperseg=grain, window="hann")
    f, p_y = welch(y, nperseg=grain, window="hann")
    floor = 1e-12 * max(p_ref.max(), 1e-300)
    gain = np.sqrt((p_ref + floor) / (p_y + floor))
    gain = np.clip(gain, 1.0 / max_gain, max_gain)
    spec = np.fft.rfft(y)
    spec *= np.interp(np.linspace(0.0, 0.5, len(spec)), f, gain)
    return np.fft.irfft(spec, n=len(y))


def pitch_shift(clip: AudioClip, semitones: float, grain: int = 2048) -> AudioClip:
    """Shift pitch by ``semitones`` while keeping the clip length."""
    if abs(semitones) > 12:
        raise ValueError("|semitones| must be <= 12")
    if semitones == 0:
        return clip
    factor = 2.0 ** (semitones / 12.0)
    x = np.asarray(clip.samples, dtype=np.float64)
    # resample to len/factor: played at the original rate, every frequency scales by factor
    squeezed = resample_array(x, 1.0 / factor)
    y = _ola_stretch(squeezed, len(x), grain)
    if len(y) >= grain and len(squeezed) >= grain:
        y = _match_spectrum(y, squeezed, grain)
    if len(y) < len(x):
        y = np.concatenate([y, np.zeros(len(x) - len(y))])
    return AudioClip(y, clip.sample_rate, clip.source_id)


def augment_shifts(versions: int, seed: int) -> np.ndarray:
    if versions < 1:
        raise ValueError("versions must be >= 1")
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=versions)


def augment(clip: AudioClip, versions: int = 3, seed: int = 0) -> list[AudioClip]:
    return [pitch_shift(clip, s) for s in augment_shifts(versions, seed)]
