"""Empirical mode decomposition and Hilbert spectral features (HHT).

Each 1-second frame is split into intrinsic mode functions by sifting; every
IMF is turned into an analytic signal whose amplitude and instantaneous
frequency are summarised as a mean normalised frequency (MNF) and a mean
amplitude. Those (MNF, amplitude) pairs over all frames form the HHT
spectrogram, which the SVM path bins into a 20-band vector.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .audio_io import AudioClip, resample

HHT_RATE = 32000
MAX_IMFS = 10
SD_THRESHOLD = 0.2
MAX_SIFT_ITERS = 10
AMP_EPS = 1e-6
EDGE_TRIM = 0.01


class InsufficientExtrema(Exception):
    """The signal has too few extrema to build upper and lower envelopes."""


@dataclass(frozen=True)
class ImfSet:
    imfs: np.ndarray  # (M, N)
    residue: np.ndarray
    source_frame: int = 0

    @property
    def n_imfs(self) -> int:
        return self.imfs.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.imfs.sum(axis=0) + self.residue


@dataclass(frozen=True)
class AnalyticTrack:
    amplitude: np.ndarray  # length N
    inst_freq: np.ndarray  # length N - 1, Hz
    imf_index: int = 0


@dataclass(frozen=True)
class HhtFrameFeature:
    mnf: np.ndarray
    mean_amp: np.ndarray
    frame_time_s: float = 0.0


@dataclass(frozen=True)
class HhtSpectrogram:
    frames: list[HhtFrameFeature]
    f_s: int

    def __len__(self) -> int:
        return len(self.frames)


def find_extrema(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of interior local maxima and minima; a plateau counts once, at
    its first sample."""
    s = np.sign(np.diff(x))
    nz = np.flatnonzero(s)
    if len(nz) < 2:
        return np.array([], dtype=int), np.array([], dtype=int)
    # back-fill flat steps with the next nonzero slope
    fill = nz[np.searchsorted(nz, np.arange(len(s)), side="left").clip(max=len(nz) - 1)]
    s = s[fill]
    turn = s[:-1] != s[1:]
    idx = np.flatnonzero(turn) + 1
    maxima = idx[s[idx - 1] > 0]
    minima = idx[s[idx - 1] < 0]
    return maxima, minima


def count_zero_crossings(x: np.ndarray) -> int:
    s = np.sign(x)
    s = s[s != 0]
    return int(np.count_nonzero(s[:-1] != s[1:]))


def is_imf_counts(x: np.ndarray) -> bool:
    """Extrema and zero-crossing counts equal or differ by one."""
    mx, mn = find_extrema(x)
    return abs(len(mx) + len(mn) - count_zero_crossings(x)) <= 1


def _mirrored_spline(idx: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    last = n - 1
    left = -idx[:2][::-1]
    right = 2 * last - idx[-2:][::-1]
    knots = np.concatenate([left, idx, right])
    values = np.concatenate([x[idx[:2][::-1]], x[idx], x[idx[-2:][::-1]]])
    return CubicSpline(knots, values, bc_type="natural")(np.arange(n))


def envelope_mean(x: np.ndarray) -> np.ndarray:
    """Mean of the upper and lower cubic-spline envelopes.

    The two outermost maxima (minima) are mirrored about each edge before
    fitting so the splines do not swing freely near the ends.
    """
    x = np.asarray(x, dtype=np.float64)
    maxima, minima = find_extrema(x)
    if len(maxima) < 2 or len(minima) < 2:
        raise InsufficientExtrema(f"{len(maxima)} maxima, {len(minima)} minima")
    upper = _mirrored_spline(maxima, x, len(x))
    lower = _mirrored_spline(minima, x, len(x))
    return 0.5 * (upper + lower)


def sift(x: np.ndarray, sd_threshold: float = SD_THRESHOLD, max_iters: int = MAX_SIFT_ITERS) -> np.ndarray:
    """Extract one IMF by repeated envelope-mean subtraction.

    Stops when the Cauchy-type SD between successive iterates drops below
    ``sd_threshold`` or after ``max_iters`` iterations.
    """
    h = np.asarray(x, dtype=np.float64)
    h = h - envelope_mean(h)
    for _ in range(max_iters - 1):
        try:
            m = envelope_mean(h)
        except InsufficientExtrema:
            break
        h_new = h - m
        denom = np.sum(h ** 2)
        sd = np.sum(m ** 2) / denom if denom > 0 else 0.0
        h = h_new
        if sd < sd_threshold:
            break
    return h


def is_monotone(x: np.ndarray) -> bool:
    d = np.diff(x)
    return bool(np.all(d >= 0) or np.all(d <= 0))


def decompose(frame: np.ndarray, max_imfs: int = MAX_IMFS, sd_threshold: float = SD_THRESHOLD,
              max_iters: int = MAX_SIFT_ITERS, amp_eps: float = AMP_EPS,
              source_frame: int = 0) -> ImfSet:
    x = np.asarray(frame, dtype=np.float64)
    n = len(x)
    peak = np.max(np.abs(x)) if n else 0.0
    imfs: list[np.ndarray] = []
    r = x.copy()
    while len(imfs) < max_imfs and peak > 0:
        if is_monotone(r) or np.max(np.abs(r)) < amp_eps * peak:
            break
        try:
            c = sift(r, sd_threshold, max_iters)
        except InsufficientExtrema:
            break
        imfs.append(c)
        r = r - c
    stacked = np.array(imfs) if imfs else np.zeros((0, n))
    return ImfSet(stacked, r, source_frame)


def _analytic_signal(x: np.ndarray) -> np.ndarray:
    # zero the negative frequencies, double the positive ones
    n = len(x)
    weights = np.zeros(n)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[n // 2] = 1.0
        weights[1:n // 2] = 2.0
    else:
        weights[1:(n + 1) // 2] = 2.0
    return np.fft.ifft(np.fft.fft(x) * weights)


def hilbert_transform(x: np.ndarray) -> np.ndarray:
    return _analytic_signal(np.asarray(x, dtype=np.float64)).imag


def analytic(imf: np.ndarray, f_s: float, imf_index: int = 0) -> AnalyticTrack:
    """Instantaneous amplitude and frequency of one IMF."""
    x = np.asarray(imf, dtype=np.float64)
    if len(x) < 4:
        raise ValueError("analytic needs at least 4 samples")
    z = _analytic_signal(x)
    phase = np.unwrap(np.angle(z))
    freq = f_s / (2 * np.pi) * np.diff(phase)
    return AnalyticTrack(np.abs(z), np.clip(freq, 0.0, f_s / 2), imf_index)


def track_stats(track: AnalyticTrack, edge_trim: float = EDGE_TRIM) -> tuple[float, float]:
    """(MNF, mean amplitude) of one track, ignoring ``edge_trim`` of each end."""
    n = len(track.amplitude)
    k = int(np.floor(edge_trim * n))
    amp = track.amplitude[k:n - k]
    # f(n) pairs with A(n): drop the last amplitude to align with the differenced phase
    a = track.amplitude[:-1][k:n - 1 - k]
    f = track.inst_freq[k:n - 1 - k]
    power = a ** 2
    total = power.sum()
    mnf = float(np.dot(f, power) / total) if total > 0 else 0.0
    return mnf, float(amp.mean()) if len(amp) else 0.0


def frame_features(imf_set: ImfSet, f_s: float, frame_time_s: float = 0.0) -> HhtFrameFeature:
    stats = [track_stats(analytic(c, f_s, j)) for j, c in enumerate(imf_set.imfs)]
    mnf = np.array([s[0] for s in stats])
    amp = np.array([s[1] for s in stats])
    return HhtFrameFeature(mnf, amp, frame_time_s)


def _frame_feature(args) -> HhtFrameFeature:
    i, frame, f_s = args
    return frame_features(decompose(frame, source_frame=i), f_s, frame_time_s=float(i))


def hht_spectrogram(clip: AudioClip, workers: int = 1) -> HhtSpectrogram:
    """One ``HhtFrameFeature`` per whole second of audio at 32 kHz."""
    if clip.sample_rate != HHT_RATE:
        clip = resample(clip, HHT_RATE)
    n_frames = len(clip.samples) // HHT_RATE
    if n_frames < 1:
        raise ValueError(f"clip of {clip.duration:.3f} s is shorter than one 1-s frame")
    x = np.asarray(clip.samples, dtype=np.float64)
    jobs = [(i, x[i * HHT_RATE:(i + 1) * HHT_RATE], HHT_RATE) for i in range(n_frames)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            frames = list(pool.map(_frame_feature, jobs))
    else:
        frames = [_frame_feature(j) for j in jobs]
    return HhtSpectrogram(frames, HHT_RATE)


def hht_band_vector(spec: HhtSpectrogram, fmax: float = 6000.0, bins: int = 6000,
                    out_bands: int = 20) -> np.ndarray:
    """Bin every frame's (MNF, amplitude) pairs on a ``fmax/bins`` Hz grid,
    average over frames, then average groups of bins down to ``out_bands``."""
    if len(spec.frames) == 0:
        raise ValueError("empty HHT spectrogram")
    if fmax > spec.f_s / 2:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {spec.f_s / 2}")
    if bins % out_bands:
        raise ValueError(f"{bins} bins not divisible into {out_bands} bands")
    mnf = np.concatenate([f.mnf for f in spec.frames])
    amp = np.concatenate([f.mean_amp for f in spec.frames])
    keep = mnf < fmax
    idx = np.floor(mnf[keep] * bins / fmax).astype(int)
    hist = np.bincount(idx, weights=amp[keep], minlength=bins)[:bins] / len(spec.frames)
    return hist.reshape(out_bands, -1).mean(axis=1)
