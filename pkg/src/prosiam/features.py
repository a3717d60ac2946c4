"""MFSC feature extraction: voicing detection, framing, mel filterbank, deltas, CMVN.

All frame-level quantities assume 48 kHz audio: 25 ms frames (1200
samples) advanced by 10 ms (480 samples).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import TARGET_RATE, AudioClip, resample_48k

FRAME_LEN = 1200
FRAME_HOP = 480
N_FFT = 2048
N_BANDS = 40
LOG_FLOOR = 1e-10
CMVN_EPS = 1e-8
DELTA_WINDOW = 2
SHORT_FRAMES = 300
GRID_STRIDE = 100

# voicing detector
VAD_ENERGY_DB = -40.0
VAD_PERCENTILE = 95.0
VAD_MIN_ENERGY = 1e-10
VAD_ACF_WINDOW = 1920
VAD_ACF_THRESHOLD = 0.3
VAD_F0_RANGE = (60.0, 400.0)
VAD_MIN_SEGMENT_S = 0.050
VAD_MERGE_GAP_S = 0.030


class FeatureError(ValueError):
    """Raised when features cannot be produced from the given input."""


class UtteranceTooShort(FeatureError):
    pass


@dataclass(frozen=True)
class VoicedSegment:
    start_sample: int
    end_sample: int

    def __post_init__(self):
        if not 0 <= self.start_sample < self.end_sample:
            raise ValueError(f"invalid segment [{self.start_sample}, {self.end_sample})")

    def __len__(self):
        return self.end_sample - self.start_sample


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    sample_rate: int
    n_fft: int

    @property
    def n_bands(self) -> int:
        return self.weights.shape[0]

    def centers_hz(self) -> np.ndarray:
        edges = mel_to_hz(np.linspace(0.0, hz_to_mel(self.sample_rate / 2), self.n_bands + 2))
        return edges[1:-1]


@dataclass
class MfscStack:
    values: np.ndarray  # (bands, frames, 3): static, delta, delta-delta
    frame_hop_s: float = FRAME_HOP / TARGET_RATE
    frame_len_s: float = FRAME_LEN / TARGET_RATE

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class ShortUtterance:
    values: np.ndarray  # (40, 300, 3)
    source_utterance_id: str
    start_frame: int


# ---------------------------------------------------------------- voicing


def _frame_view(x: np.ndarray, length: int, hop: int) -> np.ndarray:
    n = 1 + (x.size - length) // hop if x.size >= length else 0
    if n == 0:
        return np.empty((0, length), dtype=x.dtype)
    return np.lib.stride_tricks.as_strided(
        x, shape=(n, length), strides=(x.strides[0] * hop, x.strides[0]), writeable=False)


def normalized_acf_peak(frames: np.ndarray, min_lag: int, max_lag: int) -> np.ndarray:
    """Max of the normalized cross-correlation r(k) over lags [min_lag, max_lag].

    r(k) = sum x[n] x[n+k] / sqrt(sum x[n]^2 * sum x[n+k]^2), computed per row
    after removing the row mean.
    """
    x = frames - frames.mean(axis=1, keepdims=True)
    n = x.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, :max_lag + 1]
    csum = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x * x, axis=1)], axis=1)
    lags = np.arange(min_lag, max_lag + 1)
    head = csum[:, n - lags]              # energy of x[0 : n-k]
    tail = csum[:, n:n + 1] - csum[:, lags]  # energy of x[k : n]
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, acf[:, lags] / denom, 0.0)
    return r.max(axis=1) if r.size else np.zeros(x.shape[0])


def mask_runs(mask: np.ndarray):
    """(start, stop) index pairs of True runs."""
    padded = np.concatenate([[False], mask, [False]])
    d = np.diff(padded.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def detect_voiced_segments(clip: AudioClip) -> list[VoicedSegment]:
    """Energy + periodicity voicing detector.

    A 10 ms frame is voiced when its energy is within 40 dB of the clip's
    95th-percentile frame energy and its normalized autocorrelation has a
    peak above 0.3 for some lag in the 60-400 Hz range. Runs of voiced
    frames separated by less than 30 ms are merged and runs shorter than
    50 ms are discarded.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    sr = clip.sample_rate
    hop = int(round(0.010 * sr))
    flen = int(round(0.025 * sr))
    frames = _frame_view(x, flen, hop)
    if frames.shape[0] == 0:
        return []
    energy = np.mean(frames * frames, axis=1)
    ref = np.percentile(energy, VAD_PERCENTILE)
    if ref <= VAD_MIN_ENERGY:
        return []
    loud = (energy > VAD_MIN_ENERGY) & (10 * np.log10(np.maximum(energy, 1e-300) / ref) > VAD_ENERGY_DB)

    # periodicity on a longer window centred on each frame
    win = int(round(VAD_ACF_WINDOW * sr / TARGET_RATE))
    centers = np.arange(frames.shape[0]) * hop + flen // 2
    starts = np.clip(centers - win // 2, 0, max(x.size - win, 0))
    min_lag = int(np.floor(sr / VAD_F0_RANGE[1]))
    max_lag = int(np.ceil(sr / VAD_F0_RANGE[0]))
    voiced = np.zeros(frames.shape[0], dtype=bool)
    idx = np.flatnonzero(loud)
    if idx.size and x.size >= win and win > max_lag:
        block = np.stack([x[s:s + win] for s in starts[idx]])
        peaks = normalized_acf_peak(block, min_lag, max_lag)
        voiced[idx] = peaks > VAD_ACF_THRESHOLD

    # frame runs -> sample ranges bounded by the centres of edge frames +- hop/2
    segs = []
    for a, b in mask_runs(voiced):
        s = int(max(centers[a] - hop // 2, 0))
        e = int(min(centers[b - 1] + hop // 2, x.size))
        if e > s:
            segs.append([s, e])
    merged = []
    gap = VAD_MERGE_GAP_S * sr
    for s, e in segs:
        if merged and s - merged[-1][1] < gap:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    min_len = VAD_MIN_SEGMENT_S * sr
    return [VoicedSegment(s, e) for s, e in merged if e - s >= min_len]


# ---------------------------------------------------------------- framing


def frame_signal(clip: AudioClip, segments) -> np.ndarray:
    """Cut 1200-sample frames at a 480-sample hop inside each segment.

    Frames never cross a segment boundary; partial tail frames are dropped.
    Returns an array of shape (n_frames, 1200).
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    out = [_frame_view(x[seg.start_sample:seg.end_sample], FRAME_LEN, FRAME_HOP)
           for seg in segments]
    out = [f for f in out if f.shape[0]]
    if not out:
        return np.empty((0, FRAME_LEN))
    return np.concatenate(out, axis=0)


def n_frames_for(length: int) -> int:
    return 0 if length < FRAME_LEN else (length - FRAME_LEN) // FRAME_HOP + 1


def hamming(n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("hamming window needs n >= 2")
    k = np.arange(n)
    w = 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))
    # averaging with the mirror image makes the symmetry exact in floating point
    return 0.5 * (w + w[::-1])


# ---------------------------------------------------------------- mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(sample_rate: int = TARGET_RATE, n_fft: int = N_FFT,
                         n_bands: int = N_BANDS) -> MelFilterbank:
    """Triangular filters equally spaced in mel between 0 Hz and Nyquist.

    Each row is scaled so that its largest weight is exactly 1.
    """
    if n_fft < FRAME_LEN * sample_rate // TARGET_RATE or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two >= frame length, got {n_fft}")
    if n_bands < 1:
        raise ValueError("n_bands must be positive")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    w = np.maximum(0.0, np.minimum(rising, falling))
    peak = w.max(axis=1, keepdims=True)
    if np.any(peak <= 0):
        raise ValueError("n_fft too small: some mel filter covers no FFT bin")
    w = w / peak
    return MelFilterbank(w, sample_rate, n_fft)


def compute_mfsc(frames: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Log mel energies of already-windowed frames; returns (bands, frames)."""
    spec = np.fft.rfft(frames, fb.n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    energy = power @ fb.weights.T
    return np.log(energy + LOG_FLOOR).T


def delta(x: np.ndarray, n: int = DELTA_WINDOW) -> np.ndarray:
    """Regression delta along the last axis with edge frames replicated."""
    T = x.shape[-1]
    pad = np.concatenate([np.repeat(x[..., :1], n, axis=-1), x,
                          np.repeat(x[..., -1:], n, axis=-1)], axis=-1)
    num = np.zeros_like(x, dtype=np.float64)
    for k in range(1, n + 1):
        num += k * (pad[..., n + k:n + k + T] - pad[..., n - k:n - k + T])
    return num / (2 * sum(k * k for k in range(1, n + 1)))


def compute_deltas(static: np.ndarray) -> MfscStack:
    static = np.asarray(static, dtype=np.float64)
    if static.ndim != 2 or static.shape[1] < 5:
        raise FeatureError(f"need a (bands, T>=5) matrix, got {static.shape}")
    d1 = delta(static)
    d2 = delta(d1)
    return MfscStack(np.stack([static, d1, d2], axis=-1))


def cmvn(stack: MfscStack) -> MfscStack:
    """Per-(band, channel) mean/variance normalization over frames."""
    v = stack.values
    if v.shape[1] < 2:
        raise FeatureError("cmvn needs at least 2 frames")
    mu = v.mean(axis=1, keepdims=True)
    sd = v.std(axis=1, keepdims=True)
    return MfscStack((v - mu) / (sd + CMVN_EPS), stack.frame_hop_s, stack.frame_len_s)


def slice_short_utterances(stack: MfscStack, mode: str = "grid", count: int = 0,
                           seed: int = 0, utterance_id: str = "") -> list[ShortUtterance]:
    """Cut 300-frame windows: stride-100 grid, or ``count`` uniform random starts."""
    T = stack.n_frames
    if T < SHORT_FRAMES:
        raise UtteranceTooShort(f"utterance too short: {T} frames < {SHORT_FRAMES}")
    if mode == "grid":
        starts = range(0, T - SHORT_FRAMES + 1, GRID_STRIDE)
    elif mode == "random":
        rng = np.random.default_rng(seed)
        starts = rng.integers(0, T - SHORT_FRAMES + 1, size=count).tolist()
    else:
        raise ValueError(f"unknown slicing mode {mode!r}")
    return [ShortUtterance(stack.values[:, s:s + SHORT_FRAMES, :].copy(), utterance_id, int(s))
            for s in starts]


# ---------------------------------------------------------------- pipeline


_FILTERBANK = None


def default_filterbank() -> MelFilterbank:
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = build_mel_filterbank()
    return _FILTERBANK


def extract_mfsc_stack(clip: AudioClip, segments=None) -> MfscStack:
    """Full MFSC pipeline for one utterance: 48 kHz, voiced frames, deltas, CMVN."""
    clip = resample_48k(clip)
    if segments is None:
        segments = detect_voiced_segments(clip)
    frames = frame_signal(clip, segments)
    if frames.shape[0] < 5:
        raise UtteranceTooShort(f"utterance too short: only {frames.shape[0]} voiced frames")
    static = compute_mfsc(frames * hamming(FRAME_LEN), default_filterbank())
    return cmvn(compute_deltas(static))


# ---------------------------------------------------------------- cache file

_CACHE_MAGIC = b"MFSC"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHIH")


def write_feature_cache(path, stack: MfscStack) -> None:
    v = np.asarray(stack.values)
    header = _CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, v.shape[0], v.shape[1], v.shape[2])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_feature_cache(path) -> MfscStack:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise FeatureError(f"{path}: truncated feature cache")
    magic, version, n_bands, n_frames, n_ch = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC:
        raise FeatureError(f"{path}: not an MFSC cache")
    if version != _CACHE_VERSION:
        raise FeatureError(f"{path}: unsupported cache version {version}")
    count = n_bands * n_frames * n_ch
    body = np.frombuffer(data, dtype="<f4", count=count, offset=_CACHE_HEADER.size)
    return MfscStack(body.reshape(n_bands, n_frames, n_ch).astype(np.float32))
