"""Prosodic feature vector: durations, F0 statistics, jitter and shimmer.

The 18 features are laid out in the order given by ``FIELD_NAMES``; the MLP
input layout depends on it, so the order is fixed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .audio import AudioClip, resample_48k
from .features import mask_runs, detect_voiced_segments

FIELD_NAMES = (
    "d1", "d2", "d3",
    "f1", "f2", "f3", "f4", "f5", "f6",
    "j1", "j2", "j3", "j4",
    "s1", "s2", "s3", "s4", "s5",
)

PITCH_HOP_S = 0.010
PITCH_WINDOW_S = 0.040
F0_MIN = 60.0
F0_MAX = 400.0
VOICING_THRESHOLD = 0.45
OCTAVE_COST = 0.03
OCTAVE_JUMP_COST = 1.0
# second pass: penalty per octave of distance from the utterance median F0
REFERENCE_COST = 0.5
# voiced runs shorter than this (frames) are treated as unvoiced
MIN_RUN_FRAMES = 3
WORD_GAP_S = 0.300
MAX_PERIOD_RATIO = 1.3
MIN_CYCLES = 3


class ProsodyError(ValueError):
    pass


class NoVoicedContent(ProsodyError):
    pass


class InsufficientCycles(ProsodyError):
    pass


@dataclass
class PitchTrack:
    f0: np.ndarray        # Hz, 0 where unvoiced
    voiced: np.ndarray    # bool
    hop_s: float = PITCH_HOP_S

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.f0.size) * self.hop_s


@dataclass
class CycleSequence:
    periods: np.ndarray      # seconds
    amplitudes: np.ndarray

    def __post_init__(self):
        self.periods = np.asarray(self.periods, dtype=np.float64)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        if self.periods.shape != self.amplitudes.shape:
            raise ValueError("periods and amplitudes must have equal length")

    def __len__(self):
        return self.periods.size

    @property
    def duration(self) -> float:
        return float(self.periods.sum())


@dataclass
class ProsodicVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(FIELD_NAMES),):
            raise ValueError(f"expected {len(FIELD_NAMES)} values, got {self.values.shape}")

    def as_dict(self) -> dict:
        return dict(zip(FIELD_NAMES, self.values.tolist()))

    def __len__(self):
        return self.values.size


# ---------------------------------------------------------------- pitch


def _parabolic(y_m, y_0, y_p):
    """Offset and height of the vertex through three equally spaced points."""
    denom = y_m - 2 * y_0 + y_p
    if denom == 0:
        return 0.0, y_0
    off = 0.5 * (y_m - y_p) / denom
    return off, y_0 - 0.25 * (y_m - y_p) * off


def _pitch_candidates(frames: np.ndarray, sr: int):
    """Per-frame list of (f0, strength) local maxima of the window-corrected ACF."""
    n = frames.shape[1]
    win = np.hanning(n + 2)[1:-1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    wspec = np.fft.rfft(win, nfft)
    racw = np.fft.irfft(wspec * np.conj(wspec), nfft)[:n]
    racw /= racw[0]
    x = (frames - frames.mean(axis=1, keepdims=True)) * win
    spec = np.fft.rfft(x, nfft, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, :n]
    min_lag = int(np.floor(sr / F0_MAX))
    max_lag = min(int(np.ceil(sr / F0_MIN)), n // 2)
    out = []
    for row in ac:
        if row[0] <= 0:
            out.append([])
            continue
        r = row[:max_lag + 2] / row[0] / racw[:max_lag + 2]
        seg = r[min_lag - 1:max_lag + 2]
        peaks = np.flatnonzero((seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])) + min_lag
        cands = []
        for k in peaks:
            off, height = _parabolic(r[k - 1], r[k], r[k + 1])
            lag = k + off
            f0 = sr / lag
            if F0_MIN <= f0 <= F0_MAX:
                cands.append((f0, min(float(height), 1.0)))
        out.append(cands)
    return out


def _best_path(run_cands, reference=None):
    """Viterbi path through per-frame candidates.

    Local score is the candidate strength plus a small preference for higher
    F0, minus REFERENCE_COST per octave away from ``reference`` when given;
    moving between frames costs OCTAVE_JUMP_COST per octave of change.
    """
    def local(f, strength):
        score = strength + OCTAVE_COST * np.log2(f / F0_MIN)
        if reference is not None:
            score -= REFERENCE_COST * abs(np.log2(f / reference))
        return score

    scores = [np.array([local(*c) for c in cands]) for cands in run_cands]
    logf = [np.log2([c[0] for c in cands]) for cands in run_cands]
    total = scores[0]
    back = []
    for t in range(1, len(run_cands)):
        trans = total[None, :] - OCTAVE_JUMP_COST * np.abs(logf[t][:, None] - logf[t - 1][None, :])
        back.append(np.argmax(trans, axis=1))
        total = scores[t] + trans.max(axis=1)
    path = [int(np.argmax(total))]
    for b in reversed(back):
        path.append(int(b[path[-1]]))
    path.reverse()
    return [run_cands[t][k] for t, k in enumerate(path)]


def estimate_pitch(clip: AudioClip, segments) -> PitchTrack:
    """Autocorrelation F0 track at a 10 ms hop, analysed only inside ``segments``.

    Each frame uses a 40 ms Hann window. Candidates are local maxima of the
    autocorrelation normalized by the window's own autocorrelation, refined
    by parabolic interpolation. A frame is voiced when its strongest
    candidate exceeds 0.45 and it belongs to a run of at least three such
    frames; within each run of voiced frames the F0 values
    are chosen jointly so that jumps between adjacent frames are penalized,
    which suppresses octave errors. A second pass repeats the path search
    with a penalty on distance from the median F0 of the first pass.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    sr = clip.sample_rate
    hop = int(round(PITCH_HOP_S * sr))
    n_win = int(round(PITCH_WINDOW_S * sr))
    n_frames = int(np.ceil(x.size / hop))
    f0 = np.zeros(n_frames)
    inside = np.zeros(n_frames, dtype=bool)
    centers = np.arange(n_frames) * hop
    for seg in segments:
        inside |= (centers >= seg.start_sample) & (centers < seg.end_sample)
    idx = np.flatnonzero(inside)
    if idx.size == 0 or x.size < n_win:
        return PitchTrack(f0, f0 > 0)
    starts = np.clip(centers[idx] - n_win // 2, 0, x.size - n_win)
    frames = np.stack([x[s:s + n_win] for s in starts])
    cands = [[] for _ in range(n_frames)]
    for i, c in zip(idx, _pitch_candidates(frames, sr)):
        cands[i] = c
    voiced = np.array([bool(c) and max(s for _, s in c) >= VOICING_THRESHOLD for c in cands])
    runs = [(a, b) for a, b in mask_runs(voiced) if b - a >= MIN_RUN_FRAMES]
    for a, b in runs:
        for i, (f, _) in zip(range(a, b), _best_path(cands[a:b])):
            f0[i] = f
    if runs:
        # whole runs can lock onto a harmonic; redo them anchored to the median
        reference = float(np.median(f0[f0 > 0]))
        for a, b in runs:
            for i, (f, _) in zip(range(a, b), _best_path(cands[a:b], reference)):
                f0[i] = f
    return PitchTrack(f0, f0 > 0)


# ---------------------------------------------------------------- cycles


def _refine_peak(y: np.ndarray, k: int) -> tuple[float, float]:
    if 0 < k < y.size - 1 and y[k] >= y[k - 1] and y[k] >= y[k + 1]:
        off, h = _parabolic(y[k - 1], y[k], y[k + 1])
        return k + off, h
    return float(k), float(y[k])


def _voiced_runs(track: PitchTrack):
    v = np.concatenate([[False], track.voiced, [False]]).astype(np.int8)
    d = np.diff(v)
    return zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1))


def _mark_cycles(y: np.ndarray, start: int, stop: int, period_at):
    """Successive positive waveform peaks, each searched near one period ahead."""
    p0 = period_at(start)
    first = start + int(np.argmax(y[start:min(start + int(np.ceil(p0)), stop)]))
    marks = [_refine_peak(y, first)[0]]
    k = first
    while True:
        p = period_at(k)
        lo = k + int(np.floor(0.7 * p))
        hi = k + int(np.ceil(1.3 * p)) + 1
        if hi > stop:
            break
        k = lo + int(np.argmax(y[lo:hi]))
        marks.append(_refine_peak(y, k)[0])
    return np.asarray(marks)


def _split_on_irregular(periods: np.ndarray, amps: np.ndarray):
    """Break a cycle run where consecutive periods differ by more than a factor 1.3."""
    bad = np.flatnonzero(np.maximum(periods[1:] / periods[:-1],
                                    periods[:-1] / periods[1:]) > MAX_PERIOD_RATIO)
    cuts = np.concatenate([[0], bad + 1, [periods.size]])
    for a, b in zip(cuts[:-1], cuts[1:]):
        yield periods[a:b], amps[a:b]


def extract_cycles(clip: AudioClip, track: PitchTrack) -> list[CycleSequence]:
    """Glottal cycle periods and peak amplitudes for each voiced run of ``track``.

    Cycle ``i`` spans two consecutive peak marks; its period is the interval
    between them and its amplitude the largest absolute sample inside it.
    Runs yielding fewer than three cycles are dropped.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    sr = clip.sample_rate
    hop = int(round(track.hop_s * sr))
    out = []
    for a, b in _voiced_runs(track):
        start = max(a * hop - hop // 2, 0)
        stop = min((b - 1) * hop + hop // 2 + 1, x.size)
        if stop - start < 2:
            continue
        seg = x[start:stop]
        y = seg if seg.max() >= -seg.min() else -seg
        f0_run = track.f0[a:b]

        def period_at(k, _a=a, _start=start, _f0=f0_run):
            i = int(round((k + _start) / hop)) - _a
            return sr / _f0[min(max(i, 0), _f0.size - 1)]

        marks = _mark_cycles(y, 0, y.size, period_at)
        if marks.size < MIN_CYCLES + 1:
            continue
        periods = np.diff(marks) / sr
        bounds = np.round(marks).astype(int)
        absy = np.abs(seg)
        amps = np.array([absy[bounds[i]:max(bounds[i + 1], bounds[i] + 1)].max()
                         for i in range(periods.size)])
        ok = (periods >= 1 / F0_MAX / MAX_PERIOD_RATIO) & (periods <= MAX_PERIOD_RATIO / F0_MIN)
        ok &= amps > 0
        for i, j in mask_runs(ok):
            for p, am in _split_on_irregular(periods[i:j], amps[i:j]):
                if p.size >= MIN_CYCLES:
                    out.append(CycleSequence(p, am))
    return out


# ---------------------------------------------------------------- perturbation


def _local_mean_dev(v: np.ndarray, k: int) -> float:
    """Mean |v_i - mean of the k-point window centred on i| over full windows."""
    if v.size < k:
        return np.nan
    h = k // 2
    win = np.lib.stride_tricks.sliding_window_view(v, k).mean(axis=1)
    return float(np.mean(np.abs(v[h:v.size - h] - win)))


def jitter_indices(periods) -> np.ndarray:
    """(absolute jitter [s], relative jitter %, RAP %, PPQ5 %) for one cycle run.

    Indices that need more cycles than available are NaN.
    """
    T = np.asarray(periods, dtype=np.float64)
    if T.size < 2:
        return np.full(4, np.nan)
    mean_t = T.mean()
    j1 = float(np.mean(np.abs(np.diff(T))))
    return np.array([j1, 100 * j1 / mean_t,
                     100 * _local_mean_dev(T, 3) / mean_t,
                     100 * _local_mean_dev(T, 5) / mean_t])


def shimmer_indices(amplitudes) -> np.ndarray:
    """(shimmer dB, relative shimmer %, APQ3 %, APQ5 %, APQ11 %) for one cycle run."""
    A = np.asarray(amplitudes, dtype=np.float64)
    if A.size < 2:
        return np.full(5, np.nan)
    mean_a = A.mean()
    s1 = float(np.mean(np.abs(20 * np.log10(A[1:] / A[:-1]))))
    s2 = 100 * float(np.mean(np.abs(np.diff(A)))) / mean_a
    return np.array([s1, s2] + [100 * _local_mean_dev(A, k) / mean_a for k in (3, 5, 11)])


def _weighted(rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = np.empty(rows.shape[1])
    for j in range(rows.shape[1]):
        ok = ~np.isnan(rows[:, j])
        out[j] = np.average(rows[ok, j], weights=weights[ok]) if ok.any() else np.nan
    return out


def jitter_features(cycles) -> np.ndarray:
    """Duration-weighted jitter indices over all cycle runs."""
    cycles = list(cycles)
    if not any(len(c) >= 5 for c in cycles):
        raise InsufficientCycles("jitter needs a run of at least 5 cycles")
    rows = np.array([jitter_indices(c.periods) for c in cycles])
    return _weighted(rows, np.array([c.duration for c in cycles]))


def shimmer_features(cycles) -> np.ndarray:
    """Duration-weighted shimmer indices over all cycle runs."""
    cycles = list(cycles)
    if not any(len(c) >= 11 for c in cycles):
        raise InsufficientCycles("shimmer needs a run of at least 11 cycles")
    rows = np.array([shimmer_indices(c.amplitudes) for c in cycles])
    return _weighted(rows, np.array([c.duration for c in cycles]))


# ---------------------------------------------------------------- durations / F0


def duration_features(segments, clip_len: int, sample_rate: int = 48000):
    """(frames per pseudo-word, mean voiced length s, mean internal pause s).

    Pseudo-words are runs of voiced segments whose separating gaps are
    shorter than 300 ms.
    """
    segs = sorted(segments, key=lambda s: s.start_sample)
    if not segs:
        return 0.0, 0.0, 0.0
    gap_limit = WORD_GAP_S * sample_rate
    hop = PITCH_HOP_S * sample_rate
    words = [[segs[0]]]
    for seg in segs[1:]:
        if seg.start_sample - words[-1][-1].end_sample < gap_limit:
            words[-1].append(seg)
        else:
            words.append([seg])
    frames = [(w[-1].end_sample - w[0].start_sample) / hop for w in words]
    voiced = [len(s) / sample_rate for s in segs]
    gaps = [(b.start_sample - a.end_sample) / sample_rate
            for w in words for a, b in zip(w[:-1], w[1:])]
    return float(np.mean(frames)), float(np.mean(voiced)), float(np.mean(gaps)) if gaps else 0.0


def f0_features(track: PitchTrack) -> np.ndarray:
    """(mean, max, min, range, endpoint slope, regression slope) over voiced frames."""
    v = track.voiced & (track.f0 > 0)
    if not v.any():
        raise NoVoicedContent("no voiced frames in pitch track")
    f = track.f0[v]
    t = track.times[v]
    f_max, f_min = float(f.max()), float(f.min())
    if f.size > 1:
        pseudo = (f[-1] - f[0]) / (t[-1] - t[0])
        tc = t - t.mean()
        slope = float(np.dot(tc, f - f.mean()) / np.dot(tc, tc))
    else:
        pseudo = slope = 0.0
    return np.array([f.mean(), f_max, f_min, f_max - f_min, pseudo, slope])


def prosodic_vector(clip: AudioClip, segments=None) -> ProsodicVector:
    clip = resample_48k(clip)
    if segments is None:
        segments = detect_voiced_segments(clip)
    if not segments:
        raise NoVoicedContent("no voiced content")
    track = estimate_pitch(clip, segments)
    if not track.voiced.any():
        raise NoVoicedContent("no voiced content")
    cycles = extract_cycles(clip, track)
    d = duration_features(segments, len(clip), clip.sample_rate)
    values = np.concatenate([d, f0_features(track), jitter_features(cycles),
                             shimmer_features(cycles)])
    if not np.all(np.isfinite(values)):
        raise ProsodyError("non-finite prosodic feature")
    return ProsodicVector(values)


# ---------------------------------------------------------------- CSV cache


def write_prosody_csv(path, rows) -> None:
    """``rows`` is an iterable of (utterance_id, ProsodicVector)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("utterance_id",) + FIELD_NAMES)
        for uid, pv in rows:
            w.writerow([uid] + [repr(float(v)) for v in pv.values])


def read_prosody_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header) != ("utterance_id",) + FIELD_NAMES:
            raise ProsodyError(f"{path}: unexpected header {header}")
        return {row[0]: ProsodicVector([float(v) for v in row[1:]]) for row in r}
