"""Synthetic multi-speaker, multi-device corpus for desk-scale experiments.

Each speaker is a glottal pulse source (own base F0, jitter and shimmer
levels, speaking rate) driving vowel formant filters scaled by a
speaker-specific vocal-tract factor and coloured by a fixed speaker
resonance. An utterance is a sequence of pseudo-words made of syllables.
Each utterance is "recorded" simultaneously on every requested device;
devices apply their own channel filter, noise floor and (for the phone)
soft clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .audio import TARGET_RATE, AudioClip, Device, ManifestEntry

F0_LOW = 80.0
F0_HIGH = 300.0
MIN_F0_GAP = 16.0
MIN_DURATION_S = 6.0

# (F1, F2, F3) in Hz for a reference vocal tract
_VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [300, 870, 2240],
    [530, 1840, 2480],
    [570, 840, 2410],
    [660, 1720, 2410],
], dtype=np.float64)

_DEVICE_NOISE_DB = {
    Device.MICROPHONE: -60.0,
    Device.DVR: -40.0,
    Device.PHONE: -35.0,
    Device.OTHER: -45.0,
}


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    tract_scale: float
    resonance_hz: float
    jitter: float        # relative period perturbation (std)
    shimmer: float       # relative amplitude perturbation (std)
    syllable_s: float
    tilt: float          # one-pole source lowpass coefficient


def _speaker_f0s(n: int, rng: np.random.Generator) -> np.ndarray:
    width = (F0_HIGH - F0_LOW) / n
    if width < MIN_F0_GAP:
        raise ValueError(f"at most {int((F0_HIGH - F0_LOW) // MIN_F0_GAP)} speakers can keep "
                         f"{MIN_F0_GAP:g} Hz F0 separation")
    slots = F0_LOW + width * (np.arange(n) + 0.5)
    slack = (width - MIN_F0_GAP) / 2
    return rng.permutation(slots + rng.uniform(-slack, slack, size=n))


def make_speakers(n_speakers: int, seed: int, f0s=None) -> list[SpeakerProfile]:
    rng = np.random.default_rng([seed, 0])
    drawn = _speaker_f0s(n_speakers, rng)
    if f0s is None:
        f0s = drawn
    elif len(f0s) != n_speakers:
        raise ValueError("need one F0 per speaker")
    out = []
    for i, f0 in enumerate(f0s):
        out.append(SpeakerProfile(
            speaker_id=f"spk{i:03d}",
            f0=float(f0),
            tract_scale=float(rng.uniform(0.85, 1.2)),
            resonance_hz=float(rng.uniform(3500, 7000)),
            jitter=float(rng.uniform(0.002, 0.012)),
            shimmer=float(rng.uniform(0.02, 0.08)),
            syllable_s=float(rng.uniform(0.16, 0.28)),
            tilt=float(rng.uniform(0.85, 0.97)),
        ))
    return out


def _resonator(freq: float, bw: float, sr: int):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unity gain at DC


def _syllable(spk: SpeakerProfile, f0_start: float, f0_end: float, dur: float,
              vowel: np.ndarray, rng: np.random.Generator, sr: int) -> np.ndarray:
    n = int(dur * sr)
    # glottal pulse times with per-cycle jitter, amplitudes with shimmer
    t, times, amps = 0.0, [], []
    while t < dur:
        f = f0_start + (f0_end - f0_start) * t / dur
        period = (1.0 / f) * (1.0 + spk.jitter * rng.standard_normal())
        times.append(t)
        amps.append(max(0.2, 1.0 + spk.shimmer * rng.standard_normal()))
        t += period
    src = np.zeros(n)
    idx = np.minimum((np.asarray(times) * sr).astype(int), n - 1)
    np.add.at(src, idx, amps)
    src = lfilter([1 - spk.tilt], [1, -spk.tilt], src)
    src = lfilter([1 - spk.tilt], [1, -spk.tilt], src)
    y = src
    for k, fk in enumerate(vowel * spk.tract_scale):
        b, a = _resonator(fk, 60 + 40 * k, sr)
        y = lfilter(b, a, y)
    b, a = _resonator(spk.resonance_hz, 400, sr)
    y = 0.7 * y + 0.3 * lfilter(b, a, y)
    ramp = min(int(0.015 * sr), n // 4)
    env = np.ones(n)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[n - ramp:] = np.linspace(1, 0, ramp)
    return y * env


def synthesize_utterance(spk: SpeakerProfile, duration: float, seed,
                         sr: int = TARGET_RATE) -> np.ndarray:
    """Clean (device-free) speech for one utterance, peak-normalized to 0.5."""
    rng = np.random.default_rng(seed)
    n = int(duration * sr)
    out = np.zeros(n)
    offset = 1.0 + 0.005 * rng.standard_normal()
    t = 0.1
    while True:
        n_syl = int(rng.integers(2, 5))
        word_f0 = spk.f0 * offset * (1.0 + 0.015 * rng.standard_normal())
        for s in range(n_syl):
            dur = spk.syllable_s * rng.uniform(0.8, 1.25)
            if t + dur > duration - 0.1:
                break
            rise = 0.06 * rng.standard_normal()
            f_mid = word_f0 * (1.0 + 0.015 * ((n_syl - 1) / 2 - s))
            syl = _syllable(spk, f_mid * (1.0 - rise / 2), f_mid * (1.0 + rise / 2), dur,
                            _VOWELS[rng.integers(len(_VOWELS))], rng, sr)
            i0 = int(t * sr)
            out[i0:i0 + syl.size] += syl[:n - i0]
            t += dur + rng.uniform(0.04, 0.09)
        else:
            t += rng.uniform(0.32, 0.5)
            if t < duration - 0.1:
                continue
        break
    peak = np.max(np.abs(out))
    return 0.5 * out / peak if peak > 0 else out


def apply_device(x: np.ndarray, device: Device, seed, sr: int = TARGET_RATE) -> np.ndarray:
    rng = np.random.default_rng(seed)
    y = x.copy()
    if device in (Device.DVR, Device.PHONE):
        sos = butter(4, [300, 3400], btype="bandpass", fs=sr, output="sos")
        y = sosfilt(sos, y)
        y *= 0.5 / max(np.max(np.abs(y)), 1e-12)
    elif device is Device.OTHER:
        sos = butter(2, 6000, btype="lowpass", fs=sr, output="sos")
        y = sosfilt(sos, y)
    y = y + 10 ** (_DEVICE_NOISE_DB[device] / 20) * rng.standard_normal(y.size)
    if device is Device.PHONE:
        y = 0.4 * np.tanh(y / 0.4)
    return y


def generate_synthetic_corpus(n_speakers: int, utterances_per_speaker: int, devices,
                              seed: int, duration: float = 8.0, sample_rate: int = TARGET_RATE,
                              f0s=None):
    """Return ``(clips, manifest)`` with one clip per (speaker, utterance, device).

    Manifest paths are ``<utterance_id>.wav`` relative names. ``f0s``
    overrides the drawn base F0 of each speaker.
    """
    devices = [Device(d) for d in devices]
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    if utterances_per_speaker < 1 or not devices:
        raise ValueError("need at least one utterance and one device")
    if duration < MIN_DURATION_S:
        raise ValueError(f"utterance duration must be >= {MIN_DURATION_S} s")
    if len(set(devices)) != len(devices):
        raise ValueError("duplicate device")
    clips, manifest = [], []
    for si, spk in enumerate(make_speakers(n_speakers, seed, f0s)):
        for u in range(utterances_per_speaker):
            clean = synthesize_utterance(spk, duration, [seed, 1, si, u], sample_rate)
            for di, dev in enumerate(devices):
                uid = f"{spk.speaker_id}_u{u:02d}_{dev.value}"
                y = apply_device(clean, dev, [seed, 2, si, u, di], sample_rate)
                clips.append(AudioClip(y, sample_rate))
                manifest.append(ManifestEntry(uid, spk.speaker_id, dev,
                                              f"session{u % 2 + 1}", f"{uid}.wav"))
    return clips, manifest
