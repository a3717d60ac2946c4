"""Audio loading, resampling and corpus bookkeeping."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

TARGET_RATE = 48000

# Kaiser beta 8.6 puts the stopband of the anti-aliasing filter near -85 dB.
_RESAMPLE_WINDOW = ("kaiser", 8.6)


class AudioError(ValueError):
    """Raised for unreadable or degenerate audio."""


class ManifestError(ValueError):
    """Raised for malformed manifests."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {samples.shape}")
        if samples.size == 0:
            raise AudioError("zero-length audio")
        if self.sample_rate <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_wav(path) -> AudioClip:
    """Read a PCM WAV file (16-bit int or 32-bit float) into a mono clip.

    Multichannel files are averaged to mono and integer samples are
    divided by 32768.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported encoding {data.dtype}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.size == 0:
        raise AudioError("zero-length audio")
    return AudioClip(data, int(rate))


def save_wav(path, clip: AudioClip, encoding: str = "int16") -> None:
    if encoding == "int16":
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = clip.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    wavfile.write(Path(path), clip.sample_rate, data)


def resample_48k(clip: AudioClip) -> AudioClip:
    """Windowed-sinc polyphase resampling to 48 kHz; 48 kHz input is returned as is."""
    if clip.sample_rate == TARGET_RATE:
        return clip
    ratio = Fraction(TARGET_RATE, clip.sample_rate)
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator,
                        window=_RESAMPLE_WINDOW)
    return AudioClip(out, TARGET_RATE)


class Device(str, enum.Enum):
    MICROPHONE = "microphone"
    DVR = "dvr"
    PHONE = "phone"
    OTHER = "other"


DEVICE_ORDER = {d: i for i, d in enumerate(Device)}


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    device: Device
    session: str
    path: str

    def resolve(self, root=None) -> Path:
        """Absolute audio path; relative paths are taken from ``root``."""
        p = Path(self.path)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        return p

    def to_json(self) -> str:
        d = asdict(self)
        d["device"] = self.device.value
        return json.dumps(d, sort_keys=False)


_MANIFEST_KEYS = ("utterance_id", "speaker_id", "device", "session", "path")


def _parse_entry(line: str, lineno: int) -> ManifestEntry:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    missing = [k for k in _MANIFEST_KEYS if k not in obj]
    if missing:
        raise ManifestError(f"line {lineno}: missing keys {missing}")
    extra = sorted(set(obj) - set(_MANIFEST_KEYS))
    if extra:
        raise ManifestError(f"line {lineno}: unknown keys {extra}")
    for k in _MANIFEST_KEYS:
        if not isinstance(obj[k], str):
            raise ManifestError(f"line {lineno}: {k} must be a string")
    try:
        device = Device(obj["device"])
    except ValueError:
        raise ManifestError(f"line {lineno}: unknown device {obj['device']!r}") from None
    return ManifestEntry(obj["utterance_id"], obj["speaker_id"], device,
                         obj["session"], obj["path"])


def load_manifest(path) -> list[ManifestEntry]:
    """Parse a JSON-lines manifest. Blank lines are ignored."""
    entries = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entry = _parse_entry(line, lineno)
            if entry.utterance_id in seen:
                raise ManifestError(
                    f"line {lineno}: duplicate utterance_id {entry.utterance_id!r}"
                    f" (first seen on line {seen[entry.utterance_id]})")
            seen[entry.utterance_id] = lineno
            entries.append(entry)
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def split_speakers(entries, test_fraction: float, seed: int):
    """Speaker-disjoint train/test split.

    Returns ``(train, test)`` lists, each in input order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    speakers = sorted({e.speaker_id for e in entries})
    if len(speakers) < 2:
        raise ValueError("need at least 2 distinct speakers to split")
    n_test = int(round(test_fraction * len(speakers)))
    n_test = min(max(n_test, 1), len(speakers) - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(speakers))
    test_speakers = {speakers[i] for i in order[:n_test]}
    train = [e for e in entries if e.speaker_id not in test_speakers]
    test = [e for e in entries if e.speaker_id in test_speakers]
    return train, test


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
