"""Per-utterance feature bundles used by training and evaluation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import DEVICE_ORDER, TARGET_RATE, AudioClip, Device, ManifestEntry, load_wav
from .features import (CMVN_EPS, FRAME_HOP, FRAME_LEN, GRID_STRIDE, LOG_FLOOR, N_BANDS, N_FFT,
                       SHORT_FRAMES, FeatureError, MfscStack, UtteranceTooShort,
                       detect_voiced_segments, extract_mfsc_stack, read_feature_cache)
from .prosody import FIELD_NAMES, ProsodyError, prosodic_vector, read_prosody_csv

# recorded with caches and checkpoints; a mismatch means features must be recomputed
FEATURE_PARAMS = {
    "sample_rate": TARGET_RATE, "frame_len": FRAME_LEN, "frame_hop": FRAME_HOP, "n_fft": N_FFT,
    "n_bands": N_BANDS, "log_floor": LOG_FLOOR, "cmvn_eps": CMVN_EPS,
    "short_frames": SHORT_FRAMES, "grid_stride": GRID_STRIDE, "prosody_fields": list(FIELD_NAMES),
}


@dataclass
class UtteranceFeatures:
    """MFSC stack plus prosodic vector of one utterance.

    ``stack`` is (40, T, 3) float32 with T >= 300.
    """

    utterance_id: str
    speaker_id: str
    device: Device
    stack: np.ndarray
    prosody: np.ndarray

    def __post_init__(self):
        if self.stack.ndim != 3 or self.stack.shape[1] < SHORT_FRAMES:
            raise UtteranceTooShort(f"{self.utterance_id}: utterance too short for a "
                                    f"{SHORT_FRAMES}-frame window")
        if self.prosody.shape != (len(FIELD_NAMES),) or not np.all(np.isfinite(self.prosody)):
            raise ProsodyError(f"{self.utterance_id}: prosodic vector incomplete")

    @property
    def n_frames(self) -> int:
        return self.stack.shape[1]

    @property
    def grid_starts(self) -> list[int]:
        return list(range(0, self.n_frames - SHORT_FRAMES + 1, GRID_STRIDE))

    def window(self, start: int) -> np.ndarray:
        return self.stack[:, start:start + SHORT_FRAMES]

    def grid_windows(self) -> np.ndarray:
        return np.stack([self.window(s) for s in self.grid_starts])

    @property
    def device_order(self) -> int:
        return DEVICE_ORDER[self.device]


def features_from_clip(entry: ManifestEntry, clip: AudioClip) -> UtteranceFeatures:
    segments = detect_voiced_segments(clip)
    if not segments:
        raise UtteranceTooShort("no voiced content")
    stack = extract_mfsc_stack(clip, segments)
    pv = prosodic_vector(clip, segments)
    return UtteranceFeatures(entry.utterance_id, entry.speaker_id, entry.device,
                             stack.values.astype(np.float32), pv.values)


def _extract(job):
    entry, source = job
    try:
        clip = load_wav(source) if isinstance(source, (str, Path)) else source
        return features_from_clip(entry, clip), None
    except (OSError, FeatureError, ProsodyError, ValueError) as exc:
        msg = str(exc)
        if not msg.startswith(f"{entry.utterance_id}:"):
            msg = f"{entry.utterance_id}: {msg}"
        return None, msg


def build_dataset(entries, sources, jobs: int = 1):
    """Extract features for each entry; ``sources`` holds paths or AudioClips.

    Returns ``(features, skipped)`` where ``skipped`` lists "id: reason"
    strings. Output order follows ``entries`` whatever ``jobs`` is.
    """
    work = list(zip(entries, sources))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract, work, chunksize=4))
    else:
        results = [_extract(w) for w in work]
    feats = [f for f, _ in results if f is not None]
    skipped = [s for _, s in results if s is not None]
    return feats, skipped


def load_cached_dataset(entries, cache_dir):
    """Rebuild features from ``<id>.mfsc`` caches and ``prosody.csv`` written by the CLI."""
    cache_dir = Path(cache_dir)
    rows = read_prosody_csv(cache_dir / "prosody.csv")
    feats, skipped = [], []
    for e in entries:
        path = cache_dir / f"{e.utterance_id}.mfsc"
        if e.utterance_id not in rows or not path.exists():
            skipped.append(f"{e.utterance_id}: not in feature cache")
            continue
        try:
            stack: MfscStack = read_feature_cache(path)
            feats.append(UtteranceFeatures(e.utterance_id, e.speaker_id, e.device,
                                           stack.values.astype(np.float32),
                                           rows[e.utterance_id].values.astype(np.float64)))
        except (FeatureError, ProsodyError) as exc:
            skipped.append(f"{e.utterance_id}: {exc}")
    return feats, skipped


def speaker_labels(feats) -> list[str]:
    return sorted({f.speaker_id for f in feats})
