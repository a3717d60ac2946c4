import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from prosiam.audio import (AudioClip, AudioError, Device, ManifestEntry, ManifestError,
                           load_manifest, load_wav, resample_48k, save_wav, split_speakers,
                           write_manifest)
from prosiam.features import detect_voiced_segments
from prosiam.prosody import estimate_pitch
from prosiam.synth import generate_synthetic_corpus


def _peak_hz(x, sr):
    spec = np.abs(np.fft.rfft(x))
    return np.argmax(spec) * sr / x.size


def test_load_silence(tmp_path):
    p = tmp_path / "s.wav"
    wavfile.write(p, 48000, np.zeros(48000, dtype=np.int16))
    clip = load_wav(p)
    assert clip.sample_rate == 48000
    assert clip.samples.shape == (48000,)
    assert not clip.samples.any()


def test_load_sine_16k(tmp_path):
    t = np.arange(8000) / 16000
    p = tmp_path / "a.wav"
    wavfile.write(p, 16000, (0.5 * np.sin(2 * np.pi * 440 * t) * 32767).astype(np.int16))
    clip = load_wav(p)
    assert len(clip) == 8000
    assert _peak_hz(clip.samples, 16000) == pytest.approx(440, abs=2)


def test_load_zero_length(tmp_path):
    p = tmp_path / "z.wav"
    wavfile.write(p, 16000, np.zeros(0, dtype=np.int16))
    with pytest.raises(AudioError, match="zero-length audio"):
        load_wav(p)


def test_load_stereo_float_is_averaged(tmp_path):
    p = tmp_path / "st.wav"
    data = np.stack([np.full(100, 0.5), np.full(100, -0.25)], axis=1).astype(np.float32)
    wavfile.write(p, 8000, data)
    clip = load_wav(p)
    np.testing.assert_allclose(clip.samples, 0.125)


def test_load_int16_scaling(tmp_path):
    p = tmp_path / "i.wav"
    wavfile.write(p, 8000, np.array([-32768, 0, 16384], dtype=np.int16))
    np.testing.assert_array_equal(load_wav(p).samples, [-1.0, 0.0, 0.5])


def test_load_missing_and_unsupported(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")
    p = tmp_path / "u8.wav"
    wavfile.write(p, 8000, np.zeros(10, dtype=np.uint8))
    with pytest.raises(AudioError, match="unsupported"):
        load_wav(p)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    clip = AudioClip(rng.uniform(-0.9, 0.9, 1000), 22050)
    save_wav(tmp_path / "f.wav", clip, "float32")
    back = load_wav(tmp_path / "f.wav")
    np.testing.assert_allclose(back.samples, clip.samples, atol=1e-7)
    assert back.sample_rate == 22050


def test_clip_validation():
    with pytest.raises(AudioError):
        AudioClip(np.array([0.0, np.nan]), 16000)
    with pytest.raises(AudioError):
        AudioClip(np.zeros((2, 2)), 16000)
    with pytest.raises(AudioError):
        AudioClip(np.zeros(3), 0)


def test_resample_identity_at_48k():
    clip = AudioClip(np.random.default_rng(1).standard_normal(480), 48000)
    assert resample_48k(clip) is clip


def test_resample_sine_16k():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 100 * t)
    out = resample_48k(AudioClip(x, 16000))
    assert out.sample_rate == 48000
    assert len(out) == 48000
    assert _peak_hz(out.samples, 48000) == pytest.approx(100, abs=1)
    mid = out.samples[4800:-4800]
    assert np.abs(mid).max() == pytest.approx(1.0, rel=0.01)


def test_resample_length_8k():
    assert len(resample_48k(AudioClip(np.zeros(8000) + 0.1, 8000))) == 48000


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([8000, 11025, 16000, 22050, 44100]), st.integers(50, 2000))
def test_resample_idempotent(rate, n):
    x = np.random.default_rng(n).uniform(-1, 1, n)
    once = resample_48k(AudioClip(x, rate))
    twice = resample_48k(once)
    np.testing.assert_array_equal(once.samples, twice.samples)


def _entries(n):
    return [ManifestEntry(f"u{i}", f"s{i}", list(Device)[i % 4], "sess", f"u{i}.wav")
            for i in range(n)]


def test_manifest_empty(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert load_manifest(p) == []


def test_manifest_roundtrip(tmp_path):
    entries = _entries(3)
    p = tmp_path / "m.jsonl"
    write_manifest(p, entries)
    assert load_manifest(p) == entries


def test_manifest_duplicate_names_line(tmp_path):
    p = tmp_path / "m.jsonl"
    e = _entries(1)[0]
    p.write_text(e.to_json() + "\n" + e.to_json() + "\n")
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(p)


@pytest.mark.parametrize("line", [
    "not json",
    json.dumps({"utterance_id": "a", "speaker_id": "s", "device": "radio", "session": "x",
                "path": "a.wav"}),
    json.dumps({"utterance_id": "a", "speaker_id": "s"}),
])
def test_manifest_malformed(tmp_path, line):
    p = tmp_path / "m.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(ManifestError, match="line 1"):
        load_manifest(p)


def test_split_ten_speakers():
    entries = [ManifestEntry(f"u{i}", f"s{i % 10}", Device.PHONE, "", "") for i in range(30)]
    train, test = split_speakers(entries, 0.2, seed=3)
    tr = {e.speaker_id for e in train}
    te = {e.speaker_id for e in test}
    assert len(te) == 2 and len(tr) == 8
    assert not tr & te
    assert split_speakers(entries, 0.2, seed=3) == (train, test)


def test_split_needs_two_speakers():
    with pytest.raises(ValueError):
        split_speakers([ManifestEntry("u", "s", Device.PHONE, "", "")], 0.5, 0)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_split_partition_property(seed):
    entries = [ManifestEntry(f"u{i}", f"s{i % 7}", Device.DVR, "", "") for i in range(21)]
    train, test = split_speakers(entries, 0.3, seed)
    assert sorted(train + test, key=lambda e: e.utterance_id) == sorted(
        entries, key=lambda e: e.utterance_id)
    assert not {e.speaker_id for e in train} & {e.speaker_id for e in test}


def test_synth_counts_and_determinism():
    clips, manifest = generate_synthetic_corpus(2, 2, [Device.MICROPHONE], seed=5, duration=6.0)
    assert len(clips) == 4 and len(manifest) == 4
    again, _ = generate_synthetic_corpus(2, 2, [Device.MICROPHONE], seed=5, duration=6.0)
    for a, b in zip(clips, again):
        np.testing.assert_array_equal(a.samples, b.samples)
    assert len({e.utterance_id for e in manifest}) == 4


def test_synth_rejects_bad_input():
    with pytest.raises(ValueError):
        generate_synthetic_corpus(1, 1, ["phone"], 0)
    with pytest.raises(ValueError):
        generate_synthetic_corpus(2, 1, ["phone"], 0, duration=3.0)


def _tracked_f0(clip):
    track = estimate_pitch(clip, detect_voiced_segments(clip))
    return track.f0[track.voiced].mean()


def test_synth_pitch_round_trip():
    clips, _ = generate_synthetic_corpus(2, 1, ["microphone"], seed=2, duration=6.0,
                                         f0s=[100.0, 220.0])
    assert _tracked_f0(clips[0]) == pytest.approx(100, abs=5)
    assert _tracked_f0(clips[1]) == pytest.approx(220, abs=5)


def test_synth_speakers_f0_separated():
    clips, manifest = generate_synthetic_corpus(12, 1, ["microphone"], seed=11, duration=6.0)
    f0 = np.array([_tracked_f0(c) for c in clips])
    gaps = np.abs(f0[:, None] - f0[None, :])[np.triu_indices(len(f0), 1)]
    assert gaps.min() >= 10


def test_synth_devices_differ():
    clips, manifest = generate_synthetic_corpus(2, 1, ["microphone", "dvr", "phone"], 0, 6.0)
    mic, dvr, phone = (c.samples for c in clips[:3])
    assert not np.array_equal(mic, dvr) and not np.array_equal(dvr, phone)
    assert [e.device for e in manifest[:3]] == [Device.MICROPHONE, Device.DVR, Device.PHONE]
