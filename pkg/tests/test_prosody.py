import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prosiam.audio import AudioClip
from prosiam.features import VoicedSegment, detect_voiced_segments
from prosiam.prosody import (FIELD_NAMES, CycleSequence, InsufficientCycles, NoVoicedContent,
                             PitchTrack, ProsodicVector, duration_features, estimate_pitch,
                             extract_cycles, f0_features, jitter_features, jitter_indices,
                             prosodic_vector, read_prosody_csv, shimmer_features,
                             shimmer_indices, write_prosody_csv)

SR = 48000


def sine(f0, seconds, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return amp * np.sin(2 * np.pi * f0 * t)


def cycles_signal(periods, amp=0.5):
    """Phase-continuous cosine with a peak at every cycle boundary."""
    edges = np.concatenate([[0.0], np.cumsum(periods)])
    t = np.arange(int(edges[-1] * SR)) / SR
    k = np.minimum(np.searchsorted(edges, t, side="right") - 1, len(periods) - 1)
    phase = k + (t - edges[k]) / np.asarray(periods)[k]
    return amp * np.cos(2 * np.pi * phase)


def whole(x):
    return [VoicedSegment(0, x.size)]


# ---------------------------------------------------------------- pitch


def test_pitch_silence():
    x = np.zeros(SR)
    track = estimate_pitch(AudioClip(x, SR), whole(x))
    assert not track.voiced.any()
    assert not track.f0.any()


def test_pitch_sine_200():
    x = sine(200, 1.0)
    track = estimate_pitch(AudioClip(x, SR), whole(x))
    assert track.voiced.mean() > 0.9
    np.testing.assert_allclose(track.f0[track.voiced], 200, atol=2)


def test_pitch_sawtooth_100():
    t = np.arange(SR) / SR
    x = 0.5 * (2 * ((t * 100) % 1.0) - 1)
    track = estimate_pitch(AudioClip(x, SR), whole(x))
    assert track.voiced.mean() > 0.9
    np.testing.assert_allclose(track.f0[track.voiced], 100, atol=1)


def test_pitch_track_invariants():
    x = np.concatenate([sine(150, 0.5), np.zeros(SR // 4), sine(90, 0.5)])
    track = estimate_pitch(AudioClip(x, SR), detect_voiced_segments(AudioClip(x, SR)))
    np.testing.assert_array_equal(track.voiced, track.f0 > 0)
    assert np.all((track.f0[track.voiced] >= 60) & (track.f0[track.voiced] <= 400))


# ---------------------------------------------------------------- cycles


def test_cycles_pure_sine():
    x = sine(100, 1.0)
    clip = AudioClip(x, SR)
    cycles = extract_cycles(clip, estimate_pitch(clip, whole(x)))
    periods = np.concatenate([c.periods for c in cycles])
    amps = np.concatenate([c.amplitudes for c in cycles])
    assert periods.size > 80
    np.testing.assert_allclose(periods, 0.010, atol=1e-4)
    np.testing.assert_allclose(amps, 0.5, atol=0.01)


def test_cycles_alternating_perturbation():
    periods = np.where(np.arange(150) % 2, 0.0098, 0.0102)
    x = cycles_signal(periods)
    clip = AudioClip(x, SR)
    cycles = extract_cycles(clip, estimate_pitch(clip, whole(x)))
    j2 = jitter_features(cycles)[1]
    assert j2 == pytest.approx(4.0, abs=0.5)


def test_cycles_two_cycle_run_dropped():
    x = sine(100, 0.5)
    f0 = np.zeros(50)
    f0[20:22] = 100.0
    track = PitchTrack(f0, f0 > 0)
    assert extract_cycles(AudioClip(x, SR), track) == []


@pytest.mark.parametrize("p", [0.005, 0.01, 0.02])
def test_jitter_recovers_injected_perturbation(p):
    rng = np.random.default_rng(int(p * 1000))
    periods = 0.008 * (1 + p * rng.standard_normal(400))
    x = cycles_signal(periods)
    clip = AudioClip(x, SR)
    cycles = extract_cycles(clip, estimate_pitch(clip, whole(x)))
    expected = 100 * p * 2 / np.sqrt(np.pi)  # E|T_i - T_i+1| / T for iid normal periods
    assert jitter_features(cycles)[1] == pytest.approx(expected, rel=0.15)


# ---------------------------------------------------------------- durations


def _seg(a, b):
    return VoicedSegment(int(a * SR), int(b * SR))


def test_durations_empty():
    assert duration_features([], SR) == (0.0, 0.0, 0.0)


def test_durations_one_word():
    d1, d2, d3 = duration_features([_seg(0, 0.5), _seg(0.6, 0.9)], 2 * SR)
    assert d1 == pytest.approx(90)
    assert d2 == pytest.approx(0.4)
    assert d3 == pytest.approx(0.1)


def test_durations_two_words():
    d1, d2, d3 = duration_features([_seg(0, 0.5), _seg(1.5, 1.8)], 2 * SR)
    assert d1 == pytest.approx(40)
    assert d3 == 0.0


# ---------------------------------------------------------------- F0 statistics


def test_f0_constant():
    f0 = np.full(100, 120.0)
    np.testing.assert_allclose(f0_features(PitchTrack(f0, f0 > 0)), [120, 120, 120, 0, 0, 0],
                               atol=1e-9)


def test_f0_ramp():
    f0 = np.linspace(100, 200, 101)
    f = f0_features(PitchTrack(f0, f0 > 0))
    assert f[4] == pytest.approx(100, abs=1)
    assert f[5] == pytest.approx(100, abs=1)


def test_f0_empty():
    f0 = np.zeros(10)
    with pytest.raises(NoVoicedContent):
        f0_features(PitchTrack(f0, f0 > 0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_f0_ordering_property(seed):
    rng = np.random.default_rng(seed)
    f0 = rng.uniform(60, 400, 50) * (rng.random(50) > 0.3)
    if not f0.any():
        f0[0] = 100.0
    f1, f2, f3, f4, _, _ = f0_features(PitchTrack(f0, f0 > 0))
    assert f3 <= f1 <= f2
    assert f4 == f2 - f3


# ---------------------------------------------------------------- jitter / shimmer


def test_jitter_constant_periods():
    np.testing.assert_allclose(jitter_indices(np.full(8, 0.01)), 0.0, atol=1e-12)


def test_jitter_hand_values():
    j = jitter_indices([0.010, 0.012, 0.010])
    assert j[0] == pytest.approx(0.002, abs=1e-15)
    assert j[1] == pytest.approx(18.75, abs=1e-12)


def test_jitter_needs_five_cycles():
    with pytest.raises(InsufficientCycles):
        jitter_features([CycleSequence([0.01] * 4, [1.0] * 4)])


def test_jitter_duration_weighting():
    a = CycleSequence([0.010, 0.011] * 5, [1.0] * 10)
    b = CycleSequence([0.005] * 20, [1.0] * 20)
    expected = (jitter_indices(a.periods) * a.duration + 0.0 * b.duration) / (
        a.duration + b.duration)
    np.testing.assert_allclose(jitter_features([a, b]), expected)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10.0))
def test_jitter_scaling(seed, c):
    T = np.random.default_rng(seed).uniform(0.003, 0.015, 12)
    a, b = jitter_indices(T), jitter_indices(c * T)
    assert b[0] == pytest.approx(c * a[0], rel=1e-9)
    np.testing.assert_allclose(b[1:], a[1:], rtol=1e-9)


def test_shimmer_constant():
    np.testing.assert_allclose(shimmer_indices(np.full(12, 0.3)), 0.0, atol=1e-12)


def test_shimmer_hand_values():
    s = shimmer_indices([1.0, 1.1])
    assert s[0] == pytest.approx(0.8279, abs=1e-3)
    assert s[1] == pytest.approx(9.52, abs=0.01)


def test_shimmer_needs_eleven_cycles():
    with pytest.raises(InsufficientCycles):
        shimmer_features([CycleSequence([0.01] * 10, [1.0] * 10)])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100.0))
def test_shimmer_scaling(seed, c):
    A = np.random.default_rng(seed).uniform(0.1, 1.0, 15)
    np.testing.assert_allclose(shimmer_indices(c * A), shimmer_indices(A), rtol=1e-9)


# ---------------------------------------------------------------- full vector


def test_vector_pure_sine():
    x = np.concatenate([np.zeros(SR // 4), sine(100, 2.0), np.zeros(SR // 4)])
    pv = prosodic_vector(AudioClip(x, SR))
    assert len(pv) == 18
    d = pv.as_dict()
    assert d["f1"] == pytest.approx(100, abs=1)
    for k in ("j2", "j3", "j4", "s2", "s3", "s4", "s5"):
        assert d[k] < 0.5
    assert d["s1"] < 0.05


def test_vector_white_noise():
    x = np.random.default_rng(0).uniform(-0.01, 0.01, SR)
    with pytest.raises(NoVoicedContent, match="no voiced content"):
        prosodic_vector(AudioClip(x, SR))


def test_vector_invariants_on_speechlike():
    rng = np.random.default_rng(3)
    parts = []
    for f0 in (110, 135, 120, 150):
        periods = (1 / f0) * (1 + 0.01 * rng.standard_normal(int(0.6 * f0)))
        parts += [cycles_signal(periods), np.zeros(int(0.15 * SR))]
    clip = AudioClip(np.concatenate(parts), SR)
    v = prosodic_vector(clip).values
    again = prosodic_vector(clip).values
    np.testing.assert_array_equal(v, again)
    f1, f2, f3, f4 = v[3:7]
    assert f3 <= f1 <= f2 and f4 == f2 - f3
    assert np.all(v[9:] >= 0)
    assert np.all(np.isfinite(v))


def test_vector_validation():
    with pytest.raises(ValueError):
        ProsodicVector(np.zeros(17))


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    rows = [(f"u{i}", ProsodicVector(rng.standard_normal(18) * 1e3)) for i in range(3)]
    write_prosody_csv(tmp_path / "p.csv", rows)
    header = (tmp_path / "p.csv").read_text().splitlines()[0].split(",")
    assert header == ["utterance_id", *FIELD_NAMES] and len(header) == 19
    back = read_prosody_csv(tmp_path / "p.csv")
    for uid, pv in rows:
        np.testing.assert_array_equal(back[uid].values, pv.values)
