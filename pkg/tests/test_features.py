import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from cyclese import features as feat
from cyclese.errors import (ConfigError, DegenerateStatsError, DimensionError, FormatError,
                            UnsupportedFormatError)
from cyclese.features import FeatureSequence, FbankConfig, NormStats, Waveform


def _write_raw_wav(path, frames: bytes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(frames)


# ---------------------------------------------------------------- WAV I/O

def test_read_wav_scales_samples(tmp_path):
    p = tmp_path / "a.wav"
    _write_raw_wav(p, np.array([0, 16384, -32768], dtype="<i2").tobytes())
    w = feat.read_wav(p)
    assert w.sample_rate == 16000
    np.testing.assert_array_equal(w.samples, [0.0, 0.5, -1.0])


def test_read_wav_rejects_8bit(tmp_path):
    p = tmp_path / "b.wav"
    _write_raw_wav(p, bytes([128, 200, 10]), width=1)
    with pytest.raises(UnsupportedFormatError):
        feat.read_wav(p)


def test_read_wav_rejects_stereo(tmp_path):
    p = tmp_path / "s.wav"
    _write_raw_wav(p, np.zeros(8, dtype="<i2").tobytes(), channels=2)
    with pytest.raises(UnsupportedFormatError, match="channels"):
        feat.read_wav(p)


def test_read_wav_malformed_header(tmp_path):
    p = tmp_path / "junk.wav"
    p.write_bytes(b"RIFF\x00\x00not really a wave file")
    with pytest.raises(FormatError):
        feat.read_wav(p)


def test_sine_round_trip(tmp_path):
    t = np.arange(16000) / 16000.0
    w = Waveform(0.8 * np.sin(2 * np.pi * 440.0 * t), 16000)
    feat.write_wav(tmp_path / "sine.wav", w)
    back = feat.read_wav(tmp_path / "sine.wav")
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - w.samples)) < 1 / 32768


# ---------------------------------------------------------------- log-mel

def test_silence_gives_log_floor():
    out = feat.log_mel(Waveform(np.zeros(4000), 16000))
    assert out.dim_kind == "static29"
    np.testing.assert_array_equal(out.data, np.log(feat.LOG_FLOOR))


def test_frame_count():
    cfg = FbankConfig()
    for n in (400, 401, 559, 560, 16000):
        out = feat.log_mel(Waveform(np.ones(n) * 0.1, 16000), cfg)
        assert out.n_frames == 1 + (n - 400) // 160
        assert out.data.shape[1] == 29


@pytest.mark.parametrize("band", [3, 10, 17, 25])
def test_tone_at_band_center_peaks_in_that_band(band):
    sr = 16000
    centers = feat.mel_band_edges(29, 0.0, sr / 2)[1:-1]
    t = np.arange(8000) / sr
    out = feat.log_mel(Waveform(0.5 * np.sin(2 * np.pi * centers[band] * t), sr))
    assert np.all(np.argmax(out.data, axis=1) == band)


def test_log_mel_matches_brute_force_dft(rng):
    for i in range(10):
        sr = (8000, 16000)[i % 2]
        samples = rng.normal(size=int(rng.integers(int(0.025 * sr), int(0.05 * sr)))) * 0.3
        got = feat.log_mel(Waveform(samples, sr)).data
        np.testing.assert_allclose(got, oracles.log_mel(samples, sr), rtol=0, atol=1e-6)


def test_log_mel_too_short_and_bad_config():
    with pytest.raises(ConfigError):
        feat.log_mel(Waveform(np.zeros(100), 16000))
    with pytest.raises(ConfigError):
        feat.log_mel(Waveform(np.zeros(1000), 16000), FbankConfig(fmax_hz=9000.0))
    with pytest.raises(ConfigError):
        feat.log_mel(Waveform(np.zeros(1000), 16000), FbankConfig(fft_size=256))


@given(arrays(np.float64, st.integers(400, 1200), elements=st.floats(-1, 1)))
def test_log_mel_shape_and_finite(samples):
    out = feat.log_mel(Waveform(samples, 16000))
    assert out.data.shape == (1 + (len(samples) - 400) // 160, 29)
    assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------- deltas

def test_constant_sequence_has_zero_deltas():
    seq = FeatureSequence(np.tile(np.arange(29.0), (7, 1)), "static29")
    aug = feat.append_deltas(seq)
    assert aug.dim_kind == "augmented87"
    np.testing.assert_array_equal(aug.data[:, :29], seq.data)
    np.testing.assert_array_equal(aug.data[:, 29:], 0.0)


def test_single_frame_has_zero_deltas():
    aug = feat.append_deltas(FeatureSequence(np.ones((1, 29)), "static29"))
    np.testing.assert_array_equal(aug.data[:, 29:], 0.0)


def test_ramp_delta_is_slope_in_the_interior():
    v = np.linspace(-1, 2, 29)
    seq = np.arange(10)[:, None] * v
    d = feat.delta(seq, window=2)
    np.testing.assert_allclose(d[2:-2], np.tile(v, (6, 1)), rtol=0, atol=1e-14)
    # edges are clamped, so the slope there is smaller
    assert np.all(np.abs(d[0]) <= np.abs(v) + 1e-15)


def test_delta_regression_formula(rng):
    x = rng.normal(size=(9, 3))
    d = feat.delta(x, window=2)
    for t in range(9):
        def c(k):
            return x[min(max(k, 0), 8)]
        want = (1 * (c(t + 1) - c(t - 1)) + 2 * (c(t + 2) - c(t - 2))) / 10.0
        np.testing.assert_allclose(d[t], want, rtol=0, atol=1e-14)


def test_append_deltas_dimension_errors():
    with pytest.raises(DimensionError):
        feat.append_deltas(FeatureSequence(np.zeros((3, 87)), "augmented87"))
    with pytest.raises(DimensionError):
        feat.append_deltas(np.zeros((3, 10)))
    with pytest.raises(ConfigError):
        feat.delta(np.zeros((3, 2)), window=0)


# ---------------------------------------------------------------- statistics

def test_two_point_stats():
    s = feat.compute_global_stats([FeatureSequence(np.array([[0.0], [2.0]]))])
    np.testing.assert_array_equal(s.mean, [1.0])
    np.testing.assert_array_equal(s.std, [1.0])


def test_stats_of_normalized_corpus(rng):
    corpus = [rng.normal(3, 5, size=(int(rng.integers(2, 20)), 4)) for _ in range(6)]
    s = feat.compute_global_stats(corpus)
    again = feat.compute_global_stats([feat.normalize(c, s) for c in corpus])
    np.testing.assert_allclose(again.mean, 0.0, atol=1e-10)
    np.testing.assert_allclose(again.std, 1.0, atol=1e-10)


def test_stats_match_accumulation_oracle(rng):
    corpus = [rng.normal(-2, 3, size=(int(rng.integers(1, 15)), 5)) for _ in range(8)]
    n, s1, s2 = 0, np.zeros(5), np.zeros(5)
    for seq in corpus:
        for row in seq:
            n += 1
            s1 += row
            s2 += row * row
    mean = s1 / n
    std = np.sqrt(s2 / n - mean * mean)
    got = feat.compute_global_stats(corpus)
    np.testing.assert_allclose(got.mean, mean, rtol=0, atol=1e-9)
    np.testing.assert_allclose(got.std, std, rtol=0, atol=1e-9)


def test_degenerate_stats():
    with pytest.raises(DegenerateStatsError):
        feat.compute_global_stats([np.ones((5, 2))])
    with pytest.raises(DegenerateStatsError):
        feat.compute_global_stats([np.ones((1, 2))])
    with pytest.raises(DegenerateStatsError):
        feat.compute_global_stats([])
    with pytest.raises(DegenerateStatsError):
        NormStats(np.zeros(2), np.array([1.0, 0.0]))


def test_normalize_examples(rng):
    stats = NormStats(np.array([1.0, -2.0, 3.0]), np.array([0.5, 2.0, 4.0]))
    np.testing.assert_array_equal(feat.normalize(np.tile(stats.mean, (4, 1)), stats), 0.0)
    x = rng.normal(size=(6, 3))
    unit = NormStats(np.zeros(3), np.ones(3))
    np.testing.assert_array_equal(feat.normalize(x, unit), x)
    with pytest.raises(DimensionError):
        feat.normalize(np.zeros((2, 4)), stats)


def test_normalize_keeps_sequence_kind():
    seq = FeatureSequence(np.ones((3, 29)), "static29")
    out = feat.normalize(seq, NormStats(np.zeros(29), np.full(29, 2.0)))
    assert isinstance(out, FeatureSequence) and out.dim_kind == "static29"


@given(arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 3, elements=st.floats(-10, 10)),
       arrays(np.float64, 3, elements=st.floats(0.1, 10)))
def test_normalize_denormalize_inverse(x, mean, std):
    stats = NormStats(mean, std)
    np.testing.assert_allclose(feat.denormalize(feat.normalize(x, stats), stats), x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(feat.normalize(feat.denormalize(x, stats), stats), x, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- files

def test_feature_file_round_trip_is_bit_exact(tmp_path, rng):
    data = rng.normal(size=(7, 87)).astype(np.float32).astype(np.float64)
    seq = FeatureSequence(data, "augmented87")
    feat.write_features(tmp_path / "x.ftr", seq)
    blob = (tmp_path / "x.ftr").read_bytes()
    assert blob[:4] == b"FTR1" and blob[12] == 1 and len(blob) == 13 + 4 * 7 * 87
    back = feat.read_features(tmp_path / "x.ftr")
    assert back.dim_kind == "augmented87"
    np.testing.assert_array_equal(back.data, data)
    assert feat.encode_features(back) == blob


def test_feature_file_errors(tmp_path):
    blob = feat.encode_features(FeatureSequence(np.zeros((2, 3))))
    for bad in (b"FTR2" + blob[4:], blob[:-1], blob[:5]):
        with pytest.raises(FormatError):
            feat.decode_features(bad)


def test_stats_file_round_trip(tmp_path, rng):
    s = NormStats(rng.normal(size=29), rng.uniform(0.5, 2, 29))
    feat.write_stats(tmp_path / "s.nrm", s)
    back = feat.read_stats(tmp_path / "s.nrm")
    np.testing.assert_array_equal(back.mean, s.mean)
    np.testing.assert_array_equal(back.std, s.std)
    (tmp_path / "bad.nrm").write_bytes(b"NRMX" + (tmp_path / "s.nrm").read_bytes()[4:])
    with pytest.raises(FormatError):
        feat.read_stats(tmp_path / "bad.nrm")


def test_feature_sequence_invariants():
    with pytest.raises(DimensionError):
        FeatureSequence(np.zeros((3, 30)), "static29")
    with pytest.raises(DimensionError):
        FeatureSequence(np.zeros((0, 29)), "static29")
    with pytest.raises(ValueError):
        FeatureSequence(np.full((2, 2), np.nan))
    with pytest.raises(DimensionError):
        FeatureSequence(np.zeros((2, 29))).static
