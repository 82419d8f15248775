import filecmp
import warnings

import numpy as np
import pytest

import oracles
from cyclese import corpus as C
from cyclese.errors import ConfigError, DataError, DimensionError, FormatError
from cyclese.features import Waveform, append_deltas, log_mel

SMALL = C.SynthConfig(n_utterances=4, n_heldout=2, min_duration=0.3, max_duration=0.5, seed=3)


# ---------------------------------------------------------------- signals

def test_synth_clean_is_deterministic_and_peak_normalized():
    a, b = C.synth_clean(5, 1.0), C.synth_clean(5, 1.0)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, C.synth_clean(6, 1.0).samples)
    for seed in range(5):
        w = C.synth_clean(seed, 0.7)
        assert len(w) == 11200 and w.sample_rate == 16000
        assert np.max(np.abs(w.samples)) <= 0.5 + 1e-9


def test_synth_clean_energy_below_4khz():
    for seed in range(5):
        x = C.synth_clean(seed, 2.0).samples
        power = np.abs(np.fft.rfft(x)) ** 2
        freqs = np.fft.rfftfreq(len(x), 1 / 16000)
        assert power[freqs < 4000].sum() / power.sum() > 0.9


@pytest.mark.parametrize("kind", C.NOISE_KINDS)
def test_noise_has_unit_power(kind):
    w = C.synth_noise(1, kind, 8000)
    assert np.mean(w.samples ** 2) == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_array_equal(w.samples, C.synth_noise(1, kind, 8000).samples)
    with pytest.raises(ConfigError):
        C.synth_noise(1, "brown", 10)


def test_rumble_is_low_frequency():
    x = C.synth_noise(2, "lowpass-rumble", 32000).samples
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1 / 16000)
    assert power[freqs < 600].sum() / power.sum() > 0.99


@pytest.mark.parametrize("snr", [-5.0, 0.0, 7.5, 20.0])
def test_mix_hits_requested_snr(snr):
    clean = C.synth_clean(0, 1.0)
    noise = C.synth_noise(0, "white", len(clean))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mixed = C.mix_at_snr(clean, noise, snr)
    if np.max(np.abs(mixed.samples)) < 1.0:
        scaled = mixed.samples - clean.samples
        measured = 10 * np.log10(np.mean(clean.samples ** 2) / np.mean(scaled ** 2))
        assert measured == pytest.approx(snr, abs=1e-6)
        if snr == 0.0:
            assert np.mean(scaled ** 2) == pytest.approx(np.mean(clean.samples ** 2), rel=1e-9)


def test_high_snr_mix_is_close_to_clean():
    clean = C.synth_clean(1, 1.0)
    mixed = C.mix_at_snr(clean, C.synth_noise(1, "white", len(clean)), 60.0)
    assert np.max(np.abs(mixed.samples - clean.samples)) < 1e-3


def test_mix_warns_when_clipping_and_validates():
    clean = C.synth_clean(1, 0.5)
    noise = C.synth_noise(1, "white", len(clean))
    with pytest.warns(RuntimeWarning, match="clipped"):
        out = C.mix_at_snr(clean, noise, -25.0)
    assert np.max(np.abs(out.samples)) <= 1.0
    with pytest.raises(DataError):
        C.mix_at_snr(clean, Waveform(noise.samples[:-1], 16000), 0.0)
    with pytest.raises(DataError):
        C.mix_at_snr(Waveform(np.zeros(len(clean)), 16000), noise, 0.0)
    with pytest.raises(DataError):
        C.mix_at_snr(clean, Waveform(noise.samples, 8000), 0.0)


def test_noisy_mse_falls_with_snr():
    mse = {snr: [] for snr in (0, 5, 10, 20)}
    for i in range(20):
        clean = C.synth_clean(100 + i, 0.5)
        noise = C.synth_noise(200 + i, C.NOISE_KINDS[i % 3], len(clean))
        ref = log_mel(clean)
        for snr in mse:
            mse[snr].append(C.frame_mse(log_mel(C.mix_at_snr(clean, noise, snr)), ref))
    means = [np.mean(mse[s]) for s in (0, 5, 10, 20)]
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_synth_config_validation():
    for bad in (dict(n_utterances=0), dict(min_duration=0.0), dict(min_duration=2, max_duration=1),
                dict(snr_low=5, snr_high=1), dict(snr_high=np.inf), dict(noise_kinds=("hum",))):
        with pytest.raises(ConfigError):
            C.SynthConfig(**bad)


# ---------------------------------------------------------------- corpora

def test_parallel_corpus(tmp_path):
    m = C.build_parallel(SMALL, tmp_path, "train")
    assert len(m) == 4 and (tmp_path / "train.tsv").is_file()
    for (x, y), r in zip(m.load_pairs(), m.records):
        assert x.dim_kind == "augmented87" and y.dim_kind == "static29"
        assert x.n_frames == y.n_frames
        assert SMALL.snr_low <= r.snr_db <= SMALL.snr_high and r.noise_kind in C.NOISE_KINDS
    back = C.read_manifest(tmp_path / "train.tsv")
    assert back.records == m.records


def test_parallel_corpus_is_deterministic(tmp_path):
    C.build_parallel(SMALL, tmp_path / "a", "heldout")
    C.build_parallel(SMALL, tmp_path / "b", "heldout")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert filecmp.cmp(tmp_path / "a/heldout/heldout-0001.noisy.ftr", tmp_path / "b/heldout/heldout-0001.noisy.ftr",
                       shallow=False)


def test_stored_deltas_match_stored_statics(tmp_path):
    m = C.build_parallel(SMALL, tmp_path, "train")
    x, y = m.load_pairs()[0]
    assert np.all(np.abs(x.data[:, 29:] - append_deltas(x.static).data[:, 29:]) < 1e-4)
    # features are stored as float32
    assert np.array_equal(y.data, y.data.astype(np.float32))


def test_unparallel_corpus(tmp_path):
    noisy, clean = C.build_unparallel(SMALL, tmp_path, "train")
    assert len(noisy) == len(clean) == 2
    assert not set(noisy.ids) & set(clean.ids)
    assert all(r.noisy_path is None and r.snr_db is None for r in clean)
    assert all(u.dim == 87 for u in noisy.load_noisy())
    assert all(v.dim == 29 for v in clean.load_clean())
    with pytest.raises(DataError):
        clean.load_noisy()
    with pytest.raises(ConfigError):
        C.build_unparallel(C.SynthConfig(n_utterances=1), tmp_path / "x", "train")


# ---------------------------------------------------------------- manifests

def test_manifest_round_trip(tmp_path):
    (tmp_path / "a.ftr").write_bytes(b"")
    recs = [C.ManifestRecord("u1", "a.ftr", None, None, None), C.ManifestRecord("u2", "a.ftr", "a.ftr", 3.25, "pink")]
    C.write_manifest(tmp_path / "m.tsv", C.CorpusManifest(recs))
    text = (tmp_path / "m.tsv").read_text()
    assert text.splitlines()[0] == "u1\ta.ftr\t-\t-\t-"
    assert C.read_manifest(tmp_path / "m.tsv").records == recs


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.tsv").write_text("u1\ta.ftr\t-\n")
    with pytest.raises(FormatError):
        C.read_manifest(tmp_path / "bad.tsv")
    (tmp_path / "snr.tsv").write_text("u1\ta.ftr\t-\tloud\t-\n")
    with pytest.raises(FormatError):
        C.read_manifest(tmp_path / "snr.tsv", check_files=False)
    (tmp_path / "missing.tsv").write_text("u1\tnope.ftr\t-\t-\t-\n")
    with pytest.raises(DataError):
        C.read_manifest(tmp_path / "missing.tsv")
    with pytest.raises(DataError):
        C.CorpusManifest([C.ManifestRecord("u", "a", None, None, None)] * 2)


# ---------------------------------------------------------------- metrics

def test_metrics_of_identical_sequences():
    c = np.random.default_rng(0).normal(-3, 1, (5, 29))
    assert C.frame_mse(c, c) == 0.0
    assert C.segmental_snr(c, c) == C.SEG_SNR_CEILING
    assert C.log_spectral_distance(c, c) == 0.0


def test_metrics_match_loop_oracles(rng):
    for _ in range(10):
        T_ = int(rng.integers(1, 10))
        c = rng.normal(-4, 2, (T_, 29))
        e = c + rng.normal(0, rng.uniform(0.01, 3), (T_, 29))
        el, cl = e.tolist(), c.tolist()
        assert abs(C.frame_mse(e, c) - oracles.frame_mse(el, cl)) < 1e-9
        assert abs(C.segmental_snr(e, c) - oracles.segmental_snr(el, cl)) < 1e-9
        assert abs(C.log_spectral_distance(e, c) - oracles.log_spectral_distance(el, cl)) < 1e-9


def test_segmental_snr_respects_floor():
    c = np.zeros((3, 29))
    assert C.segmental_snr(c + 10.0, c) == C.SEG_SNR_FLOOR


def test_lsd_shrinks_with_perturbation(rng):
    c = rng.normal(size=(6, 29))
    d = rng.normal(size=(6, 29))
    values = [C.log_spectral_distance(c + eps * d, c) for eps in (1.0, 0.1, 0.01, 1e-4, 0.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] == 0.0


def test_metric_shape_mismatch():
    with pytest.raises(DimensionError):
        C.frame_mse(np.zeros((3, 29)), np.zeros((4, 29)))


def test_passthrough_is_static_slice(tmp_path):
    m = C.build_parallel(SMALL, tmp_path, "train")
    x, _ = m.load_pairs()[0]
    np.testing.assert_array_equal(C.passthrough(x).data, x.data[:, :29])
