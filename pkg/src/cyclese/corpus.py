"""Synthetic speech-like corpora and objective enhancement metrics.

Clean "speech" is a sum of harmonics of a slowly gliding fundamental with
syllable-like envelopes and pauses; noisy versions are made by mixing in
white, pink or low-pass rumble noise at a random SNR and then running the
ordinary feature front-end on both signals, so noise enters the features
the same way it does in recorded data.

Every utterance draws from its own ``SeedSequence((seed, split, kind, index))``,
which makes corpora reproducible and lets any subset be regenerated alone.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, DataError, DimensionError, FormatError
from .features import (
    FbankConfig,
    FeatureSequence,
    Waveform,
    append_deltas,
    log_mel,
    read_features,
    write_features,
)

NOISE_KINDS = ("white", "pink", "lowpass-rumble")
SEG_SNR_FLOOR = -10.0
SEG_SNR_CEILING = 35.0
CLIP_WARN_FRACTION = 1e-3

# recording noise floor added to every clean signal, relative to full scale;
# keeps the log-mel of pauses finite and realistic instead of sitting at the
# front-end's log floor
CLEAN_NOISE_FLOOR = 1e-4

_SPLITS = {"train": 0, "heldout": 1}
_ROLES = {"parallel": 0, "noisy": 1, "clean": 2}


@dataclass(frozen=True)
class SynthConfig:
    n_utterances: int = 200
    n_heldout: int = 40
    min_duration: float = 1.0
    max_duration: float = 3.0
    sample_rate: int = 16000
    snr_low: float = 0.0
    snr_high: float = 20.0
    noise_kinds: tuple = NOISE_KINDS
    seed: int = 0

    def __post_init__(self):
        if self.n_utterances < 1 or self.n_heldout < 0:
            raise ConfigError("need at least one training utterance and a non-negative held-out count")
        if not (0 < self.min_duration <= self.max_duration and np.isfinite(self.max_duration)):
            raise ConfigError(f"invalid duration range [{self.min_duration}, {self.max_duration}]")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not (np.isfinite(self.snr_low) and np.isfinite(self.snr_high) and self.snr_low <= self.snr_high):
            raise ConfigError(f"invalid SNR range [{self.snr_low}, {self.snr_high}]")
        kinds = tuple(self.noise_kinds)
        if not kinds or any(k not in NOISE_KINDS for k in kinds):
            raise ConfigError(f"noise kinds must be a non-empty subset of {NOISE_KINDS}")
        object.__setattr__(self, "noise_kinds", kinds)

    def count(self, split: str) -> int:
        return self.n_utterances if split == "train" else self.n_heldout


# --------------------------------------------------------------------------
# signals
# --------------------------------------------------------------------------

def _syllable_envelope(rng, n, sr):
    """Concatenated raised-cosine bursts of 80-400 ms separated by 40-250 ms pauses."""
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.15) * sr)
    while pos < n:
        length = int(rng.uniform(0.08, 0.4) * sr)
        end = min(pos + length, n)
        if end - pos > 1:
            env[pos:end] = rng.uniform(0.3, 1.0) * np.hanning(length)[: end - pos]
        pos = end + int(rng.uniform(0.04, 0.25) * sr)
    return env


def synth_clean(seed, duration: float, sample_rate: int = 16000) -> Waveform:
    """Speech-like waveform: 3-8 harmonics of an 80-300 Hz glide, peak 0.5."""
    if not duration > 0:
        raise ConfigError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = max(int(round(duration * sample_rate)), 1)
    t = np.arange(n) / sample_rate

    base = rng.uniform(100.0, 220.0)
    depth = rng.uniform(0.05, 0.25)
    rate = rng.uniform(0.5, 3.0)
    f0 = np.clip(base * (1.0 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))),
                 80.0, 300.0)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    n_harm = int(rng.integers(3, 9))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        # skip partials that would alias at the top of the glide
        if k * 300.0 >= sample_rate / 2:
            break
        wobble = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 2.0) * t + rng.uniform(0, 2 * np.pi))
        x += rng.uniform(0.3, 1.0) / k * wobble * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    env = _syllable_envelope(rng, n, sample_rate)
    if not np.any(env > 0):
        env[:] = np.hanning(n)
    x *= env
    peak = np.max(np.abs(x))
    x = 0.5 * x / peak if peak > 0 else x
    x += CLEAN_NOISE_FLOOR * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    return Waveform(0.5 * x / peak, sample_rate)


def synth_noise(seed, kind: str, n: int, sample_rate: int = 16000) -> Waveform:
    """Unit-power noise of the given kind."""
    if kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind {kind!r}")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(w)
        f = np.fft.rfftfreq(n, 1.0 / sample_rate)
        f[0] = f[1] if n > 1 else 1.0
        w = np.fft.irfft(spec / np.sqrt(f), n)
    elif kind == "lowpass-rumble":
        sos = sps.butter(4, 300.0, btype="low", fs=sample_rate, output="sos")
        w = sps.sosfilt(sos, w)
    power = np.mean(w * w)
    return Waveform(w / np.sqrt(power) if power > 0 else w, sample_rate)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Scale ``noise`` to ``snr_db`` below ``clean`` and add them.

    The sum is clipped to [-1, 1]; a ``RuntimeWarning`` is issued when more
    than 0.1% of the samples clip.
    """
    if clean.sample_rate != noise.sample_rate:
        raise DataError("clean and noise sample rates differ")
    if len(clean) != len(noise):
        raise DataError(f"clean has {len(clean)} samples, noise {len(noise)}")
    if not np.isfinite(snr_db):
        raise ConfigError("snr_db must be finite")
    p_clean = np.mean(clean.samples ** 2)
    p_noise = np.mean(noise.samples ** 2)
    if not p_clean > 0:
        raise DataError("clean signal has zero energy")
    if not p_noise > 0:
        raise DataError("noise signal has zero energy")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clean.samples + gain * noise.samples
    clipped = np.abs(mixed) > 1.0
    if clipped.mean() > CLIP_WARN_FRACTION:
        warnings.warn(f"mix_at_snr clipped {clipped.mean():.2%} of samples", RuntimeWarning, stacklevel=2)
    return Waveform(np.clip(mixed, -1.0, 1.0), clean.sample_rate)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    clean_path: str
    noisy_path: str | None
    snr_db: float | None
    noise_kind: str | None


class CorpusManifest:
    """Ordered utterance records; relative paths resolve against ``root``."""

    def __init__(self, records, root="."):
        self.records = list(records)
        self.root = Path(root)
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids are not unique")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self):
        return [r.id for r in self.records]

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def check_files(self):
        for r in self.records:
            for p in (r.clean_path, r.noisy_path):
                if p is not None and not self.resolve(p).is_file():
                    raise DataError(f"{r.id}: missing file {p}")
        return self

    def load_clean(self):
        return [read_features(self.resolve(r.clean_path)) for r in self.records]

    def load_noisy(self):
        out = []
        for r in self.records:
            if r.noisy_path is None:
                raise DataError(f"{r.id} has no noisy stream")
            out.append(read_features(self.resolve(r.noisy_path)))
        return out

    def load_pairs(self):
        """``(noisy87, clean29)`` per record; frame counts must agree."""
        pairs = []
        for r, x, y in zip(self.records, self.load_noisy(), self.load_clean()):
            if x.n_frames != y.n_frames:
                raise DataError(f"{r.id}: {x.n_frames} noisy vs {y.n_frames} clean frames")
            pairs.append((x, y))
        return pairs


def _fmt(value):
    return "-" if value is None else (value if isinstance(value, str) else repr(float(value)))


def write_manifest(path, manifest: CorpusManifest) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for r in manifest.records:
            fh.write("\t".join([r.id, r.clean_path, _fmt(r.noisy_path), _fmt(r.snr_db),
                                _fmt(r.noise_kind)]) + "\n")


def read_manifest(path, check_files=True) -> CorpusManifest:
    """Read a manifest; relative feature paths are taken relative to its directory."""
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(row)}")
            uid, clean, noisy, snr, kind = row
            try:
                snr_v = None if snr == "-" else float(snr)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad snr_db {snr!r}") from None
            records.append(ManifestRecord(uid, clean, None if noisy == "-" else noisy, snr_v,
                                          None if kind == "-" else kind))
    manifest = CorpusManifest(records, path.parent)
    return manifest.check_files() if check_files else manifest


# --------------------------------------------------------------------------
# corpus builders
# --------------------------------------------------------------------------

def _utterance_rng(cfg, split, role, index):
    ss = np.random.SeedSequence((cfg.seed, _SPLITS[split], _ROLES[role], index))
    signal_ss, noise_ss, draw_ss = ss.spawn(3)
    return signal_ss, noise_ss, np.random.default_rng(draw_ss)


def _make_utterance(cfg, split, role, index, noisy: bool, fbank):
    signal_ss, noise_ss, draws = _utterance_rng(cfg, split, role, index)
    duration = draws.uniform(cfg.min_duration, cfg.max_duration)
    clean = synth_clean(signal_ss, duration, cfg.sample_rate)
    clean_feat = log_mel(clean, fbank)
    if not noisy:
        return clean_feat, None, None, None
    kind = cfg.noise_kinds[int(draws.integers(len(cfg.noise_kinds)))]
    snr = float(draws.uniform(cfg.snr_low, cfg.snr_high))
    noise = synth_noise(noise_ss, kind, len(clean), cfg.sample_rate)
    noisy_feat = append_deltas(log_mel(mix_at_snr(clean, noise, snr), fbank))
    return clean_feat, noisy_feat, snr, kind


def build_parallel(cfg: SynthConfig, out_dir, split: str = "train",
                   fbank: FbankConfig = FbankConfig()) -> CorpusManifest:
    """Clean/noisy pairs for ``split``; writes FTR1 files and ``<split>.tsv``."""
    if split not in _SPLITS:
        raise ConfigError(f"split must be one of {sorted(_SPLITS)}")
    out_dir = Path(out_dir)
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(cfg.count(split)):
        uid = f"{split}-{i:04d}"
        clean, noisy, snr, kind = _make_utterance(cfg, split, "parallel", i, True, fbank)
        c_rel, n_rel = f"{split}/{uid}.clean.ftr", f"{split}/{uid}.noisy.ftr"
        write_features(out_dir / c_rel, clean)
        write_features(out_dir / n_rel, noisy)
        records.append(ManifestRecord(uid, c_rel, n_rel, snr, kind))
    manifest = CorpusManifest(records, out_dir)
    write_manifest(out_dir / f"{split}.tsv", manifest)
    return manifest


def build_unparallel(cfg: SynthConfig, out_dir, split: str = "train",
                     fbank: FbankConfig = FbankConfig()):
    """Disjoint noisy and clean sets of ``n // 2`` utterances each.

    The noisy records keep the path of their own clean source for
    diagnostics; trainers for unparalleled data never read it. Writes
    ``<split>-noisy.tsv`` and ``<split>-clean.tsv``.
    """
    if split not in _SPLITS:
        raise ConfigError(f"split must be one of {sorted(_SPLITS)}")
    n_each = cfg.count(split) // 2
    if n_each < 1:
        raise ConfigError("unparalleled corpora need at least two utterances")
    out_dir = Path(out_dir)
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    noisy_recs, clean_recs = [], []
    for i in range(n_each):
        uid = f"{split}-n{i:04d}"
        clean, noisy, snr, kind = _make_utterance(cfg, split, "noisy", i, True, fbank)
        c_rel, n_rel = f"{split}/{uid}.clean.ftr", f"{split}/{uid}.noisy.ftr"
        write_features(out_dir / c_rel, clean)
        write_features(out_dir / n_rel, noisy)
        noisy_recs.append(ManifestRecord(uid, c_rel, n_rel, snr, kind))
    for i in range(n_each):
        uid = f"{split}-c{i:04d}"
        clean, _, _, _ = _make_utterance(cfg, split, "clean", i, False, fbank)
        c_rel = f"{split}/{uid}.clean.ftr"
        write_features(out_dir / c_rel, clean)
        clean_recs.append(ManifestRecord(uid, c_rel, None, None, None))
    noisy_m, clean_m = CorpusManifest(noisy_recs, out_dir), CorpusManifest(clean_recs, out_dir)
    write_manifest(out_dir / f"{split}-noisy.tsv", noisy_m)
    write_manifest(out_dir / f"{split}-clean.tsv", clean_m)
    return noisy_m, clean_m


# --------------------------------------------------------------------------
# metrics (29-dim log-mel sequences)
# --------------------------------------------------------------------------

def _pair(enhanced, clean):
    e = np.asarray(getattr(enhanced, "data", enhanced), dtype=np.float64)
    c = np.asarray(getattr(clean, "data", clean), dtype=np.float64)
    if e.shape != c.shape or e.ndim != 2:
        raise DimensionError(f"metric inputs must be equal T x D matrices, got {e.shape} and {c.shape}")
    return e, c


def frame_mse(enhanced, clean) -> float:
    """Mean over frames of the squared error summed over dimensions."""
    e, c = _pair(enhanced, clean)
    d = e - c
    return float(np.sum(d * d) / e.shape[0])


def segmental_snr(enhanced, clean) -> float:
    """Frame-averaged SNR of mel power spectra, each frame clamped to [-10, 35] dB.

    Log-mel values are exponentiated back to band powers; a frame's SNR is
    ``10 log10(sum P_clean^2 / sum (P_enh - P_clean)^2)``.
    """
    e, c = _pair(enhanced, clean)
    pc, pe = np.exp(c), np.exp(e)
    num = np.sum(pc * pc, axis=1)
    den = np.sum((pe - pc) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(num / den)
    return float(np.mean(np.clip(snr, SEG_SNR_FLOOR, SEG_SNR_CEILING)))


def log_spectral_distance(enhanced, clean) -> float:
    """Frame-averaged RMS difference of the log-mel spectra in dB."""
    e, c = _pair(enhanced, clean)
    db = (10.0 / np.log(10.0)) * (e - c)
    return float(np.mean(np.sqrt(np.mean(db * db, axis=1))))


def passthrough(noisy: FeatureSequence) -> FeatureSequence:
    """The unenhanced reference: static slice of the noisy features."""
    return noisy.static
