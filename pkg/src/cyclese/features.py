"""Front-end: WAV input, log-mel filterbank, deltas and global CMVN.

Also holds the two on-disk feature formats:

* ``FTR1`` feature files: ``b"FTR1"``, u32 T, u32 D, u8 dim-kind code, then
  T*D little-endian f32 values in row-major order.
* ``NRM1`` normalization stats: ``b"NRM1"``, u32 D, D f64 means, D f64 stds.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateStatsError,
    DimensionError,
    FormatError,
    UnsupportedFormatError,
)

N_STATIC = 29
N_AUGMENTED = 3 * N_STATIC

DIM_KINDS = ("static29", "augmented87", "arbitrary")
_KIND_DIMS = {"static29": N_STATIC, "augmented87": N_AUGMENTED}

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DimensionError("waveform must be one-dimensional (mono)")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FbankConfig:
    """Log-mel front-end settings.

    Defaults are the usual ASR values: 25 ms Hamming window, 10 ms hop, FFT
    size rounded up to a power of two, 29 bands from 0 Hz to Nyquist.
    """

    frame_length_ms: float = 25.0
    frame_hop_ms: float = 10.0
    fft_size: int | None = None
    n_mels: int = N_STATIC
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    floor: float = LOG_FLOOR

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_length_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_hop_ms * sample_rate / 1000.0))

    def resolve(self, sample_rate: int) -> tuple[int, int, int, float]:
        """Return ``(win, hop, nfft, fmax)`` for ``sample_rate`` after validation."""
        win = self.window_samples(sample_rate)
        hop = self.hop_samples(sample_rate)
        if win < 1 or hop < 1:
            raise ConfigError("frame length and hop must each cover at least one sample")
        nfft = self.fft_size if self.fft_size is not None else 1 << (win - 1).bit_length()
        if nfft < win:
            raise ConfigError(f"fft_size {nfft} is shorter than the window ({win} samples)")
        fmax = sample_rate / 2.0 if self.fmax_hz is None else float(self.fmax_hz)
        if not (0.0 <= self.fmin_hz < fmax <= sample_rate / 2.0):
            raise ConfigError(
                f"need 0 <= fmin < fmax <= nyquist, got fmin={self.fmin_hz} fmax={fmax}"
            )
        if self.n_mels < 1:
            raise ConfigError("n_mels must be at least 1")
        if not self.floor > 0:
            raise ConfigError("log floor must be positive")
        return win, hop, nfft, fmax


@dataclass(frozen=True)
class FeatureSequence:
    data: np.ndarray
    dim_kind: str = "arbitrary"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"features must be a T x D matrix, got shape {data.shape}")
        if data.shape[0] < 1:
            raise DimensionError("feature sequence needs at least one frame")
        if self.dim_kind not in DIM_KINDS:
            raise ValueError(f"unknown dim_kind {self.dim_kind!r}")
        want = _KIND_DIMS.get(self.dim_kind)
        if want is not None and data.shape[1] != want:
            raise DimensionError(f"{self.dim_kind} features need D={want}, got D={data.shape[1]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature sequence contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def static(self) -> "FeatureSequence":
        """First 29 columns, the static log-mel part of an augmented sequence."""
        if self.dim_kind != "augmented87":
            raise DimensionError("static slice needs augmented87 features")
        return FeatureSequence(self.data[:, :N_STATIC], "static29")


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DimensionError("mean and std lengths differ")
        if np.any(~(std > 0)):
            raise DegenerateStatsError("every std component must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _as_array(seq) -> np.ndarray:
    return seq.data if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise FormatError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: {n_channels} channels, only mono is supported")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only PCM-16 is supported")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wave_: Waveform) -> None:
    """Write a waveform as mono PCM-16; values are rounded and saturated."""
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wave_.sample_rate))
        fh.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# log-mel filterbank
# --------------------------------------------------------------------------

def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz): lower edge, band centers, upper edge."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int, nfft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular weights, shape ``(n_mels, nfft // 2 + 1)``.

    Triangles are evaluated at the exact bin frequencies rather than snapped
    to integer bins, so narrow low-frequency bands never vanish entirely.
    """
    edges = mel_band_edges(n_mels, fmin, fmax)
    freqs = np.arange(nfft // 2 + 1) * (sample_rate / nfft)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = samples.shape[0]
    if n < win:
        raise ConfigError(f"signal of {n} samples is shorter than one {win}-sample window")
    n_frames = 1 + (n - win) // hop
    return np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n_frames]


def log_mel(wave_: Waveform, cfg: FbankConfig = FbankConfig()) -> FeatureSequence:
    win, hop, nfft, fmax = cfg.resolve(wave_.sample_rate)
    frames = frame_signal(wave_.samples, win, hop) * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2
    weights = mel_filterbank(cfg.n_mels, nfft, wave_.sample_rate, cfg.fmin_hz, fmax)
    energies = power @ weights.T
    kind = "static29" if cfg.n_mels == N_STATIC else "arbitrary"
    return FeatureSequence(np.log(energies + cfg.floor), kind)


# --------------------------------------------------------------------------
# deltas
# --------------------------------------------------------------------------

def delta(data: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas along axis 0 with first/last frames repeated at the edges."""
    if window < 1:
        raise ConfigError("delta window must be a positive integer")
    data = np.asarray(data, dtype=np.float64)
    T = data.shape[0]
    padded = np.concatenate([np.repeat(data[:1], window, 0), data, np.repeat(data[-1:], window, 0)])
    out = np.zeros_like(data)
    for n in range(1, window + 1):
        out += n * (padded[window + n:window + n + T] - padded[window - n:window - n + T])
    return out / (2.0 * sum(n * n for n in range(1, window + 1)))


def append_deltas(seq, window: int = 2) -> FeatureSequence:
    """Stack ``[static | delta | delta-delta]`` into an augmented87 sequence."""
    if isinstance(seq, FeatureSequence):
        if seq.dim_kind != "static29":
            raise DimensionError(f"append_deltas needs static29 input, got {seq.dim_kind}")
        data = seq.data
    else:
        data = np.asarray(seq, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != N_STATIC:
            raise DimensionError(f"append_deltas needs T x {N_STATIC} input, got {data.shape}")
    d1 = delta(data, window)
    d2 = delta(d1, window)
    return FeatureSequence(np.hstack([data, d1, d2]), "augmented87")


# --------------------------------------------------------------------------
# global mean/variance normalization
# --------------------------------------------------------------------------

def compute_global_stats(corpus) -> NormStats:
    """Pooled per-dimension mean and population std over every frame of ``corpus``."""
    arrays = [_as_array(s) for s in corpus]
    if not arrays:
        raise DegenerateStatsError("empty corpus")
    dims = {a.shape[1] for a in arrays}
    if len(dims) != 1:
        raise DimensionError(f"corpus mixes feature dimensions {sorted(dims)}")
    n = sum(a.shape[0] for a in arrays)
    if n < 2:
        raise DegenerateStatsError("need at least two frames for global statistics")
    # two passes over the corpus for a numerically stable variance
    mean = sum(a.sum(axis=0) for a in arrays) / n
    var = sum(((a - mean) ** 2).sum(axis=0) for a in arrays) / n
    if np.any(var <= 0):
        bad = np.flatnonzero(var <= 0).tolist()
        raise DegenerateStatsError(f"zero variance in dimensions {bad}")
    return NormStats(mean, np.sqrt(var))


def _check_dims(data: np.ndarray, stats: NormStats):
    if data.shape[-1] != stats.dim:
        raise DimensionError(f"features have D={data.shape[-1]} but stats have D={stats.dim}")


def normalize(seq, stats: NormStats):
    data = _as_array(seq)
    _check_dims(data, stats)
    out = (data - stats.mean) / stats.std
    return FeatureSequence(out, seq.dim_kind) if isinstance(seq, FeatureSequence) else out


def denormalize(seq, stats: NormStats):
    data = _as_array(seq)
    _check_dims(data, stats)
    out = data * stats.std + stats.mean
    return FeatureSequence(out, seq.dim_kind) if isinstance(seq, FeatureSequence) else out


# --------------------------------------------------------------------------
# FTR1 / NRM1 files
# --------------------------------------------------------------------------

FTR_MAGIC = b"FTR1"
NRM_MAGIC = b"NRM1"
_FTR_HEADER = struct.Struct("<4sIIB")
_NRM_HEADER = struct.Struct("<4sI")


def encode_features(seq: FeatureSequence) -> bytes:
    T, D = seq.data.shape
    header = _FTR_HEADER.pack(FTR_MAGIC, T, D, DIM_KINDS.index(seq.dim_kind))
    return header + seq.data.astype("<f4").tobytes(order="C")


def decode_features(blob: bytes) -> FeatureSequence:
    if len(blob) < _FTR_HEADER.size:
        raise FormatError("truncated FTR1 header")
    magic, T, D, code = _FTR_HEADER.unpack_from(blob)
    if magic != FTR_MAGIC:
        raise FormatError(f"bad feature-file magic {magic!r}")
    if code >= len(DIM_KINDS):
        raise FormatError(f"unknown dim-kind code {code}")
    payload = blob[_FTR_HEADER.size:]
    if len(payload) != 4 * T * D:
        raise FormatError(f"expected {4 * T * D} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, D)
    return FeatureSequence(data.astype(np.float64), DIM_KINDS[code])


def write_features(path, seq: FeatureSequence) -> None:
    Path(path).write_bytes(encode_features(seq))


def read_features(path) -> FeatureSequence:
    return decode_features(Path(path).read_bytes())


def write_stats(path, stats: NormStats) -> None:
    blob = _NRM_HEADER.pack(NRM_MAGIC, stats.dim)
    blob += stats.mean.astype("<f8").tobytes() + stats.std.astype("<f8").tobytes()
    Path(path).write_bytes(blob)


def read_stats(path) -> NormStats:
    blob = Path(path).read_bytes()
    if len(blob) < _NRM_HEADER.size:
        raise FormatError("truncated NRM1 header")
    magic, D = _NRM_HEADER.unpack_from(blob)
    if magic != NRM_MAGIC:
        raise FormatError(f"bad stats-file magic {magic!r}")
    body = blob[_NRM_HEADER.size:]
    if len(body) != 16 * D:
        raise FormatError(f"expected {16 * D} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8")
    return NormStats(values[:D].copy(), values[D:].copy())
