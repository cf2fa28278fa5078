"""Audio front end: framing, log mel filterbank energies, MFCC + deltas and context stacking."""
from __future__ import annotations

import csv
import functools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.fft import dct

import config

logger = logging.getLogger(__name__)


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono audio samples at `sample_rate` Hz.

    `start_time` places the buffer on an absolute clock (seconds) so frames
    can be aligned with telemetry; it is 0 for standalone files.
    """
    samples: np.ndarray
    sample_rate: int = config.SAMPLE_RATE
    start_time: float = 0.0

    def __post_init__(self):
        samples = _frozen(self.samples)
        if samples.ndim != 1:
            raise ValueError(f"AudioBuffer holds mono audio only, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"Sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Audio samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def at(self, start_time: float) -> "AudioBuffer":
        return AudioBuffer(self.samples, self.sample_rate, float(start_time))


@dataclass(frozen=True, eq=False)
class FrameSequence:
    frames: np.ndarray  # (n_frames, frame_len) raw sample windows
    frame_len_ms: float
    hop_ms: float
    sample_rate: int = config.SAMPLE_RATE
    start_time: float = 0.0

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(len(self)) * (self.hop_ms / 1000.0)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    frame_index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("FeatureVector needs a non-empty 1-d vector")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"Non-finite feature at frame {self.frame_index}")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class StackedInput:
    values: np.ndarray
    center_frame_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def dim(self) -> int:
        return self.values.shape[0]


FeatureInput = Union[Sequence[FeatureVector], np.ndarray]


def as_matrix(features: FeatureInput) -> np.ndarray:
    """Return features as an (n_frames, dim) float64 matrix."""
    if isinstance(features, np.ndarray):
        matrix = np.asarray(features, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError(f"Feature matrix must be 2-d, got shape {matrix.shape}")
        return matrix
    if len(features) == 0:
        return np.empty((0, 0))
    dims = {f.dim for f in features}
    if len(dims) != 1:
        raise ValueError(f"Feature vectors have mixed dimensions: {sorted(dims)}")
    return np.vstack([f.values for f in features])


def to_feature_vectors(matrix: np.ndarray, timestamps: Sequence[float] | None = None) -> list[FeatureVector]:
    if timestamps is None:
        timestamps = np.zeros(len(matrix))
    return [FeatureVector(row, i, float(t)) for i, (row, t) in enumerate(zip(matrix, timestamps))]


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

def pre_emphasis(samples: np.ndarray, coeff: float = config.PRE_EMPHASIS) -> np.ndarray:
    """y[n] = x[n] - coeff * x[n-1]; coeff 0 returns a copy of the input."""
    x = np.asarray(samples, dtype=np.float64)
    if coeff == 0.0 or x.size == 0:
        return x.copy()
    return np.concatenate([x[:1], x[1:] - coeff * x[:-1]])


def frame_signal(audio: AudioBuffer, frame_len_ms: float = config.FRAME_LEN_MS,
                 hop_ms: float = config.HOP_MS) -> FrameSequence:
    """Cut audio into frames of `frame_len_ms` every `hop_ms`.

    Frame k starts at sample k * hop and is a bit-exact copy of the input.
    Audio shorter than one frame yields an empty sequence.
    """
    if hop_ms <= 0:
        raise ValueError(f"Hop must be positive, got {hop_ms} ms")
    if frame_len_ms < hop_ms:
        raise ValueError(f"Frame length {frame_len_ms} ms is shorter than hop {hop_ms} ms")
    if len(audio) == 0:
        raise ValueError("Audio is empty")

    frame_len = int(round(frame_len_ms * audio.sample_rate / 1000.0))
    hop = int(round(hop_ms * audio.sample_rate / 1000.0))
    if hop < 1 or frame_len < 1:
        raise ValueError(f"Frame geometry rounds to zero samples at {audio.sample_rate} Hz")

    n = len(audio)
    if n < frame_len:
        frames = np.empty((0, frame_len))
    else:
        count = (n - frame_len) // hop + 1
        index = hop * np.arange(count)[:, None] + np.arange(frame_len)[None, :]
        frames = audio.samples[index]
    return FrameSequence(frames, frame_len_ms, hop_ms, audio.sample_rate, audio.start_time)


# ---------------------------------------------------------------------------
# Spectral analysis
# ---------------------------------------------------------------------------

def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError(f"Length must be positive, got {n}")
    return 1 << (n - 1).bit_length()


@functools.lru_cache(maxsize=16)
def _bit_reversal(n: int) -> np.ndarray:
    levels = n.bit_length() - 1
    index = np.arange(n)
    reversed_index = np.zeros(n, dtype=np.int64)
    for bit in range(levels):
        reversed_index |= ((index >> bit) & 1) << (levels - 1 - bit)
    return reversed_index


def radix2_fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    The last axis must be a power of two. Leading axes are transformed
    independently, so a whole (n_frames, nfft) block goes in one call.
    """
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    lead = a.shape[:-1]
    a = a[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def power_spectrum(frames: np.ndarray, nfft: int) -> np.ndarray:
    """|FFT|^2 / nfft of zero-padded frames, bins 0..nfft/2."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] > nfft:
        raise ValueError(f"Frame length {frames.shape[1]} exceeds FFT size {nfft}")
    padded = np.zeros((frames.shape[0], nfft))
    padded[:, :frames.shape[1]] = frames
    spectrum = radix2_fft(padded)[:, :nfft // 2 + 1]
    return (spectrum.real ** 2 + spectrum.imag ** 2) / nfft


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(n_filters: int, nfft: int, sample_rate: int,
                   low_hz: float = config.MEL_LOW_HZ, high_hz: float = config.MEL_HIGH_HZ) -> np.ndarray:
    """Triangular mel filters as an (n_filters, nfft/2 + 1) weight matrix.

    Triangles are evaluated at the exact bin frequencies, so adjacent filters
    overlap and every bin strictly between the outer edges gets some weight.
    """
    if n_filters < 1:
        raise ValueError(f"Need at least one filter, got {n_filters}")
    high_hz = min(high_hz, sample_rate / 2.0)
    if not 0.0 <= low_hz < high_hz:
        raise ValueError(f"Invalid filterbank range {low_hz}-{high_hz} Hz")

    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2))
    bins_hz = np.arange(nfft // 2 + 1) * sample_rate / nfft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins_hz[None, :] - left) / (center - left)
    falling = (right - bins_hz[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.sum(axis=1) <= 0.0)
    if empty.size:
        raise ValueError(f"{n_filters} filters are too narrow for a {nfft}-point FFT (empty rows {empty.tolist()})")
    weights.setflags(write=False)
    return weights


def filterbank_edges(n_filters: int, sample_rate: int, low_hz: float = config.MEL_LOW_HZ,
                     high_hz: float = config.MEL_HIGH_HZ) -> np.ndarray:
    high_hz = min(high_hz, sample_rate / 2.0)
    return mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2))


def log_filterbank_matrix(frames: np.ndarray, sample_rate: int = config.SAMPLE_RATE,
                          n_filters: int = config.N_FILTERS) -> np.ndarray:
    """Log mel energies for a block of frames: Hamming -> power spectrum -> mel -> floored log."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    frame_len = frames.shape[1]
    if frame_len < 2:
        raise ValueError(f"Frame must hold at least 2 samples, got {frame_len}")
    nfft = next_pow2(frame_len)
    power = power_spectrum(frames * np.hamming(frame_len), nfft)
    energies = power @ mel_filterbank(n_filters, nfft, sample_rate).T
    return np.log(np.maximum(energies, config.ENERGY_FLOOR))


def log_filterbank(frame: np.ndarray, sample_rate: int = config.SAMPLE_RATE,
                   n_filters: int = config.N_FILTERS, frame_index: int = 0,
                   timestamp: float = 0.0) -> FeatureVector:
    """40-dim log filterbank energies of one frame (silence maps to log(1e-10))."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1:
        raise ValueError("log_filterbank takes a single 1-d frame")
    return FeatureVector(log_filterbank_matrix(frame[None, :], sample_rate, n_filters)[0],
                         frame_index, timestamp)


# ---------------------------------------------------------------------------
# Cepstra and deltas
# ---------------------------------------------------------------------------

def delta_features(features: np.ndarray, window: int = config.DELTA_WINDOW) -> np.ndarray:
    """Regression deltas sum_n n (c[t+n] - c[t-n]) / (2 sum_n n^2), edges replicated."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n == 0:
        return features.copy()
    padded = np.pad(features, ((window, window), (0, 0)), mode="edge")
    denominator = 2.0 * sum(k * k for k in range(1, window + 1))
    delta = np.zeros_like(features)
    for k in range(1, window + 1):
        delta += k * (padded[window + k:window + k + n] - padded[window - k:window - k + n])
    return delta / denominator


def cepstra_with_deltas(log_mel: np.ndarray, n_cepstra: int = config.N_CEPSTRA) -> np.ndarray:
    """DCT-II (orthonormal) coefficients 0..n_cepstra-1 followed by their deltas."""
    log_mel = np.asarray(log_mel, dtype=np.float64)
    if log_mel.shape[0] == 0:
        return np.empty((0, 2 * n_cepstra))
    cepstra = dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_cepstra]
    return np.hstack([cepstra, delta_features(cepstra)])


def mfcc_with_deltas(frames: FrameSequence, sample_rate: int | None = None) -> list[FeatureVector]:
    """13 MFCCs + 13 deltas per frame, the VAD feature set."""
    if len(frames) == 0:
        raise ValueError("mfcc_with_deltas needs at least one frame")
    rate = sample_rate or frames.sample_rate
    matrix = cepstra_with_deltas(log_filterbank_matrix(frames.frames, rate))
    return to_feature_vectors(matrix, frames.timestamps)


# ---------------------------------------------------------------------------
# Context stacking
# ---------------------------------------------------------------------------

def context_indices(n_frames: int, center: int, past: int = config.CONTEXT_PAST,
                    future: int = config.CONTEXT_FUTURE) -> np.ndarray:
    """Frame indices center-past .. center+future, clamped to the sequence (oldest first)."""
    return np.clip(np.arange(center - past, center + future + 1), 0, n_frames - 1)


def stack_context(features: FeatureInput, center: int, past: int = config.CONTEXT_PAST,
                  future: int = config.CONTEXT_FUTURE) -> StackedInput:
    matrix = as_matrix(features)
    n = matrix.shape[0]
    if n == 0:
        raise ValueError("stack_context needs at least one feature vector")
    if not 0 <= center < n:
        raise ValueError(f"Center frame {center} out of range [0, {n})")
    return StackedInput(matrix[context_indices(n, center, past, future)].reshape(-1), center)


def stack_all(matrix: np.ndarray, past: int = config.CONTEXT_PAST,
              future: int = config.CONTEXT_FUTURE) -> np.ndarray:
    """Stack context for every frame at once: (n, d) -> (n, (past + 1 + future) * d)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n, dim = matrix.shape
    if n == 0:
        return np.empty((0, (past + 1 + future) * dim))
    index = np.clip(np.arange(n)[:, None] + np.arange(-past, future + 1)[None, :], 0, n - 1)
    return matrix[index].reshape(n, -1)


# ---------------------------------------------------------------------------
# Whole-buffer extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Features:
    kws: np.ndarray         # (n, n_filters) log filterbank energies
    vad: np.ndarray         # (n, 26) MFCC + deltas
    energy: np.ndarray      # (n,) mean-square frame energy after pre-emphasis
    timestamps: np.ndarray  # (n,) frame start times in seconds

    def __len__(self) -> int:
        return self.kws.shape[0]


class FeatureExtractor:
    """Pre-emphasis, framing and both feature sets for one AudioBuffer."""

    def __init__(self, frame_len_ms=None, hop_ms=None, n_filters=None, pre_emphasis_coeff=None,
                 past=None, future=None):
        self.frame_len_ms = frame_len_ms if frame_len_ms is not None else config.FRAME_LEN_MS
        self.hop_ms = hop_ms if hop_ms is not None else config.HOP_MS
        self.n_filters = n_filters if n_filters is not None else config.N_FILTERS
        self.pre_emphasis = pre_emphasis_coeff if pre_emphasis_coeff is not None else config.PRE_EMPHASIS
        self.past = past if past is not None else config.CONTEXT_PAST
        self.future = future if future is not None else config.CONTEXT_FUTURE

    @property
    def latency_ms(self) -> float:
        """Algorithmic look-ahead per frame: the future context."""
        return self.future * self.hop_ms

    @property
    def stacked_dim(self) -> int:
        return (self.past + 1 + self.future) * self.n_filters

    def extract(self, audio: AudioBuffer) -> Features:
        if audio.sample_rate != config.SAMPLE_RATE:
            raise ValueError(
                f"Unsupported sample rate {audio.sample_rate} Hz; only {config.SAMPLE_RATE} Hz mono is accepted"
            )
        emphasized = AudioBuffer(pre_emphasis(audio.samples, self.pre_emphasis),
                                 audio.sample_rate, audio.start_time)
        frames = frame_signal(emphasized, self.frame_len_ms, self.hop_ms)
        if len(frames) == 0:
            logger.debug(f"Audio of {audio.duration:.3f} s is shorter than one frame")
            empty = np.empty((0,))
            return Features(np.empty((0, self.n_filters)), np.empty((0, 2 * config.N_CEPSTRA)), empty, empty)

        kws = log_filterbank_matrix(frames.frames, audio.sample_rate, self.n_filters)
        vad = cepstra_with_deltas(kws)
        energy = np.mean(frames.frames ** 2, axis=1)
        return Features(kws, vad, energy, frames.timestamps)

    def stacked(self, features: Features) -> np.ndarray:
        return stack_all(features.kws, self.past, self.future)


def write_feature_csv(path: str | Path, features: FeatureInput, timestamps: Sequence[float] | None = None) -> Path:
    """Debug dump: frame_index, timestamp_s, v0..v{dim-1}."""
    matrix = as_matrix(features)
    if timestamps is None:
        if isinstance(features, np.ndarray):
            timestamps = np.zeros(len(matrix))
        else:
            timestamps = [f.timestamp for f in features]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "timestamp_s"] + [f"v{i}" for i in range(matrix.shape[1])])
        for i, (row, t) in enumerate(zip(matrix, timestamps)):
            writer.writerow([i, repr(float(t))] + [repr(float(v)) for v in row])
    logger.debug(f"Wrote {len(matrix)} feature rows to {path}")
    return path
