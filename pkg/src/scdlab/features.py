"""Acoustic frontend: log-mel extraction, mean-variance normalization,
SpecAugment masking, and the binary feature-file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio

SCDF_MAGIC = b"SCDF"
SCDF_VERSION = 1

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
DEFAULT_FRAME_SHIFT_S = 0.010


@dataclass
class FeatureMatrix:
    """T x D grid of real-valued frames at a fixed frame shift."""

    frames: np.ndarray
    frame_shift_s: float = DEFAULT_FRAME_SHIFT_S

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"feature matrix must be 2-D with at least one frame, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains non-finite values")
        if self.frame_shift_s <= 0:
            raise ValueError("frame shift must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean and (floored) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be matching 1-D vectors")
        if np.any(self.std < STD_FLOOR):
            raise ValueError(f"std entries must be >= {STD_FLOOR}")


@dataclass(frozen=True)
class SpecAugmentPolicy:
    n_time_masks: int = 0
    max_time_width_frames: int = 0
    n_freq_masks: int = 0
    max_freq_width_bins: int = 0
    mask_value: float = 0.0

    def __post_init__(self):
        if min(self.n_time_masks, self.max_time_width_frames,
               self.n_freq_masks, self.max_freq_width_bins) < 0:
            raise ValueError("mask counts and widths must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.n_time_masks == 0 or self.max_time_width_frames == 0) and (
            self.n_freq_masks == 0 or self.max_freq_width_bins == 0
        )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_freqs(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Center frequencies (Hz) of the triangular mel filters."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """(n_bins, n_mels) triangular filterbank with mel-spaced corner
    frequencies (HTK mel formula), no area normalization."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((bin_freqs.size, n_mels))
    for k in range(n_mels):
        lo, center, hi = pts[k], pts[k + 1], pts[k + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[:, k] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def logmel(
    waveform,
    sample_rate: int,
    window_s: float = 0.032,
    shift_s: float = DEFAULT_FRAME_SHIFT_S,
    n_mels: int = 128,
    log_floor: float = LOG_FLOOR,
) -> FeatureMatrix:
    """Log mel-filterbank energies from a mono waveform.

    Frames are cut with a periodic Hann window; the FFT size is the next
    power of two at or above the window length; output cells are
    log(mel energy + log_floor).
    """
    wav = np.asarray(waveform, dtype=np.float64).ravel()
    if sample_rate < 8000:
        raise ValueError(f"sample rate {sample_rate} below the 8 kHz minimum")
    win = int(round(window_s * sample_rate))
    hop = int(round(shift_s * sample_rate))
    if wav.size < win:
        raise ValueError(f"waveform of {wav.size} samples is shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(wav, win)[::hop]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    n_fft = _next_pow2(win)
    spectrum = np.abs(np.fft.rfft(frames * window, n=n_fft)) ** 2
    fb = mel_filterbank(n_mels, n_fft, sample_rate)
    feats = np.log(spectrum @ fb + log_floor)
    return FeatureMatrix(feats, frame_shift_s=shift_s)


def compute_norm_stats(features: FeatureMatrix) -> NormStats:
    mean = features.frames.mean(axis=0)
    std = features.frames.std(axis=0)
    return NormStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def mvn(features: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    """Per-dimension mean-variance normalization."""
    if stats.mean.shape[0] != features.dim:
        raise ValueError(f"stats dimension {stats.mean.shape[0]} != feature dimension {features.dim}")
    out = (features.frames - stats.mean) / stats.std
    return FeatureMatrix(out, frame_shift_s=features.frame_shift_s)


def specaugment(features: FeatureMatrix, policy: SpecAugmentPolicy, rng_seed: int) -> FeatureMatrix:
    """Blank out seeded random time/frequency blocks.

    Each mask draws a uniform start position over the whole axis, then a
    width up to the policy maximum (truncated at the edge), so start
    positions are exactly uniform and blocks never exceed the stated width.
    """
    T, D = features.frames.shape
    if policy.max_time_width_frames >= T and policy.n_time_masks > 0:
        raise ValueError("time mask width must be smaller than the number of frames")
    if policy.max_freq_width_bins >= D and policy.n_freq_masks > 0:
        raise ValueError("frequency mask width must be smaller than the feature dimension")
    out = features.frames.copy()
    rng = np.random.default_rng(rng_seed)
    for _ in range(policy.n_time_masks):
        start = int(rng.integers(0, T))
        width = int(rng.integers(0, policy.max_time_width_frames + 1))
        width = min(width, T - start)
        out[start : start + width, :] = policy.mask_value
    for _ in range(policy.n_freq_masks):
        start = int(rng.integers(0, D))
        width = int(rng.integers(0, policy.max_freq_width_bins + 1))
        width = min(width, D - start)
        out[:, start : start + width] = policy.mask_value
    return FeatureMatrix(out, frame_shift_s=features.frame_shift_s)


def write_features(path: str | Path, features: FeatureMatrix) -> None:
    """Binary SCDF layout: magic, version u32, T u32, D u32, then T*D
    float32 little-endian values in row-major order."""
    T, D = features.frames.shape
    header = SCDF_MAGIC + struct.pack("<III", SCDF_VERSION, T, D)
    payload = features.frames.astype("<f4").tobytes(order="C")
    fileio.atomic_write_bytes(path, header + payload)


def read_features(path: str | Path, frame_shift_s: float = DEFAULT_FRAME_SHIFT_S) -> FeatureMatrix:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SCDF_MAGIC:
        raise ValueError(f"{path}: not an SCDF feature file")
    version, T, D = struct.unpack("<III", raw[4:16])
    if version != SCDF_VERSION:
        raise ValueError(f"{path}: unsupported SCDF version {version}")
    expected = 16 + 4 * T * D
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated feature file ({len(raw)} bytes, expected {expected})")
    frames = np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, D).astype(np.float64)
    return FeatureMatrix(frames, frame_shift_s=frame_shift_s)
