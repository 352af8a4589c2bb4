"""Masked-prediction pretraining with a frozen random-projection quantizer.

The quantizer projects input frames and labels each with the index of the
nearest codebook row; training masks spans of input frames and asks a
small prediction head on top of the encoder to recover the labels of the
masked frames. Projection and codebook are fixed at construction and are
never parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import DOWNSAMPLE_FACTOR, downsampled_len

QUANTIZER_PROJECTION = "quantizer/projection"
QUANTIZER_CODEBOOK = "quantizer/codebook"
HEAD_WEIGHT = "bestrq_head/w"
HEAD_BIAS = "bestrq_head/b"


@dataclass(frozen=True)
class BestRqConfig:
    proj_dim: int = 8
    codebook_size: int = 16
    span_frames: int = 4
    mask_prob: float = 0.05
    quantizer_seed: int = 77

    def __post_init__(self):
        if self.proj_dim < 1 or self.codebook_size < 1:
            raise ValueError("quantizer dimensions must be positive")
        if self.span_frames < 1:
            raise ValueError("span_frames must be at least 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "proj_dim": self.proj_dim,
            "codebook_size": self.codebook_size,
            "span_frames": self.span_frames,
            "mask_prob": self.mask_prob,
            "quantizer_seed": self.quantizer_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BestRqConfig":
        return cls(**d)


@dataclass(frozen=True)
class RandomQuantizer:
    """Frozen random projection + codebook. Never updated by training."""

    projection: np.ndarray  # (input_dim, proj_dim)
    codebook: np.ndarray  # (codebook_size, proj_dim)
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "projection", np.asarray(self.projection, dtype=np.float64))
        object.__setattr__(self, "codebook", np.asarray(self.codebook, dtype=np.float64))
        self.projection.setflags(write=False)
        self.codebook.setflags(write=False)
        if self.projection.ndim != 2 or self.codebook.ndim != 2:
            raise ValueError("projection and codebook must be matrices")
        if self.projection.shape[1] != self.codebook.shape[1]:
            raise ValueError("projection output dim must match codebook dim")
        if len({row.tobytes() for row in self.codebook}) != self.codebook.shape[0]:
            raise ValueError("codebook rows must be distinct")

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebook.shape[0]


def make_quantizer(input_dim: int, config: BestRqConfig) -> RandomQuantizer:
    """Projection from a fan-in-scaled uniform; codebook rows standard
    normal then l2-normalized."""
    rng = np.random.default_rng(config.quantizer_seed)
    limit = math.sqrt(3.0 / input_dim)
    projection = rng.uniform(-limit, limit, size=(input_dim, config.proj_dim))
    codebook = rng.standard_normal((config.codebook_size, config.proj_dim))
    codebook /= np.linalg.norm(codebook, axis=1, keepdims=True)
    return RandomQuantizer(projection=projection, codebook=codebook, seed=config.quantizer_seed)


def quantize(q: RandomQuantizer, features) -> np.ndarray:
    """Per-frame label: index of the codebook row nearest the projected
    frame (squared euclidean; ties go to the lowest index)."""
    frames = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != q.input_dim:
        raise ValueError(f"feature dimension {frames.shape} does not match quantizer input dim {q.input_dim}")
    proj = frames @ q.projection
    d2 = ((proj[:, None, :] - q.codebook[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


@dataclass
class MaskSpec:
    """Boolean per-frame mask built from unioned fixed-length spans."""

    mask: np.ndarray
    span_frames: int
    mask_prob: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 1:
            raise ValueError("mask must be 1-D")


def sample_mask(T: int, span_frames: int, mask_prob: float, rng_seed: int) -> MaskSpec:
    """Each frame independently starts a span with probability mask_prob;
    spans cover span_frames frames (truncated at T) and overlaps union."""
    if span_frames < 1:
        raise ValueError("span_frames must be at least 1")
    rng = np.random.default_rng(rng_seed)
    starts = rng.random(T) < mask_prob
    mask = np.zeros(T, dtype=bool)
    for t in np.flatnonzero(starts):
        mask[t : t + span_frames] = True
    return MaskSpec(mask=mask, span_frames=span_frames, mask_prob=mask_prob)


def apply_mask(frames: np.ndarray, mask: np.ndarray, fill_value: float = 0.0) -> np.ndarray:
    out = np.array(frames, dtype=np.float64, copy=True)
    out[mask] = fill_value
    return out


def downsample_mask(mask: np.ndarray, t_out: int | None = None) -> np.ndarray:
    """A downsampled frame counts as masked if any of its source frames is."""
    T = mask.shape[0]
    t_out = downsampled_len(T) if t_out is None else t_out
    out = np.zeros(t_out, dtype=bool)
    for j in range(t_out):
        out[j] = mask[j * DOWNSAMPLE_FACTOR : min((j + 1) * DOWNSAMPLE_FACTOR, T)].any()
    return out


def downsample_labels(labels: np.ndarray, t_out: int | None = None) -> np.ndarray:
    """Label of a downsampled frame = label of its first source frame."""
    T = labels.shape[0]
    t_out = downsampled_len(T) if t_out is None else t_out
    idx = np.minimum(np.arange(t_out) * DOWNSAMPLE_FACTOR, T - 1)
    return labels[idx]


def masked_cross_entropy(log_probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over masked positions only.

    Returns (nll, seed) where seed = d nll / d log_probs, for feeding the
    autodiff tape at the head's log-softmax output. Unmasked frames get a
    zero gradient by construction.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("no prediction targets: the mask selects no frames")
    nll = float(-log_probs[idx, labels[idx]].mean())
    seed = np.zeros_like(log_probs)
    seed[idx, labels[idx]] = -1.0 / idx.size
    return nll, seed
