"""Synthetic corpus generation.

Every speaker carries a fixed additive bias over the leading feature
dimensions and every alphabet word a fixed pattern over the trailing ones,
so both speaker identity and word identity stay recoverable from frames.
Segment boundaries land exactly on frame boundaries and the ground-truth
times in the manifest are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .corpus import SpeakerSegment, Utterance, write_manifest
from .features import FeatureMatrix

DEFAULT_ALPHABET = ("ba", "de", "go", "ki", "lu", "mo", "na", "po", "ra", "su", "ti", "wu")


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 4
    n_utterances: int = 32
    n_languages: int = 2
    alphabet: tuple[str, ...] = DEFAULT_ALPHABET
    feature_dim: int = 16
    signature_dim: int = 8
    frames_per_token: int = 8
    gap_frames: int = 2
    inter_segment_gap_frames: int = 0
    segments_min: int = 1
    segments_max: int = 4
    words_min: int = 4
    words_max: int = 12
    speaker_gain: float = 3.0
    token_gain: float = 1.5
    noise_std: float = 0.3
    frame_shift_s: float = 0.01
    force_alternation: bool = True
    pattern_seed: int = 1234

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("n_speakers must be at least 2: no change points are possible otherwise")
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be positive")
        if not 1 <= self.n_languages:
            raise ValueError("n_languages must be positive")
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ValueError("alphabet must be a non-empty set of distinct words")
        if not 0 < self.signature_dim < self.feature_dim:
            raise ValueError("signature_dim must be strictly between 0 and feature_dim")
        if self.segments_min < 1 or self.segments_max < self.segments_min:
            raise ValueError("bad segment count range")
        if self.words_min < 1 or self.words_max < self.words_min:
            raise ValueError("bad words-per-segment range")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be positive")

    def to_dict(self) -> dict:
        return {
            "n_speakers": self.n_speakers,
            "n_utterances": self.n_utterances,
            "n_languages": self.n_languages,
            "alphabet": list(self.alphabet),
            "feature_dim": self.feature_dim,
            "signature_dim": self.signature_dim,
            "frames_per_token": self.frames_per_token,
            "gap_frames": self.gap_frames,
            "inter_segment_gap_frames": self.inter_segment_gap_frames,
            "segments_min": self.segments_min,
            "segments_max": self.segments_max,
            "words_min": self.words_min,
            "words_max": self.words_max,
            "speaker_gain": self.speaker_gain,
            "token_gain": self.token_gain,
            "noise_std": self.noise_std,
            "frame_shift_s": self.frame_shift_s,
            "force_alternation": self.force_alternation,
            "pattern_seed": self.pattern_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "alphabet" in d:
            d["alphabet"] = tuple(d["alphabet"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthCorpus:
    """In-memory result of synth_corpus: utterances plus their features and
    the fixed pattern banks used to generate them."""

    utterances: list[Utterance]
    features: dict[str, FeatureMatrix]
    speaker_signatures: np.ndarray  # (n_speakers, feature_dim)
    token_patterns: np.ndarray  # (len(alphabet), feature_dim)
    config: SynthConfig
    seed: int


def _pattern_banks(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(config.pattern_seed)
    sig = np.zeros((config.n_speakers, config.feature_dim))
    sig[:, : config.signature_dim] = (
        rng.standard_normal((config.n_speakers, config.signature_dim)) * config.speaker_gain
    )
    tok = np.zeros((len(config.alphabet), config.feature_dim))
    tok[:, config.signature_dim :] = (
        rng.standard_normal((len(config.alphabet), config.feature_dim - config.signature_dim))
        * config.token_gain
    )
    return sig, tok


def synth_corpus(config: SynthConfig, seed: int) -> SynthCorpus:
    """Deterministic synthetic corpus: a pure function of (config, seed).

    The speaker/word pattern banks depend only on config.pattern_seed, so
    corpora drawn with different seeds (e.g. train vs held-out) share the
    same speakers and words while differing in content.
    """
    signatures, patterns = _pattern_banks(config)
    rng = np.random.default_rng(seed)
    word_ids = np.arange(len(config.alphabet))

    utterances: list[Utterance] = []
    features: dict[str, FeatureMatrix] = {}
    for u in range(config.n_utterances):
        language_id = int(rng.integers(0, config.n_languages))
        n_segments = int(rng.integers(config.segments_min, config.segments_max + 1))

        speakers: list[int] = []
        for k in range(n_segments):
            if config.force_alternation and k > 0:
                choices = [s for s in range(config.n_speakers) if s != speakers[-1]]
                speakers.append(int(choices[rng.integers(0, len(choices))]))
            else:
                speakers.append(int(rng.integers(0, config.n_speakers)))

        rows: list[np.ndarray] = []
        segments: list[SpeakerSegment] = []
        cursor = 0  # frame index
        for k, spk in enumerate(speakers):
            if k > 0 and config.inter_segment_gap_frames > 0:
                rows.append(np.zeros((config.inter_segment_gap_frames, config.feature_dim)))
                cursor += config.inter_segment_gap_frames
            n_words = int(rng.integers(config.words_min, config.words_max + 1))
            words = word_ids[rng.integers(0, len(word_ids), size=n_words)]
            start = cursor
            for w_idx, w in enumerate(words):
                block = np.tile(signatures[spk] + patterns[w], (config.frames_per_token, 1))
                rows.append(block)
                cursor += config.frames_per_token
                if w_idx < n_words - 1 and config.gap_frames > 0:
                    rows.append(np.tile(signatures[spk], (config.gap_frames, 1)))
                    cursor += config.gap_frames
            segments.append(
                SpeakerSegment(
                    speaker_id=f"spk{spk}",
                    start_s=round(start * config.frame_shift_s, 9),
                    end_s=round(cursor * config.frame_shift_s, 9),
                    transcript=" ".join(config.alphabet[w] for w in words),
                    language_id=language_id,
                )
            )
        frames = np.concatenate(rows, axis=0)
        frames = frames + rng.standard_normal(frames.shape) * config.noise_std

        utt_id = f"utt-{u:05d}"
        utt = Utterance(
            id=utt_id,
            segments=segments,
            duration_s=round(cursor * config.frame_shift_s, 9),
            language_id=language_id,
            feature_file=f"features/{utt_id}.scdf",
        )
        utterances.append(utt)
        features[utt_id] = FeatureMatrix(frames, frame_shift_s=config.frame_shift_s)

    return SynthCorpus(
        utterances=utterances,
        features=features,
        speaker_signatures=signatures,
        token_patterns=patterns,
        config=config,
        seed=seed,
    )


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> Path:
    """Write manifest.jsonl plus one SCDF feature file per utterance.

    Returns the manifest path. Output is byte-stable for a fixed
    (config, seed).
    """
    from .features import write_features

    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, corpus.utterances)
    for utt in corpus.utterances:
        write_features(out_dir / utt.feature_file, corpus.features[utt.id])
    fileio.write_json(
        out_dir / "synth_meta.json",
        {"config": corpus.config.to_dict(), "seed": corpus.seed},
    )
    return manifest_path
