"""scdlab: a desk-scale speaker change detection laboratory.

Synthesizes speaker-labeled feature corpora, trains a miniature CTC
encoder with turn-token targets (masked-prediction pretraining, ASR
pretraining, fine-tuning), decodes greedily with turn-token posterior
scaling, and scores with interval-overlap detection metrics and
turn-token-stripped word error rate.
"""

__version__ = "0.1.0"

from .corpus import (
    SpeakerSegment,
    TokenSeq,
    Utterance,
    Vocabulary,
    build_vocab,
    group_segments,
    make_target,
    read_manifest,
    write_manifest,
)
from .ctc import (
    CtcLossResult,
    DecodeConfig,
    DecodeResult,
    LogPosteriorMatrix,
    brute_force_ctc,
    collapse_alignment,
    ctc_greedy_decode,
    ctc_loss,
)
from .encoder import ModelConfig, init_parameters, select_trainable
from .features import FeatureMatrix, NormStats, SpecAugmentPolicy, logmel, mvn, specaugment
from .scoring import RefChangeInterval, ScdCounts, ScdReport, aggregate, f1, ref_intervals, score_scd, wer
from .synth import SynthConfig, synth_corpus
from .training import LrSchedule, TrainConfig, Trainer, lr_at, warm_start_scd

__all__ = [
    "SpeakerSegment",
    "TokenSeq",
    "Utterance",
    "Vocabulary",
    "build_vocab",
    "group_segments",
    "make_target",
    "read_manifest",
    "write_manifest",
    "CtcLossResult",
    "DecodeConfig",
    "DecodeResult",
    "LogPosteriorMatrix",
    "brute_force_ctc",
    "collapse_alignment",
    "ctc_greedy_decode",
    "ctc_loss",
    "ModelConfig",
    "init_parameters",
    "select_trainable",
    "FeatureMatrix",
    "NormStats",
    "SpecAugmentPolicy",
    "logmel",
    "mvn",
    "specaugment",
    "RefChangeInterval",
    "ScdCounts",
    "ScdReport",
    "aggregate",
    "f1",
    "ref_intervals",
    "score_scd",
    "wer",
    "SynthConfig",
    "synth_corpus",
    "LrSchedule",
    "TrainConfig",
    "Trainer",
    "lr_at",
    "warm_start_scd",
]
