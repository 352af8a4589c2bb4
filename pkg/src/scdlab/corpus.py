"""Data model for speaker-labeled transcripts: segments, utterances,
vocabulary, turn-token target construction, and segment grouping."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from . import fileio

BLANK_TOKEN = "<blank>"
ST_TOKEN = "<st>"

DEFAULT_MAX_UTTERANCE_S = 30.0

# Schema for one manifest line (JSON-lines corpus format).
MANIFEST_LINE_SCHEMA = {
    "type": "object",
    "required": ["id", "duration_s", "language_id", "segments", "feature_file"],
    "properties": {
        "id": {"type": "string"},
        "duration_s": {"type": "number", "exclusiveMinimum": 0},
        "language_id": {"type": "integer", "minimum": 0},
        "feature_file": {"type": ["string", "null"]},
        "segments": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["speaker", "start_s", "end_s", "transcript"],
                "properties": {
                    "speaker": {"type": "string"},
                    "start_s": {"type": "number", "minimum": 0},
                    "end_s": {"type": "number", "exclusiveMinimum": 0},
                    "transcript": {"type": "string", "minLength": 1},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


def normalize_text(text: str) -> str:
    """Collapse runs of whitespace to single spaces and strip the ends."""
    return re.sub(r"\s+", " ", text).strip()


@dataclass(frozen=True)
class SpeakerSegment:
    """One speaker's transcript span with times in seconds."""

    speaker_id: str
    start_s: float
    end_s: float
    transcript: str
    language_id: int = 0

    def __post_init__(self):
        if self.start_s < 0:
            raise ValueError(f"segment start {self.start_s} is negative")
        if not self.start_s < self.end_s:
            raise ValueError(f"segment times out of order: [{self.start_s}, {self.end_s}]")
        if not normalize_text(self.transcript):
            raise ValueError("segment transcript is empty after whitespace normalization")
        if self.language_id < 0:
            raise ValueError("language_id must be non-negative")


@dataclass
class Utterance:
    """An ordered, non-overlapping run of segments with a total duration.

    Segment times are utterance-local (the first segment starts at or after
    0 and every segment ends at or before duration_s). When an utterance was
    cut out of a longer stream, ``source_offset_s`` records how much the
    original times were shifted so the stream can be reconstructed.
    """

    id: str
    segments: list[SpeakerSegment]
    duration_s: float
    language_id: int = 0
    feature_file: str | None = None
    features: object | None = None  # optional in-memory FeatureMatrix
    overlong: bool = False
    source_offset_s: float = 0.0

    def __post_init__(self):
        if not self.segments:
            raise ValueError(f"utterance {self.id!r} has no segments")
        for prev, cur in zip(self.segments, self.segments[1:]):
            if cur.start_s < prev.start_s:
                raise ValueError(f"utterance {self.id!r}: segments not ordered by start time")
            if cur.start_s < prev.end_s - 1e-9:
                raise ValueError(f"utterance {self.id!r}: segments overlap at {cur.start_s}")
        max_end = max(s.end_s for s in self.segments)
        if self.duration_s < max_end - 1e-9:
            raise ValueError(
                f"utterance {self.id!r}: duration {self.duration_s} shorter than last segment end {max_end}"
            )

    def validate_max_duration(self, max_dur_s: float = DEFAULT_MAX_UTTERANCE_S) -> None:
        if not self.overlong and self.duration_s > max_dur_s + 1e-9:
            raise ValueError(
                f"utterance {self.id!r}: duration {self.duration_s} exceeds maximum {max_dur_s}"
            )


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory with two reserved entries: blank (id 0) and the
    speaker turn token (id 1). Text tokenization can never produce either;
    the turn token only enters targets via make_target."""

    tokens: tuple[str, ...]
    mode: str  # "char" | "word"
    blank_id: int = 0
    st_id: int = 1

    def __post_init__(self):
        if self.mode not in ("char", "word"):
            raise ValueError(f"unknown tokenizer mode {self.mode!r}")
        if self.blank_id == self.st_id:
            raise ValueError("blank_id and st_id must differ")
        for idx in (self.blank_id, self.st_id):
            if not 0 <= idx < len(self.tokens):
                raise ValueError("reserved token id out of range")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens are not unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def encode(self, text: str) -> list[int]:
        """Tokenize plain text (no turn tokens, no blanks)."""
        table = self.token_to_id()
        ids = []
        for sym in tokenize_text(text, self.mode):
            idx = table.get(sym)
            if idx is None or idx in (self.blank_id, self.st_id):
                raise ValueError(f"out-of-vocabulary symbol: {sym!r}")
            ids.append(idx)
        return ids

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "mode": self.mode,
                "blank_id": self.blank_id, "st_id": self.st_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tokens=tuple(d["tokens"]), mode=d["mode"],
                   blank_id=d["blank_id"], st_id=d["st_id"])


def tokenize_text(text: str, mode: str) -> list[str]:
    """Split normalized text into symbols: characters (spaces included) in
    char mode, whitespace-separated words in word mode."""
    text = normalize_text(text)
    if not text:
        return []
    if mode == "char":
        return list(text)
    return text.split(" ")


@dataclass(frozen=True)
class TokenSeq:
    """A training/decoding token-id sequence; never contains the blank id."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, vocab: Vocabulary) -> None:
        for i in self.ids:
            if i == vocab.blank_id:
                raise ValueError("target contains the blank id")
            if not 0 <= i < vocab.size:
                raise ValueError(f"token id {i} out of range for vocabulary of size {vocab.size}")


def build_vocab(transcripts: list[str], mode: str = "word") -> Vocabulary:
    """Collect the corpus symbol set under the chosen tokenizer mode.

    Char mode always includes the space symbol so any normalized text stays
    encodable. Symbols sort deterministically after the two reserved ids.
    """
    if mode not in ("char", "word"):
        raise ValueError(f"unknown tokenizer mode {mode!r}")
    symbols: set[str] = set()
    for text in transcripts:
        symbols.update(tokenize_text(text, mode))
    symbols.discard(BLANK_TOKEN)
    symbols.discard(ST_TOKEN)
    if not symbols:
        raise ValueError("no symbols: cannot build a vocabulary from an empty corpus")
    if mode == "char":
        symbols.add(" ")
    tokens = (BLANK_TOKEN, ST_TOKEN) + tuple(sorted(symbols))
    return Vocabulary(tokens=tokens, mode=mode)


def make_target(utterance: Utterance, vocab: Vocabulary, trailing_st: bool = False) -> TokenSeq:
    """Concatenate tokenized segment transcripts, inserting the turn token
    wherever adjacent segments have different speakers (and optionally once
    at the very end). The sequence never starts with a turn token."""
    ids: list[int] = []
    prev_speaker: str | None = None
    for seg in utterance.segments:
        if prev_speaker is not None and seg.speaker_id != prev_speaker:
            ids.append(vocab.st_id)
        ids.extend(vocab.encode(seg.transcript))
        prev_speaker = seg.speaker_id
    if trailing_st:
        ids.append(vocab.st_id)
    seq = TokenSeq(tuple(ids))
    seq.validate(vocab)
    return seq


def group_segments(
    segments: list[SpeakerSegment],
    max_dur_s: float = DEFAULT_MAX_UTTERANCE_S,
    id_prefix: str = "grp",
) -> list[Utterance]:
    """Greedy left-to-right packing of consecutive segments into utterances.

    Each utterance takes the maximal run of segments whose span (last end
    minus first start) fits max_dur_s. A single segment longer than the
    budget becomes its own utterance with ``overlong`` set; nothing is ever
    dropped or split. Times are rebased so each utterance starts at 0, with
    the shift recorded in ``source_offset_s``.
    """
    for prev, cur in zip(segments, segments[1:]):
        if cur.start_s < prev.start_s:
            raise ValueError("segments must be time-ordered")

    utterances: list[Utterance] = []
    i = 0
    while i < len(segments):
        start = segments[i].start_s
        j = i + 1
        while j < len(segments) and segments[j].end_s - start <= max_dur_s + 1e-9:
            j += 1
        group = segments[i:j]
        offset = group[0].start_s
        rebased = [
            SpeakerSegment(
                speaker_id=s.speaker_id,
                start_s=s.start_s - offset,
                end_s=s.end_s - offset,
                transcript=s.transcript,
                language_id=s.language_id,
            )
            for s in group
        ]
        span = rebased[-1].end_s
        utterances.append(
            Utterance(
                id=f"{id_prefix}-{len(utterances):05d}",
                segments=rebased,
                duration_s=span,
                language_id=group[0].language_id,
                overlong=span > max_dur_s + 1e-9,
                source_offset_s=offset,
            )
        )
        i = j
    return utterances


def utterance_to_manifest_line(utt: Utterance) -> dict:
    return {
        "id": utt.id,
        "duration_s": utt.duration_s,
        "language_id": utt.language_id,
        "segments": [
            {
                "speaker": s.speaker_id,
                "start_s": s.start_s,
                "end_s": s.end_s,
                "transcript": s.transcript,
            }
            for s in utt.segments
        ],
        "feature_file": utt.feature_file,
    }


def utterance_from_manifest_line(line: dict) -> Utterance:
    language_id = int(line["language_id"])
    segments = [
        SpeakerSegment(
            speaker_id=s["speaker"],
            start_s=float(s["start_s"]),
            end_s=float(s["end_s"]),
            transcript=s["transcript"],
            language_id=language_id,
        )
        for s in line["segments"]
    ]
    return Utterance(
        id=line["id"],
        segments=segments,
        duration_s=float(line["duration_s"]),
        language_id=language_id,
        feature_file=line.get("feature_file"),
    )


def write_manifest(path: str | Path, utterances: list[Utterance]) -> None:
    fileio.write_jsonl(path, (utterance_to_manifest_line(u) for u in utterances))


def read_manifest(path: str | Path) -> list[Utterance]:
    return [utterance_from_manifest_line(line) for line in fileio.read_jsonl(path)]
