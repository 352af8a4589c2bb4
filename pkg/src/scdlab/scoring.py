"""Turn-detection scoring: precision/recall/F1 via timestamp-interval
matching, word error rate with turn tokens stripped, and micro-averaged
per-group / pooled aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import ST_TOKEN, SpeakerSegment, Utterance, tokenize_text

DEFAULT_COLLAR_S = 0.25


@dataclass(frozen=True)
class RefChangeInterval:
    """Time window around a ground-truth speaker boundary; a prediction
    inside it counts as correct."""

    begin_s: float
    end_s: float

    def __post_init__(self):
        if self.begin_s > self.end_s:
            raise ValueError(f"interval ends before it begins: [{self.begin_s}, {self.end_s}]")

    def contains(self, t: float) -> bool:
        return self.begin_s <= t <= self.end_s


@dataclass
class ScdCounts:
    n_hyp: int = 0
    n_hyp_correct: int = 0
    n_ref: int = 0
    n_ref_detected: int = 0

    def __post_init__(self):
        if self.n_hyp_correct > self.n_hyp or self.n_ref_detected > self.n_ref:
            raise ValueError("correct/detected counts exceed totals")

    def __add__(self, other: "ScdCounts") -> "ScdCounts":
        return ScdCounts(
            self.n_hyp + other.n_hyp,
            self.n_hyp_correct + other.n_hyp_correct,
            self.n_ref + other.n_ref,
            self.n_ref_detected + other.n_ref_detected,
        )


@dataclass
class WerResult:
    wer_pct: float
    n_sub: int
    n_ins: int
    n_del: int
    n_ref: int
    empty_ref: bool = False

    def __add__(self, other: "WerResult") -> "WerResult":
        merged = WerResult(
            wer_pct=0.0,
            n_sub=self.n_sub + other.n_sub,
            n_ins=self.n_ins + other.n_ins,
            n_del=self.n_del + other.n_del,
            n_ref=self.n_ref + other.n_ref,
            empty_ref=self.empty_ref or other.empty_ref,
        )
        merged.wer_pct = _wer_pct(merged.n_sub, merged.n_ins, merged.n_del, merged.n_ref)
        return merged


def _wer_pct(n_sub: int, n_ins: int, n_del: int, n_ref: int) -> float:
    errors = n_sub + n_ins + n_del
    if n_ref == 0:
        return 0.0 if errors == 0 else 100.0 * errors
    return 100.0 * errors / n_ref


def ref_intervals(
    segments: list[SpeakerSegment],
    collar_s: float = DEFAULT_COLLAR_S,
    duration_s: float | None = None,
) -> list[RefChangeInterval]:
    """One interval per adjacent pair of segments with different speakers:
    [prev end - collar, next start + collar], clamped to [0, duration]."""
    top = duration_s if duration_s is not None else (max(s.end_s for s in segments) if segments else 0.0)
    out = []
    for prev, cur in zip(segments, segments[1:]):
        if cur.speaker_id == prev.speaker_id:
            continue
        begin = min(max(0.0, prev.end_s - collar_s), top)
        end = max(begin, min(top, cur.start_s + collar_s))
        out.append(RefChangeInterval(begin_s=begin, end_s=end))
    return out


def score_scd(refs: list[RefChangeInterval], hyp_times: list[float]) -> ScdCounts:
    """Membership counts: a hypothesis is correct iff it lies inside at
    least one reference interval; an interval is detected iff it holds at
    least one hypothesis (several hypotheses in one interval are all
    correct, but the interval is detected once)."""
    if not refs:
        return ScdCounts(n_hyp=len(hyp_times), n_hyp_correct=0, n_ref=0, n_ref_detected=0)
    if not hyp_times:
        return ScdCounts(n_hyp=0, n_hyp_correct=0, n_ref=len(refs), n_ref_detected=0)
    times = np.asarray(hyp_times, dtype=np.float64)
    begins = np.asarray([r.begin_s for r in refs])
    ends = np.asarray([r.end_s for r in refs])
    inside = (times[:, None] >= begins[None, :]) & (times[:, None] <= ends[None, :])
    return ScdCounts(
        n_hyp=len(hyp_times),
        n_hyp_correct=int(inside.any(axis=1).sum()),
        n_ref=len(refs),
        n_ref_detected=int(inside.any(axis=0).sum()),
    )


def precision_pct(counts: ScdCounts) -> float:
    if counts.n_hyp == 0:
        # Pessimistic zero when there were changes to find; perfect when
        # there was nothing to predict and nothing was predicted.
        return 100.0 if counts.n_ref == 0 else 0.0
    return 100.0 * counts.n_hyp_correct / counts.n_hyp


def recall_pct(counts: ScdCounts) -> float:
    if counts.n_ref == 0:
        return 100.0
    return 100.0 * counts.n_ref_detected / counts.n_ref


def f1(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (percent in, percent out)."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def strip_st(tokens: list[str], st_token: str = ST_TOKEN) -> list[str]:
    return [t for t in tokens if t != st_token]


def wer(ref: list[str], hyp: list[str], st_token: str = ST_TOKEN) -> WerResult:
    """Levenshtein word error rate with unit costs, computed after removing
    every turn token from both sides.

    An empty stripped reference against a non-empty hypothesis scores each
    hypothesis token as an insertion (WER = 100 * |hyp|) with a flag; two
    empty sides score zero.
    """
    r = strip_st(list(ref), st_token)
    h = strip_st(list(hyp), st_token)
    if not r:
        return WerResult(
            wer_pct=100.0 * len(h),
            n_sub=0,
            n_ins=len(h),
            n_del=0,
            n_ref=0,
            empty_ref=bool(h),
        )
    n, m = len(r), len(h)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        sub_row = dist[i - 1, :-1] + (np.asarray(h) != r[i - 1])
        for j in range(1, m + 1):
            dist[i, j] = min(sub_row[j - 1], dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    # walk back for the substitution/insertion/deletion breakdown
    i, j = n, m
    n_sub = n_ins = n_del = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            if r[i - 1] != h[j - 1]:
                n_sub += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            n_del += 1
            i -= 1
        else:
            n_ins += 1
            j -= 1
    return WerResult(
        wer_pct=_wer_pct(n_sub, n_ins, n_del, n),
        n_sub=n_sub,
        n_ins=n_ins,
        n_del=n_del,
        n_ref=n,
    )


@dataclass
class UtteranceScore:
    id: str
    language_id: int
    scd: ScdCounts
    wer: WerResult | None = None


@dataclass
class GroupMetrics:
    precision: float
    recall: float
    f1: float
    wer: float | None
    counts: dict

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "wer": self.wer,
            "counts": self.counts,
        }


@dataclass
class ScdReport:
    per_language: dict[str, GroupMetrics] = field(default_factory=dict)
    pooled: GroupMetrics | None = None

    def to_dict(self) -> dict:
        return {
            "per_language": {k: v.to_dict() for k, v in sorted(self.per_language.items())},
            "pooled": self.pooled.to_dict() if self.pooled else None,
        }


def _group_metrics(scores: list[UtteranceScore]) -> GroupMetrics:
    counts = ScdCounts()
    for s in scores:
        counts = counts + s.scd
    wer_total: WerResult | None = None
    for s in scores:
        if s.wer is not None:
            wer_total = s.wer if wer_total is None else wer_total + s.wer
    p = precision_pct(counts)
    r = recall_pct(counts)
    count_dict = {
        "n_hyp": counts.n_hyp,
        "n_hyp_correct": counts.n_hyp_correct,
        "n_ref": counts.n_ref,
        "n_ref_detected": counts.n_ref_detected,
    }
    if wer_total is not None:
        count_dict.update(
            {
                "wer_sub": wer_total.n_sub,
                "wer_ins": wer_total.n_ins,
                "wer_del": wer_total.n_del,
                "n_ref_tokens": wer_total.n_ref,
            }
        )
    return GroupMetrics(
        precision=p,
        recall=r,
        f1=f1(p, r),
        wer=None if wer_total is None else wer_total.wer_pct,
        counts=count_dict,
    )


def reference_tokens(utterance: Utterance, token_mode: str) -> list[str]:
    """Token strings of the concatenated segment transcripts, matching the
    target-construction order (no separators between segments)."""
    toks: list[str] = []
    for seg in utterance.segments:
        toks.extend(tokenize_text(seg.transcript, token_mode))
    return toks


def score_hypotheses(
    utterances: list[Utterance],
    hyp_lines: list[dict],
    collar_s: float = DEFAULT_COLLAR_S,
    token_mode: str = "word",
) -> list[UtteranceScore]:
    """Score decoded hypothesis lines ({id, tokens, st_times_s, ...})
    against their reference utterances."""
    by_id = {u.id: u for u in utterances}
    scores = []
    for line in hyp_lines:
        utt = by_id[line["id"]]
        refs = ref_intervals(utt.segments, collar_s=collar_s, duration_s=utt.duration_s)
        counts = score_scd(refs, [float(t) for t in line["st_times_s"]])
        w = wer(reference_tokens(utt, token_mode), [str(t) for t in line["tokens"]])
        scores.append(UtteranceScore(id=utt.id, language_id=utt.language_id, scd=counts, wer=w))
    return scores


def aggregate(scores: list[UtteranceScore], group_by: str = "language") -> ScdReport:
    """Micro-average: counts are summed within each group before any rate
    is computed, so the pooled column reflects totals, not a mean of rates."""
    if group_by not in ("language", "pooled"):
        raise ValueError(f"unknown grouping {group_by!r}")
    report = ScdReport()
    if not scores:
        return report
    if group_by == "language":
        groups: dict[str, list[UtteranceScore]] = {}
        for s in scores:
            groups.setdefault(str(s.language_id), []).append(s)
        for key, members in sorted(groups.items()):
            report.per_language[key] = _group_metrics(members)
    report.pooled = _group_metrics(scores)
    return report
