"""CTC loss via log-space forward-backward with analytic gradients, greedy
decoding with turn-token posterior scaling, alignment collapse with token
timestamps, and a brute-force path-enumeration oracle for testing."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .corpus import TokenSeq, Vocabulary

NEG_INF = -np.inf


@dataclass
class LogPosteriorMatrix:
    """T x V per-frame log posteriors; each row log-sum-exps to ~0."""

    logp: np.ndarray
    frame_shift_s: float = 0.040

    def __post_init__(self):
        self.logp = np.asarray(self.logp, dtype=np.float64)
        if self.logp.ndim != 2 or self.logp.shape[0] < 1:
            raise ValueError(f"log posterior matrix must be 2-D, got shape {self.logp.shape}")

    def validate(self, tol: float = 1e-6) -> None:
        row_lse = np.logaddexp.reduce(self.logp, axis=1)
        if np.max(np.abs(row_lse)) > tol:
            raise ValueError("log posterior rows do not normalize to 1")
        if np.max(self.logp) > tol:
            raise ValueError("log posterior entries must be <= 0")


@dataclass(frozen=True)
class DecodeConfig:
    """Greedy-decoding knobs: the turn-token posterior scale and which point
    of a token's frame run to report as its time."""

    st_scale: float = 1.0
    time_anchor: str = "onset"  # "onset" | "center"

    def __post_init__(self):
        if not self.st_scale > 0:
            raise ValueError(f"st_scale must be positive, got {self.st_scale}")
        if self.time_anchor not in ("onset", "center"):
            raise ValueError(f"unknown time anchor {self.time_anchor!r}")


@dataclass
class DecodeResult:
    """Collapsed token sequence with one time per token; st_times_s is the
    subset of times belonging to turn tokens."""

    tokens: TokenSeq
    token_times_s: list[float]
    st_times_s: list[float]

    def __post_init__(self):
        if len(self.token_times_s) != len(self.tokens):
            raise ValueError("one time is required per token")
        if any(b < a - 1e-12 for a, b in zip(self.token_times_s, self.token_times_s[1:])):
            raise ValueError("token times must be non-decreasing")


@dataclass
class CtcLossResult:
    nll: float
    grad: np.ndarray  # d nll / d logp, same shape as logp
    alignable: bool


def _target_ids(target) -> list[int]:
    return list(target.ids) if isinstance(target, TokenSeq) else list(target)


def _augmented(labels: list[int], blank_id: int) -> np.ndarray:
    ext = [blank_id]
    for t in labels:
        ext.extend((t, blank_id))
    return np.asarray(ext, dtype=np.int64)


def min_alignable_frames(labels: list[int]) -> int:
    """|target| plus one mandatory blank between each repeated-label pair."""
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def ctc_loss(logp, target, blank_id: int) -> CtcLossResult:
    """Negative log probability of the target under the CTC alignment model,
    plus its gradient with respect to the log posteriors.

    The sum over alignments runs over the 2|target|+1 augmented label
    sequence in log space. Targets that cannot be aligned within T frames
    yield nll=+inf with a zero gradient and alignable=False instead of
    raising, so batch training can skip and count them.
    """
    logp = np.asarray(logp.logp if isinstance(logp, LogPosteriorMatrix) else logp, dtype=np.float64)
    T, V = logp.shape
    labels = _target_ids(target)
    if any(t == blank_id for t in labels):
        raise ValueError("target contains the blank id")
    if any(not 0 <= t < V for t in labels):
        raise ValueError("target id out of range")
    if np.isnan(logp).any():
        # NaN is a numerical failure upstream, not an unalignable target
        return CtcLossResult(nll=math.nan, grad=np.zeros_like(logp), alignable=True)
    if T < min_alignable_frames(labels):
        return CtcLossResult(nll=math.inf, grad=np.zeros_like(logp), alignable=False)

    ext = _augmented(labels, blank_id)
    S = ext.size
    # skip transition s-2 -> s allowed when ext[s] is a label differing from ext[s-2]
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[2:] = (ext[2:] != blank_id) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        m = np.logaddexp(prev, np.concatenate(([NEG_INF], prev[:-1])))
        if S > 2:
            skipped = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
            m = np.where(skip_ok, np.logaddexp(m, skipped), m)
        alpha[t] = m + logp[t, ext]

    log_p_target = alpha[-1, -1] if S == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(log_p_target):
        return CtcLossResult(nll=math.inf, grad=np.zeros_like(logp), alignable=False)

    beta = np.full((T, S), NEG_INF)
    beta[-1, -1] = 0.0
    if S > 1:
        beta[-1, -2] = 0.0
    # entering state s+2 from s uses the same label-vs-blank rule, viewed forward
    skip_fwd = np.zeros(S, dtype=bool)
    if S > 2:
        skip_fwd[:-2] = skip_ok[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        m = np.logaddexp(nxt, np.concatenate((nxt[1:], [NEG_INF])))
        if S > 2:
            skipped = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
            m = np.where(skip_fwd, np.logaddexp(m, skipped), m)
        beta[t] = m

    # occupancy share of each augmented state; rows sum to 1
    contrib = np.exp(alpha + beta - log_p_target)
    grad = np.zeros_like(logp)
    rows = np.arange(T)[:, None]
    np.add.at(grad, (rows, ext[None, :]), -contrib)
    return CtcLossResult(nll=float(-log_p_target), grad=grad, alignable=True)


def collapse_frame_labels(path, blank_id: int) -> tuple[int, ...]:
    """Merge consecutive duplicates, then drop blanks."""
    out = []
    prev = None
    for fid in path:
        if fid != prev:
            out.append(fid)
        prev = fid
    return tuple(t for t in out if t != blank_id)


def brute_force_ctc(logp, target, blank_id: int) -> float:
    """Exact CTC target probability by enumerating all V^T frame labelings
    and summing those that collapse to the target. Testing oracle only."""
    logp = np.asarray(logp.logp if isinstance(logp, LogPosteriorMatrix) else logp, dtype=np.float64)
    T, V = logp.shape
    if V**T > 10_000_000:
        raise ValueError(f"instance too large to enumerate: V^T = {V}**{T}")
    want = tuple(_target_ids(target))
    p = np.exp(logp)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse_frame_labels(path, blank_id) == want:
            prob = 1.0
            for t, fid in enumerate(path):
                prob *= p[t, fid]
            total += prob
    return total


def collapse_alignment(
    frame_ids,
    blank_id: int,
    frame_shift_s: float,
    st_id: int | None = None,
    time_anchor: str = "onset",
) -> DecodeResult:
    """Collapse a per-frame argmax path into tokens with times.

    Consecutive duplicates merge into one token anchored at the run's first
    frame (or the run center); blanks disappear.
    """
    ids = [int(x) for x in frame_ids]
    runs: list[tuple[int, int, int]] = []  # (id, start_frame, length)
    for t, fid in enumerate(ids):
        if runs and runs[-1][0] == fid:
            runs[-1] = (fid, runs[-1][1], runs[-1][2] + 1)
        else:
            runs.append((fid, t, 1))
    tokens: list[int] = []
    times: list[float] = []
    for fid, start, length in runs:
        if fid == blank_id:
            continue
        if time_anchor == "center":
            anchor = start + (length - 1) / 2.0
        else:
            anchor = float(start)
        tokens.append(fid)
        times.append(anchor * frame_shift_s)
    st_times = [tm for tok, tm in zip(tokens, times) if st_id is not None and tok == st_id]
    return DecodeResult(tokens=TokenSeq(tuple(tokens)), token_times_s=times, st_times_s=st_times)


def scale_st_column(logp: np.ndarray, st_id: int, st_scale: float) -> np.ndarray:
    """Add log(scale) to the turn-token column. Rows are deliberately left
    unnormalized: greedy argmax only compares scores within a frame, so the
    remaining mass never needs redistributing."""
    out = np.array(logp, dtype=np.float64, copy=True)
    out[:, st_id] += math.log(st_scale)
    return out


def st_win_frames(logp: np.ndarray, st_id: int, st_scale: float) -> np.ndarray:
    """Frame indices whose argmax is the turn token after scaling."""
    scaled = scale_st_column(np.asarray(logp, dtype=np.float64), st_id, st_scale)
    return np.flatnonzero(np.argmax(scaled, axis=1) == st_id)


def ctc_greedy_decode(post: LogPosteriorMatrix, vocab: Vocabulary, cfg: DecodeConfig = DecodeConfig()) -> DecodeResult:
    """Per-frame argmax after adding log(st_scale) to the turn-token column,
    then CTC collapse. Row normalization is checked before scaling only."""
    post.validate()
    scaled = scale_st_column(post.logp, vocab.st_id, cfg.st_scale)
    frame_ids = np.argmax(scaled, axis=1)
    return collapse_alignment(
        frame_ids,
        blank_id=vocab.blank_id,
        frame_shift_s=post.frame_shift_s,
        st_id=vocab.st_id,
        time_anchor=cfg.time_anchor,
    )


def hypothesis_line(utt_id: str, result: DecodeResult, vocab: Vocabulary, st_scale: float) -> dict:
    return {
        "id": utt_id,
        "tokens": vocab.decode(result.tokens.ids),
        "times_s": list(result.token_times_s),
        "st_times_s": list(result.st_times_s),
        "lambda": st_scale,
    }


def write_hypotheses(path: str | Path, lines: list[dict]) -> None:
    fileio.write_jsonl(path, lines)


def read_hypotheses(path: str | Path) -> list[dict]:
    return list(fileio.read_jsonl(path))
