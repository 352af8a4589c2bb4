"""Report rendering: plain-text tables, tab-delimited files, and the
matplotlib figures written next to them."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from . import fileio
from .scoring import GroupMetrics, ScdReport

FIGURE_DPI = 150

_METRIC_ROWS = ("precision", "recall", "f1", "wer")


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.1f}"


def _metric(group: GroupMetrics, name: str) -> float | None:
    return getattr(group, name)


def render_report_table(report: ScdReport) -> str:
    """Metric rows by group columns, pooled last."""
    columns: list[tuple[str, GroupMetrics]] = [
        (f"lang {key}", grp) for key, grp in sorted(report.per_language.items())
    ]
    if report.pooled is not None:
        columns.append(("pooled", report.pooled))
    if not columns:
        return "(no utterances scored)\n"
    header = ["metric"] + [name for name, _ in columns]
    rows = [[m.upper() if m in ("f1", "wer") else m.capitalize()] + [_fmt(_metric(g, m)) for _, g in columns]
            for m in _METRIC_ROWS]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def write_report_tsv(path: str | Path, report: ScdReport) -> None:
    groups: list[tuple[str, GroupMetrics]] = [
        (key, grp) for key, grp in sorted(report.per_language.items())
    ]
    if report.pooled is not None:
        groups.append(("pooled", report.pooled))
    lines = ["group\tprecision\trecall\tf1\twer\tn_hyp\tn_hyp_correct\tn_ref\tn_ref_detected"]
    for key, g in groups:
        lines.append(
            "\t".join(
                [
                    key,
                    f"{g.precision:.4f}",
                    f"{g.recall:.4f}",
                    f"{g.f1:.4f}",
                    "" if g.wer is None else f"{g.wer:.4f}",
                    str(g.counts["n_hyp"]),
                    str(g.counts["n_hyp_correct"]),
                    str(g.counts["n_ref"]),
                    str(g.counts["n_ref_detected"]),
                ]
            )
        )
    fileio.atomic_write_text(path, "\n".join(lines) + "\n")


def render_report_figure(path: str | Path, report: ScdReport) -> None:
    """Grouped bars of precision/recall/F1 (and WER when present)."""
    groups: list[tuple[str, GroupMetrics]] = [
        (f"lang {key}", grp) for key, grp in sorted(report.per_language.items())
    ]
    if report.pooled is not None:
        groups.append(("pooled", report.pooled))
    if not groups:
        return
    names = [n for n, _ in groups]
    metrics = ["precision", "recall", "f1"]
    if any(g.wer is not None for _, g in groups):
        metrics.append("wer")
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(groups), 3.4))
    width = 0.8 / len(metrics)
    for k, metric in enumerate(metrics):
        xs = [i + (k - (len(metrics) - 1) / 2) * width for i in range(len(groups))]
        ys = [(_metric(g, metric) or 0.0) for _, g in groups]
        ax.bar(xs, ys, width=width, label=metric.upper() if metric in ("f1", "wer") else metric)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(names)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def write_sweep_tsv(path: str | Path, rows: list[dict]) -> None:
    lines = ["lambda\tprecision\trecall\tf1\twer\tst_win_frames"]
    for r in rows:
        lines.append(
            "\t".join(
                [
                    f"{r['lambda']:g}",
                    f"{r['precision']:.4f}",
                    f"{r['recall']:.4f}",
                    f"{r['f1']:.4f}",
                    "" if r.get("wer") is None else f"{r['wer']:.4f}",
                    str(r.get("st_win_frames", "")),
                ]
            )
        )
    fileio.atomic_write_text(path, "\n".join(lines) + "\n")


def render_sweep_figure(path: str | Path, rows: list[dict]) -> None:
    """Turn-token scale sweep: detection metrics on the left axis, word
    error rate on the right."""
    if not rows:
        return
    lams = [r["lambda"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for metric, style in (("precision", "o--"), ("recall", "s--"), ("f1", "d-")):
        ax.plot(lams, [r[metric] for r in rows], style, label=metric.upper() if metric == "f1" else metric)
    ax.set_xlabel("turn-token posterior scale")
    ax.set_ylabel("detection percent")
    ax.grid(alpha=0.3)
    handles, labels = ax.get_legend_handles_labels()
    if any(r.get("wer") is not None for r in rows):
        ax2 = ax.twinx()
        ax2.plot(lams, [r["wer"] for r in rows], "^-", color="tab:red", label="WER")
        ax2.set_ylabel("WER percent")
        h2, l2 = ax2.get_legend_handles_labels()
        handles += h2
        labels += l2
    ax.legend(handles, labels, fontsize=8, loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def render_sweep_summary_table(rows: list[dict], best_lambda: float | None) -> str:
    lines = [f"{'lambda':>7}  {'precision':>9}  {'recall':>7}  {'f1':>6}  {'wer':>6}"]
    for r in rows:
        wer_s = "-" if r.get("wer") is None else f"{r['wer']:.1f}"
        mark = " *" if best_lambda is not None and r["lambda"] == best_lambda else ""
        lines.append(
            f"{r['lambda']:>7g}  {r['precision']:>9.1f}  {r['recall']:>7.1f}  {r['f1']:>6.1f}  {wer_s:>6}{mark}"
        )
    if best_lambda is not None:
        lines.append(f"best lambda by F1: {best_lambda:g}")
    return "\n".join(lines) + "\n"


def render_loss_curve(path: str | Path, log_rows: list[dict]) -> None:
    steps = [r["step"] for r in log_rows if r.get("loss") is not None]
    losses = [r["loss"] for r in log_rows if r.get("loss") is not None]
    if not steps:
        return
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
