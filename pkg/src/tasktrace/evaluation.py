"""Confusion counts and derived metrics.

Positive means "flagged anomalous": a malicious item that is flagged counts
as TP, a benign item that is flagged as FP. Ratios with a zero denominator
are ``None`` and print as an em-dash placeholder in text tables.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tasktrace.detector import TaskVerdict, TraceVerdict, observed_ranks
from tasktrace.encoder import EncodedTrace
from tasktrace.sequencer import window_arrays


class LabelMismatch(ValueError):
    pass


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    mode: str = "trace"
    candidates: int | None = None
    unevaluated: int = 0

    @property
    def n_labeled(self) -> int:
        return self.tp + self.fn

    @property
    def n_unlabeled(self) -> int:
        return self.fp + self.tn

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def recall(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def fpr(self) -> float | None:
        return _ratio(self.fp, self.fp + self.tn)

    @property
    def specificity(self) -> float | None:
        return _ratio(self.tn, self.fp + self.tn)

    @property
    def accuracy(self) -> float | None:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def gmean(self) -> float | None:
        if self.recall is None or self.specificity is None:
            return None
        return math.sqrt(self.recall * self.specificity)

    def as_row(self) -> dict:
        return {
            "candidates": self.candidates,
            "mode": self.mode,
            "labeled": self.n_labeled,
            "unlabeled": self.n_unlabeled,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "unevaluated": self.unevaluated,
            "recall": self.recall,
            "fpr": self.fpr,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "gmean": self.gmean,
        }


def _flags(verdicts) -> np.ndarray:
    out = []
    for v in verdicts:
        if isinstance(v, TraceVerdict):
            out.append(v.anomalous)
        elif isinstance(v, TaskVerdict):
            out.append(v.malicious_predicted)
        else:
            out.append(bool(v))
    return np.asarray(out, dtype=bool)


def confusion(flagged: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    flagged = np.asarray(flagged, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if flagged.shape != truth.shape:
        raise LabelMismatch(f"{flagged.size} verdicts but {truth.size} labels")
    tp = int(np.count_nonzero(flagged & truth))
    fp = int(np.count_nonzero(flagged & ~truth))
    fn = int(np.count_nonzero(~flagged & truth))
    tn = int(flagged.size - tp - fp - fn)
    return tp, fp, tn, fn


def score_trace_based(verdicts, labels, candidates: int | None = None) -> MetricsReport:
    """One confusion entry per window."""
    flagged = verdicts if isinstance(verdicts, np.ndarray) else _flags(verdicts)
    truth = labels if isinstance(labels, np.ndarray) else list(labels)
    tp, fp, tn, fn = confusion(flagged, np.asarray(truth, dtype=bool))
    return MetricsReport(tp, fp, tn, fn, "trace", candidates)


def score_task_based(
    task_verdicts: Sequence[TaskVerdict], labels: Sequence[bool] | None = None,
    candidates: int | None = None,
) -> MetricsReport:
    """One confusion entry per evaluated task; tasks without windows are counted aside.

    ``labels`` defaults to each verdict's ``true_label``.
    """
    task_verdicts = list(task_verdicts)
    if labels is None:
        labels = [v.true_label for v in task_verdicts]
    labels = list(labels)
    if len(labels) != len(task_verdicts):
        raise LabelMismatch(f"{len(task_verdicts)} verdicts but {len(labels)} labels")
    kept = [(v.malicious_predicted, lab) for v, lab in zip(task_verdicts, labels) if v.evaluated]
    flagged = np.array([k[0] for k in kept], dtype=bool)
    truth = np.array([k[1] for k in kept], dtype=bool)
    tp, fp, tn, fn = confusion(flagged, truth)
    return MetricsReport(tp, fp, tn, fn, "task", candidates,
                         unevaluated=len(task_verdicts) - len(kept))


def score_next_key(model, traces: Iterable[EncodedTrace], t: int, w: int | None = None) -> float | None:
    """Fraction of windows whose observed next key is among the top ``t``.

    For unlabeled corpora; an unknown observed key never counts as a match.
    """
    w = w if w is not None else model.w
    batch = window_arrays(list(traces), w)
    if len(batch) == 0:
        return None
    ranks = observed_ranks(model.predict_proba(batch.contexts), batch.labels, model.G - 1)
    return float(np.mean(ranks < t))


def sweep(
    ranks: np.ndarray,
    truth: np.ndarray,
    trace_index: np.ndarray,
    positions: np.ndarray,
    traces: Sequence[EncodedTrace],
    candidates: Iterable[int],
) -> list[MetricsReport]:
    """Trace- and task-based reports at each candidate count from one set of ranks."""
    from tasktrace.detector import task_verdicts
    from tasktrace.sequencer import WindowBatch

    batch = WindowBatch(np.zeros((len(ranks), 0), np.int64), np.zeros(len(ranks), np.int64),
                        truth, trace_index, positions)
    out = []
    for t in candidates:
        out.append(score_trace_based(ranks >= t, truth, candidates=t))
        out.append(score_task_based(task_verdicts(traces, batch, ranks, t), candidates=t))
    return out


REPORT_COLUMNS = ("candidates", "mode", "labeled", "unlabeled", "tp", "fp", "tn", "fn",
                  "unevaluated", "recall", "fpr", "specificity", "accuracy", "precision", "gmean")


def _fmt(value, width: int | None = None) -> str:
    if value is None:
        return "—" if width is not None else ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_report_csv(reports: Iterable[MetricsReport], path: str | Path) -> None:
    """Undefined ratios are left empty."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            row = r.as_row()
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def format_table(reports: Iterable[MetricsReport]) -> str:
    cols = [("candidates", "#candidate"), ("mode", "type"), ("labeled", "#labeled"),
            ("unlabeled", "#unlabeled"), ("recall", "recall"), ("fpr", "FP rate"),
            ("specificity", "specificity"), ("accuracy", "accuracy"),
            ("precision", "precision"), ("gmean", "gmean")]
    rows = [[_fmt(r.as_row()[c], 0) for c, _ in cols] for r in reports]
    widths = [max([len(h)] + [len(row[i]) for row in rows]) for i, (_, h) in enumerate(cols)]
    lines = ["  ".join(h.rjust(wd) for (_, h), wd in zip(cols, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    lines += ["  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"
