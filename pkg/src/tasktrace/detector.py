"""Top-t candidate detection.

An observed key is normal when it is among the ``t`` most probable next keys
predicted from its window, otherwise the window is anomalous. A task is
predicted malicious as soon as one of its windows is anomalous.

Ties in probability are broken by ascending key index, which makes the top-t
sets nested in ``t``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tasktrace.encoder import EncodedTrace
from tasktrace.sequencer import Window, WindowBatch, make_windows
from tasktrace.tasktree import NodeKey


class BadCandidateCount(ValueError):
    pass


@dataclass(frozen=True)
class TraceVerdict:
    origin: tuple[NodeKey | None, int]
    observed: int
    top_t: tuple[int, ...]
    anomalous: bool


@dataclass(frozen=True)
class TaskVerdict:
    task_key: NodeKey | None
    n_windows: int
    n_anomalous: int
    first_anomaly_position: int | None
    true_label: bool = False
    user: str = ""

    @property
    def malicious_predicted(self) -> bool:
        return self.n_anomalous >= 1

    @property
    def evaluated(self) -> bool:
        return self.n_windows > 0


def top_candidates(dist: Sequence[float], t: int) -> list[int]:
    dist = np.asarray(dist, dtype=float)
    if not 1 <= t <= len(dist):
        raise BadCandidateCount(f"t must lie in [1, {len(dist)}], got {t}")
    return [int(k) for k in np.argsort(-dist, kind="stable")[:t]]


def observed_ranks(probs: np.ndarray, observed: np.ndarray, unknown: int | None = None) -> np.ndarray:
    """0-based position of each observed key in its tie-broken candidate order.

    A window is anomalous at ``t`` exactly when its rank is ``>= t``. The
    unknown symbol gets rank ``G`` so it is anomalous for every ``t``.
    """
    probs = np.asarray(probs, dtype=float)
    observed = np.asarray(observed, dtype=np.int64)
    n, G = probs.shape
    p_obs = probs[np.arange(n), observed][:, None]
    idx = np.arange(G)[None, :]
    ranks = (probs > p_obs).sum(axis=1) + ((probs == p_obs) & (idx < observed[:, None])).sum(axis=1)
    if unknown is not None:
        ranks[observed == unknown] = G
    return ranks


def _unknown_of(model, unknown: int | None) -> int:
    # the encoded alphabet is 2n + 1 with the unknown symbol last
    return model.G - 1 if unknown is None else unknown


def classify_window(model, window: Window, t: int, unknown: int | None = None) -> TraceVerdict:
    dist = model.predict(window.context)
    top = top_candidates(dist, t)
    anomalous = window.label == _unknown_of(model, unknown) or window.label not in top
    return TraceVerdict(window.origin, window.label, tuple(top), anomalous)


def classify_task(
    model,
    trace: EncodedTrace,
    w: int,
    t: int,
    unknown: int | None = None,
    stop_at_first: bool = False,
) -> TaskVerdict:
    """Aggregate window verdicts of one trace; traces of length <= w are unevaluated."""
    if not 1 <= t <= model.G:
        raise BadCandidateCount(f"t must lie in [1, {model.G}], got {t}")
    windows = make_windows(trace, w)
    n_anom, first = 0, None
    if windows:
        X = np.array([win.context for win in windows], dtype=np.int64)
        y = np.array([win.label for win in windows], dtype=np.int64)
        if stop_at_first:
            for j in range(len(windows)):
                r = observed_ranks(model.predict_proba(X[j : j + 1]), y[j : j + 1],
                                   _unknown_of(model, unknown))
                if r[0] >= t:
                    n_anom, first = 1, j
                    break
        else:
            ranks = observed_ranks(model.predict_proba(X), y, _unknown_of(model, unknown))
            hits = np.flatnonzero(ranks >= t)
            n_anom = int(len(hits))
            first = int(hits[0]) if n_anom else None
    return TaskVerdict(trace.source, len(windows), n_anom, first, trace.malicious, trace.user)


def score_windows(model, batch: WindowBatch, unknown: int | None = None) -> np.ndarray:
    """Ranks of every window's observed key (see :func:`observed_ranks`)."""
    if len(batch) == 0:
        return np.zeros(0, dtype=np.int64)
    return observed_ranks(model.predict_proba(batch.contexts), batch.labels,
                          _unknown_of(model, unknown))


def task_verdicts(
    traces: Sequence[EncodedTrace], batch: WindowBatch, ranks: np.ndarray, t: int
) -> list[TaskVerdict]:
    """Per-trace verdicts at ``t`` from precomputed window ranks."""
    anom = ranks >= t
    n_win = np.bincount(batch.trace_index, minlength=len(traces))
    n_anom = np.bincount(batch.trace_index, weights=anom, minlength=len(traces)).astype(int)
    first: dict[int, int] = {}
    for ti, pos in zip(batch.trace_index[anom], batch.position[anom]):
        first.setdefault(int(ti), int(pos))
    return [
        TaskVerdict(tr.source, int(n_win[i]), int(n_anom[i]), first.get(i), tr.malicious, tr.user)
        for i, tr in enumerate(traces)
    ]


VERDICT_COLUMNS = (
    "user", "task_key", "n_windows", "n_anomalous", "first_anomaly_position", "predicted",
    "true_label",
)


def write_task_verdicts(verdicts: Iterable[TaskVerdict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(VERDICT_COLUMNS)
        for v in verdicts:
            writer.writerow([
                v.user,
                str(v.task_key) if v.task_key is not None else "",
                v.n_windows,
                v.n_anomalous,
                "" if v.first_anomaly_position is None else v.first_anomaly_position,
                "unevaluated" if not v.evaluated else int(v.malicious_predicted),
                int(v.true_label),
            ])


def write_window_ranks(batch: WindowBatch, ranks: np.ndarray, path: str | Path) -> None:
    """Per-window ranks, enough to rescore at any candidate count."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trace", "position", "observed", "rank", "true_label"])
        for row in zip(batch.trace_index, batch.position, batch.labels, ranks, batch.truth):
            writer.writerow([int(row[0]), int(row[1]), int(row[2]), int(row[3]), int(row[4])])


def read_window_ranks(path: str | Path) -> dict[str, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if data.size == 0:
        data = np.zeros((0, 5), dtype=np.int64)
    return {
        "trace": data[:, 0],
        "position": data[:, 1],
        "observed": data[:, 2],
        "rank": data[:, 3],
        "truth": data[:, 4].astype(bool),
    }
