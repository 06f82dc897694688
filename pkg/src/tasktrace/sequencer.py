"""Fixed-width (context, next key) windows over encoded traces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tasktrace.encoder import EncodedTrace, KeyOutOfRange
from tasktrace.tasktree import NodeKey


@dataclass(frozen=True)
class Window:
    context: tuple[int, ...]
    label: int
    origin: tuple[NodeKey | None, int]


def make_windows(trace: EncodedTrace | Sequence[int], w: int) -> list[Window]:
    """``len - w`` windows; window ``j`` predicts ``keys[j + w]`` from ``keys[j:j + w]``.

    Traces of length ``<= w`` produce nothing.
    """
    if w < 1:
        raise ValueError("window size must be >= 1")
    keys = trace.keys if isinstance(trace, EncodedTrace) else tuple(trace)
    source = trace.source if isinstance(trace, EncodedTrace) else None
    return [
        Window(tuple(keys[j : j + w]), keys[j + w], (source, j))
        for j in range(max(0, len(keys) - w))
    ]


def one_hot(key: int, G: int) -> np.ndarray:
    if not 0 <= key < G:
        raise KeyOutOfRange(f"key {key} outside [0, {G})")
    v = np.zeros(G)
    v[key] = 1.0
    return v


@dataclass
class WindowBatch:
    """Windows of a whole corpus as arrays.

    ``trace_index[i]`` is the corpus position of the trace window ``i`` came
    from and ``position[i]`` its offset ``j`` within that trace.
    """

    contexts: np.ndarray  # (N, w) int64
    labels: np.ndarray  # (N,) int64
    truth: np.ndarray  # (N,) bool, ground-truth label of the predicted event
    trace_index: np.ndarray
    position: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def window_arrays(traces: Iterable[EncodedTrace], w: int) -> WindowBatch:
    if w < 1:
        raise ValueError("window size must be >= 1")
    ctx, lab, truth, tidx, pos = [], [], [], [], []
    for i, t in enumerate(traces):
        m = len(t.keys) - w
        if m <= 0:
            continue
        keys = np.asarray(t.keys, dtype=np.int64)
        ctx.append(sliding_window_view(keys[:-1], w)[:m])
        lab.append(keys[w:])
        labels = np.asarray(t.labels, dtype=bool) if t.labels else np.zeros(len(keys), bool)
        truth.append(labels[w:])
        tidx.append(np.full(m, i, dtype=np.int64))
        pos.append(np.arange(m, dtype=np.int64))
    if not ctx:
        empty = np.zeros(0, dtype=np.int64)
        return WindowBatch(np.zeros((0, w), np.int64), empty, np.zeros(0, bool), empty, empty)
    return WindowBatch(
        np.ascontiguousarray(np.concatenate(ctx)),
        np.concatenate(lab),
        np.concatenate(truth),
        np.concatenate(tidx),
        np.concatenate(pos),
    )
