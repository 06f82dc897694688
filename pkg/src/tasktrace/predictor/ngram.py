"""Count-based next-key model, used as a baseline and as an oracle for the LSTM."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tasktrace.encoder import KeyOutOfRange


@dataclass
class NgramModel:
    """P(next | last ``order`` keys) = (count + s) / (total + s * G).

    A context never seen in training gets the uniform distribution, with or
    without smoothing.
    """

    G: int
    order: int = 1
    smoothing: float = 0.0
    counts: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")

    def _key(self, context: Sequence[int]) -> tuple[int, ...]:
        if len(context) < self.order:
            raise ValueError(f"context shorter than order {self.order}")
        return tuple(int(k) for k in context[len(context) - self.order :])

    def update(self, context: Sequence[int], label: int) -> None:
        if not 0 <= label < self.G:
            raise KeyOutOfRange(f"key {label} outside [0, {self.G})")
        row = self.counts.get(self._key(context))
        if row is None:
            row = self.counts[self._key(context)] = np.zeros(self.G)
        row[label] += 1

    def predict(self, context: Sequence[int]) -> np.ndarray:
        if any(not 0 <= k < self.G for k in context):
            raise KeyOutOfRange(f"context keys must lie in [0, {self.G})")
        row = self.counts.get(self._key(context))
        if row is None or row.sum() + self.smoothing * self.G == 0:
            return np.full(self.G, 1.0 / self.G)
        return (row + self.smoothing) / (row.sum() + self.smoothing * self.G)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.int64)
        if X.ndim == 1:
            X = X[None, :]
        cache: dict[tuple[int, ...], np.ndarray] = {}
        out = np.empty((len(X), self.G))
        for i, ctx in enumerate(X):
            key = self._key(ctx)
            if key not in cache:
                cache[key] = self.predict(ctx)
            out[i] = cache[key]
        return out


def train_ngram(windows, order: int = 1, smoothing: float = 0.0, G: int | None = None) -> NgramModel:
    """Exact count tables over ``windows`` (list of Window, WindowBatch or ``(X, y)``)."""
    from tasktrace.predictor.lstm import _as_arrays

    X, y = _as_arrays(windows)
    if G is None:
        G = int(max(X.max(initial=0), y.max(initial=0))) + 1
    model = NgramModel(G=G, order=order, smoothing=smoothing)
    grouped: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for ctx, label in zip(X, y):
        grouped[model._key(ctx)].append(int(label))
    for key, labels in grouped.items():
        row = np.bincount(labels, minlength=G).astype(float)
        if len(row) > G:
            raise KeyOutOfRange(f"label outside [0, {G})")
        model.counts[key] = row
    return model
