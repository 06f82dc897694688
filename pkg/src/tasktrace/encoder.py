"""Run collapsing for key traces.

A run of three or more identical keys ``k`` is rewritten as ``k, k, k + n``
where ``n`` is the base vocabulary size, so a long burst of one action
(thousands of file writes, say) cannot fill a whole prediction window.
Shorter runs pass through untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tasktrace.tasktree import NodeKey, Trace


class KeyOutOfRange(ValueError):
    pass


def unknown_key(n: int) -> int:
    """Out-of-vocabulary symbol in the encoded alphabet."""
    return 2 * n


def alphabet_size(n: int) -> int:
    """Base keys, primed keys and the unknown symbol."""
    return 2 * n + 1


@dataclass(frozen=True)
class EncodedTrace:
    keys: tuple[int, ...]
    source: NodeKey | None = None
    malicious: bool = False
    labels: tuple[bool, ...] = ()
    user: str = ""

    def __len__(self) -> int:
        return len(self.keys)

    def to_json(self) -> dict:
        return {
            "task": self.source.to_json() if self.source is not None else None,
            "user": self.user,
            "malicious": self.malicious,
            "keys": list(self.keys),
            "labels": [int(x) for x in self.labels],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EncodedTrace":
        task = obj.get("task")
        keys = tuple(int(k) for k in obj["keys"])
        labels = obj.get("labels")
        return cls(
            keys=keys,
            source=NodeKey(*task) if task is not None else None,
            malicious=bool(obj.get("malicious", False)),
            labels=tuple(bool(x) for x in labels) if labels is not None else (False,) * len(keys),
            user=obj.get("user", ""),
        )


def encode(keys: Sequence[int], n: int) -> list[int]:
    """Collapse runs longer than two; keys must lie in ``[0, n)``."""
    a = np.asarray(keys, dtype=np.int64).reshape(-1)
    if a.size == 0:
        return []
    bad = (a < 0) | (a >= n)
    if bad.any():
        raise KeyOutOfRange(f"key {int(a[bad.argmax()])} outside [0, {n})")
    starts = np.flatnonzero(np.r_[True, a[1:] != a[:-1]])
    lengths = np.diff(np.r_[starts, a.size])
    kept = np.minimum(lengths, 3)
    out = np.repeat(a[starts], kept)
    out[(np.cumsum(kept) - 1)[lengths >= 3]] += n
    return out.tolist()


def encode_trace(trace: Trace, n: int) -> EncodedTrace:
    """Encode a task trace, carrying per-event labels along.

    Unknown keys (value ``n``) become ``2n``; runs of them are capped at two
    copies since there is no primed form for them. The label of the primed
    symbol is the OR over the events it stands for.
    """
    labels = trace.labels or (False,) * len(trace.keys)
    keys_out: list[int] = []
    labels_out: list[bool] = []
    i = 0
    keys = trace.keys
    while i < len(keys):
        k = keys[i]
        j = i
        while j < len(keys) and keys[j] == k:
            j += 1
        r = j - i
        if k == n:
            emit = [unknown_key(n)] * min(r, 2)
            lab = [labels[i]] + ([any(labels[i + 1 : j])] if r >= 2 else [])
        elif 0 <= k < n:
            if r >= 3:
                emit = [k, k, k + n]
                lab = [labels[i], labels[i + 1], any(labels[i + 2 : j])]
            else:
                emit = [k] * r
                lab = list(labels[i:j])
        else:
            raise KeyOutOfRange(f"key {k} outside [0, {n}]")
        keys_out.extend(emit)
        labels_out.extend(lab)
        i = j
    return EncodedTrace(
        keys=tuple(keys_out),
        source=trace.task_key,
        malicious=trace.malicious,
        labels=tuple(labels_out),
        user=trace.user,
    )


def extended_alphabet_size(traces: Iterable[Sequence[int] | EncodedTrace]) -> int:
    """Number of distinct symbols actually emitted over an encoded corpus."""
    seen: set[int] = set()
    for t in traces:
        seen.update(t.keys if isinstance(t, EncodedTrace) else t)
    return len(seen)


def write_encoded_jsonl(traces: Iterable[EncodedTrace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_json()) + "\n")


def read_encoded_jsonl(path: str | Path) -> list[EncodedTrace]:
    with open(path, "r", encoding="utf-8") as fh:
        return [EncodedTrace.from_json(json.loads(line)) for line in fh if line.strip()]
