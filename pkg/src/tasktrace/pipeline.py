"""Stage functions shared by the CLI subcommands and the one-shot pipeline."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tasktrace.detector import score_windows, task_verdicts, write_task_verdicts, write_window_ranks
from tasktrace.encoder import EncodedTrace, alphabet_size, encode_trace, extended_alphabet_size
from tasktrace.evaluation import MetricsReport, format_table, sweep, write_report_csv
from tasktrace.ingest import EventRecord, KeyVocabulary, ParseStats, read_events
from tasktrace.predictor import Hyperparams, LstmModel, train_lstm, write_training_log
from tasktrace.sequencer import WindowBatch, window_arrays
from tasktrace.tasktree import TaskTree, build_user_trees, traces_of, write_tree_jsonl

logger = logging.getLogger(__name__)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def safe_name(user: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", user) or "_anonymous"


def load_events(
    path: str | Path, schema: str = "optc", user: str | None = None
) -> tuple[list[EventRecord], ParseStats]:
    records, stats = read_events(path, schema)
    if user:
        records = [r for r in records if (r.principal or "") == user]
    return records, stats


def build_trees(records: Sequence[EventRecord], threads: int = 1) -> dict[str, TaskTree]:
    return build_user_trees(records, threads)


def encode_trees(
    trees: dict[str, TaskTree], vocab: KeyVocabulary, truncate: int | None = None
) -> list[EncodedTrace]:
    out = []
    for user in sorted(trees):
        for trace in traces_of(trees[user], vocab, truncate, user):
            out.append(encode_trace(trace, vocab.n))
    return out


def write_trees(trees: dict[str, TaskTree], directory: str | Path) -> dict[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for user, tree in sorted(trees.items()):
        name = safe_name(user) + ".jsonl"
        write_tree_jsonl(tree, directory / name)
        index[user] = name
    (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return index


def train_on(traces: Iterable[EncodedTrace], hp: Hyperparams) -> tuple[LstmModel, int]:
    """Train on benign traces only; returns the model and the window count."""
    benign = [t for t in traces if not t.malicious]
    batch = window_arrays(benign, hp.w)
    return train_lstm(batch, hp), len(batch)


@dataclass
class DetectionResult:
    batch: WindowBatch
    ranks: np.ndarray

    def reports(self, traces: Sequence[EncodedTrace], max_candidates: int) -> list[MetricsReport]:
        return sweep(self.ranks, self.batch.truth, self.batch.trace_index, self.batch.position,
                     traces, range(1, max_candidates + 1))

    def next_key_accuracy(self, t: int) -> float | None:
        return float(np.mean(self.ranks < t)) if len(self.ranks) else None


def detect(model, traces: Sequence[EncodedTrace]) -> DetectionResult:
    batch = window_arrays(traces, model.w)
    return DetectionResult(batch, score_windows(model, batch))


def write_detection(result: DetectionResult, traces: Sequence[EncodedTrace], t: int,
                    out: Path) -> None:
    write_window_ranks(result.batch, result.ranks, out / "windows.csv")
    write_task_verdicts(task_verdicts(traces, result.batch, result.ranks, t), out / "verdicts.csv")


def write_evaluation(reports: list[MetricsReport], next_key: list[tuple[int, float | None]],
                     out: Path, figures: bool = True) -> None:
    write_report_csv(reports, out / "metrics.csv")
    (out / "metrics.txt").write_text(format_table(reports), encoding="utf-8")
    with open(out / "nextkey.csv", "w", encoding="utf-8") as fh:
        fh.write("candidates,accuracy\n")
        for t, acc in next_key:
            fh.write(f"{t},{'' if acc is None else f'{acc:.6f}'}\n")
    if figures:
        from tasktrace.plotting import plot_metric_sweep

        plot_metric_sweep(reports, out / "figures" / "metrics.png")


def diagnostics(vocab: KeyVocabulary, train: Sequence[EncodedTrace],
                test: Sequence[EncodedTrace] | None, w: int) -> dict:
    info = {
        "base_keys": vocab.n,
        "alphabet_size": alphabet_size(vocab.n),
        "max_encoded_keys": 2 * vocab.n,
        "observed_encoded_keys_train": extended_alphabet_size(train),
        "train_tasks": len(train),
        "train_tasks_too_short": sum(len(t) <= w for t in train),
    }
    if test is not None:
        info["test_tasks"] = len(test)
        info["test_tasks_unevaluated"] = sum(len(t) <= w for t in test)
        info["test_malicious_tasks"] = sum(t.malicious for t in test)
    return info


def save_model_outputs(model: LstmModel, out: Path) -> None:
    model.save(out / "model.ckpt")
    write_training_log(model, out / "train_log.csv")
