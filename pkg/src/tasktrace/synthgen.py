"""Seeded synthetic host telemetry.

Benign activity comes from a small Markov grammar over object-action keys:
the keys fall into three phases of four, and each key mostly steps to its
successor within the phase, sometimes skips ahead, repeats, or hops to the
next phase. Processes spawn children through PROCESS-CREATE events whose
``object_id`` is the child's id, the same filiation layout as eCAR records,
so the task tree groups every process's events under its task.

Anomalies are planted by rewriting the keys of existing events, so event
counts never change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from tasktrace.ingest import EventRecord, parse_timestamp, sort_events
from tasktrace.tasktree import create_task_tree

BENIGN_KEYS: tuple[tuple[str, str], ...] = (
    ("PROCESS", "CREATE"), ("MODULE", "LOAD"), ("FILE", "READ"), ("REGISTRY", "READ"),
    ("FILE", "CREATE"), ("FILE", "WRITE"), ("FILE", "MODIFY"), ("FILE", "DELETE"),
    ("FLOW", "START"), ("FLOW", "MESSAGE"), ("REGISTRY", "EDIT"), ("THREAD", "CREATE"),
)
FOREIGN_KEYS: tuple[tuple[str, str], ...] = (
    ("SHELL", "COMMAND"), ("SERVICE", "CREATE"), ("TASK", "CREATE"), ("USER_SESSION", "LOGIN"),
    ("PROCESS", "INJECT"), ("REGISTRY", "REMOVE"),
)
SPAWN = ("PROCESS", "CREATE")
MODES = ("foreign-key", "shuffled", "burst")

_IMAGES = ("svchost.exe", "explorer.exe", "powershell.exe", "chrome.exe", "outlook.exe",
           "notepad.exe", "cmd.exe", "excel.exe")
_BASE_TIME = parse_timestamp("2019-09-23 08:00:00.000000")


@dataclass(frozen=True)
class TaskGrammar:
    keys: tuple[tuple[str, str], ...] = BENIGN_KEYS
    n_phases: int = 3
    p_next: float = 0.75  # successor within the phase
    p_skip: float = 0.10
    p_hop: float = 0.10  # first key of the next phase
    p_self: float = 0.05
    run_rate: float = 0.03  # chance an emitted key becomes a run of 3..8
    max_children: int = 2
    top_length: tuple[int, int] = (70, 130)
    child_length: tuple[int, int] = (15, 45)
    objects_per_process: int = 8

    def __post_init__(self) -> None:
        if len(self.keys) % self.n_phases:
            raise ValueError("key count must be a multiple of the phase count")
        if not np.isclose(self.p_next + self.p_skip + self.p_hop + self.p_self, 1.0):
            raise ValueError("transition probabilities must sum to 1")

    @property
    def n(self) -> int:
        return len(self.keys)

    def transition_matrix(self) -> np.ndarray:
        n, size = self.n, self.n // self.n_phases
        P = np.zeros((n, n))
        for k in range(n):
            phase, pos = divmod(k, size)
            base = phase * size
            P[k, base + (pos + 1) % size] += self.p_next
            P[k, base + (pos + 2) % size] += self.p_skip
            P[k, ((phase + 1) % self.n_phases) * size] += self.p_hop
            P[k, k] += self.p_self
        return P


@dataclass
class _Ids:
    rng: np.random.Generator
    used: set[str] = field(default_factory=set)
    next_pid: int = 1000

    def uid(self) -> str:
        while True:
            s = f"{int(self.rng.integers(0, 2**48)):012x}"
            if s not in self.used:
                self.used.add(s)
                return s

    def pid(self) -> int:
        self.next_pid += int(self.rng.integers(1, 9))
        return self.next_pid


def _emit_process(grammar, P, rng, ids, out, pid, ppid, actor, image, parent_image, t, length,
                  depth, user):
    """Append one process's events (children inline) and return the end time."""
    objects = [ids.uid() for _ in range(grammar.objects_per_process)]
    key = int(rng.integers(0, grammar.n)) if depth == 0 else grammar.n // grammar.n_phases
    children_left = grammar.max_children if depth == 0 else max(0, grammar.max_children - 1)
    children_left = int(rng.integers(0, children_left + 1))
    emitted = 0
    while emitted < length:
        reps = int(rng.integers(3, 9)) if rng.random() < grammar.run_rate else 1
        pair = grammar.keys[key]
        for _ in range(reps):
            t += int(rng.integers(1_000, 400_000))
            spawn = pair == SPAWN and children_left > 0 and depth < 2
            obj = ids.uid() if spawn else objects[int(rng.integers(0, len(objects)))]
            out.append(EventRecord(
                record_id=ids.uid()[:8], object=pair[0], action=pair[1], pid=pid, ppid=ppid,
                actor_id=actor, object_id=obj, timestamp=t, ingest_ordinal=-1, principal=user,
                file_path=f"C:\\Users\\{user}\\f{obj[:4]}.dat" if pair[0] == "FILE" else None,
                image_path=image, parent_image_path=parent_image,
            ))
            emitted += 1
            if spawn:
                children_left -= 1
                child_image = _IMAGES[int(rng.integers(0, len(_IMAGES)))]
                lo, hi = grammar.child_length
                t = _emit_process(grammar, P, rng, ids, out, ids.pid(), pid, obj, child_image,
                                  image, t, int(rng.integers(lo, hi + 1)), depth + 1, user)
        key = int(rng.choice(grammar.n, p=P[key]))
    return t


def generate_benign(
    grammar: TaskGrammar | None = None,
    n_tasks: int = 200,
    seed: int = 0,
    user: str = "user0201",
    branching: int | None = None,
) -> list[EventRecord]:
    """Chronologically ordered benign events for ``n_tasks`` top-level processes.

    Tasks overlap in time, so the raw stream interleaves them.
    """
    grammar = grammar or TaskGrammar()
    if branching is not None:
        grammar = replace(grammar, max_children=branching)
    rng = np.random.default_rng(seed)
    ids = _Ids(rng)
    P = grammar.transition_matrix()
    events: list[EventRecord] = []
    start = _BASE_TIME
    for _ in range(n_tasks):
        shell_pid = ids.pid()
        lo, hi = grammar.top_length
        image = _IMAGES[int(rng.integers(0, len(_IMAGES)))]
        _emit_process(grammar, P, rng, ids, events, ids.pid(), shell_pid, ids.uid(), image,
                      "explorer.exe", start, int(rng.integers(lo, hi + 1)), 0, user)
        start += int(rng.integers(2_000_000, 20_000_000))
    events = sort_events(events)
    return [replace(e, ingest_ordinal=i) for i, e in enumerate(events)]


def task_members(stream: Sequence[EventRecord]) -> list[list[int]]:
    """Stream indices of each task's events, in chronological order."""
    tree = create_task_tree(stream)
    pos = {e.ingest_ordinal: i for i, e in enumerate(stream)}
    out = []
    for task in tree.tasks():
        members = [pos[e.ingest_ordinal] for k in tree.subtree(task) for e in tree.nodes[k].payload]
        out.append(sorted(members, key=lambda i: stream[i].sort_key))
    return out


def plant_anomalies(
    stream: Sequence[EventRecord],
    k: int,
    mode: str = "foreign-key",
    seed: int = 0,
    grammar: TaskGrammar | None = None,
    events_per_task: int = 3,
    min_task_length: int = 40,
) -> list[EventRecord]:
    """Rewrite keys inside ``k`` tasks and label the rewritten events malicious.

    foreign-key
        ``events_per_task`` events take keys from a sub-alphabet the benign
        grammar never emits.
    shuffled
        the keys of the task's later half are permuted; events whose key
        changed are labelled.
    burst
        ``events_per_task`` events take a benign key the grammar cannot
        produce after the preceding event's key.

    Rewrites only touch the second half of a task so the sliding window has
    benign context before the first planted event.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    out = list(stream)
    if k == 0:
        return out
    grammar = grammar or TaskGrammar()
    rng = np.random.default_rng(seed)
    tasks = [m for m in task_members(out) if len(m) >= min_task_length]
    if k > len(tasks):
        raise ValueError(f"cannot plant {k} anomalies in {len(tasks)} eligible tasks")
    chosen = sorted(rng.choice(len(tasks), size=k, replace=False).tolist())
    P = grammar.transition_matrix()
    key_index = {p: i for i, p in enumerate(grammar.keys)}
    for ti in chosen:
        members = tasks[ti]
        half = members[len(members) // 2 :]
        if mode == "shuffled":
            pairs = [out[i].pair for i in half]
            perm = rng.permutation(len(half))
            new = [pairs[j] for j in perm]
            if new == pairs:
                distinct = [j for j in range(1, len(pairs)) if pairs[j] != pairs[0]]
                if not distinct:
                    raise ValueError("task has a single repeated key; cannot shuffle")
                j = distinct[0]
                new[0], new[j] = pairs[j], pairs[0]
            for i, pair in zip(half, new):
                if pair != out[i].pair:
                    out[i] = replace(out[i], object=pair[0], action=pair[1], malicious=True)
            continue
        picks = sorted(rng.choice(len(half), size=min(events_per_task, len(half)),
                                  replace=False).tolist())
        for p in picks:
            i = half[p]
            if mode == "foreign-key":
                pair = FOREIGN_KEYS[int(rng.integers(0, len(FOREIGN_KEYS)))]
            else:
                prev = out[half[p - 1]] if p > 0 else out[members[len(members) // 2 - 1]]
                row = P[key_index.get(prev.pair, 0)]
                impossible = np.flatnonzero(row == 0)
                pair = grammar.keys[int(rng.choice(impossible))]
            out[i] = replace(out[i], object=pair[0], action=pair[1], malicious=True)
    return out


def synth_corpora(
    n_tasks: int = 200,
    n_anomalies: int = 20,
    mode: str = "foreign-key",
    seed: int = 7,
    grammar: TaskGrammar | None = None,
    user: str = "user0201",
) -> tuple[list[EventRecord], list[EventRecord]]:
    """Independent benign training stream and a test stream of ``n_tasks``
    benign plus ``n_anomalies`` planted tasks."""
    grammar = grammar or TaskGrammar()
    seeds = np.random.SeedSequence(seed).spawn(3)
    as_int = [int(s.generate_state(1)[0]) for s in seeds]
    train = generate_benign(grammar, n_tasks, as_int[0], user)
    test = generate_benign(grammar, n_tasks + n_anomalies, as_int[1], user)
    test = plant_anomalies(test, n_anomalies, mode, as_int[2], grammar)
    return train, test
