"""Process task trees.

Each event contributes a node ``(pid, object_id)`` hanging under
``(ppid, actor_id)``. Parents that have not been seen yet are parked under a
synthetic root; when they show up later they get moved under their real
parent. A node that reappears with a different parent has its whole subtree
renamed and detached to the root (the old lineage is kept as its own task),
and a fresh node is created under the new parent.

Every child of the root is a task.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from tasktrace.ingest import EventRecord, KeyVocabulary, group_by_user, key_of


class NodeKey(NamedTuple):
    pid: int
    ident: str
    suffix: int = 0  # 0 unless the node was renamed by flag_nodes

    def to_json(self) -> list:
        return [self.pid, self.ident, self.suffix]

    def __str__(self) -> str:
        base = f"{self.pid}/{self.ident}"
        return base if self.suffix == 0 else f"{base}#{self.suffix}"


class UnknownNode(KeyError):
    pass


@dataclass
class TaskNode:
    key: NodeKey
    parent: NodeKey | None  # None is the synthetic root
    children: dict[NodeKey, None] = field(default_factory=dict)  # ordered set
    payload: list[EventRecord] = field(default_factory=list)


@dataclass
class TaskTree:
    nodes: dict[NodeKey, TaskNode] = field(default_factory=dict)
    root_children: dict[NodeKey, None] = field(default_factory=dict)
    flag_count: int = 0
    # nodes left under the root on purpose: self-parented events, or a move
    # that would have closed a cycle
    guarded: set[NodeKey] = field(default_factory=set)

    def __contains__(self, key: NodeKey) -> bool:
        return key in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, key: NodeKey) -> TaskNode:
        try:
            return self.nodes[key]
        except KeyError:
            raise UnknownNode(key) from None

    def children_of(self, key: NodeKey | None) -> list[NodeKey]:
        if key is None:
            return list(self.root_children)
        return list(self.node(key).children)

    def add_node(
        self, key: NodeKey, parent: NodeKey | None = None, events: Sequence[EventRecord] = ()
    ) -> TaskNode:
        if key in self.nodes:
            raise ValueError(f"node {key} already exists")
        node = TaskNode(key, parent, payload=list(events))
        self.nodes[key] = node
        self._siblings(parent)[key] = None
        return node

    def move(self, key: NodeKey, new_parent: NodeKey | None) -> None:
        node = self.node(key)
        del self._siblings(node.parent)[key]
        node.parent = new_parent
        self._siblings(new_parent)[key] = None

    def is_ancestor(self, ancestor: NodeKey, key: NodeKey) -> bool:
        """True when ``ancestor`` is ``key`` or lies on its path to the root."""
        cur: NodeKey | None = key
        while cur is not None:
            if cur == ancestor:
                return True
            cur = self.nodes[cur].parent
        return False

    def subtree(self, key: NodeKey) -> list[NodeKey]:
        """Preorder listing of ``key`` and its descendants."""
        self.node(key)
        out = []
        stack = [key]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(reversed(self.nodes[k].children))
        return out

    def tasks(self) -> list[NodeKey]:
        return list(self.root_children)

    def n_events(self) -> int:
        return sum(len(n.payload) for n in self.nodes.values())

    def _siblings(self, parent: NodeKey | None) -> dict[NodeKey, None]:
        return self.root_children if parent is None else self.nodes[parent].children


def flag_nodes(tree: TaskTree, key: NodeKey) -> int:
    """Rename ``key`` and its subtree to fresh keys and hang the copy under the root.

    Renaming is preorder; every renamed node takes ``flag_count + 1`` as its
    suffix and bumps the counter. Payloads move with their nodes. Returns the
    updated counter.
    """
    top = tree.node(key)
    del tree._siblings(top.parent)[key]
    stack: list[tuple[NodeKey, NodeKey | None]] = [(key, None)]
    while stack:
        old_key, new_parent = stack.pop()
        old = tree.nodes.pop(old_key)
        tree.guarded.discard(old_key)
        tree.flag_count += 1
        new_key = NodeKey(old_key.pid, old_key.ident, tree.flag_count)
        tree.add_node(new_key, new_parent, old.payload)
        stack.extend((child, new_key) for child in reversed(old.children))
    return tree.flag_count


def insert_event(tree: TaskTree, event: EventRecord) -> None:
    node_id = NodeKey(event.pid, event.object_id)
    parent_id = NodeKey(event.ppid, event.actor_id)

    if node_id == parent_id:
        # an event that names itself as parent cannot be placed under anything
        if node_id in tree.nodes:
            tree.nodes[node_id].payload.append(event)
            if tree.nodes[node_id].parent is None:
                tree.guarded.add(node_id)
        else:
            tree.add_node(node_id, None, [event])
            tree.guarded.add(node_id)
        return

    node = tree.nodes.get(node_id)
    if node is None:
        if parent_id not in tree.nodes:
            tree.add_node(parent_id, None)
        tree.add_node(node_id, parent_id, [event])
    elif node.parent is None:
        if parent_id not in tree.nodes:
            tree.add_node(parent_id, None)
        if tree.is_ancestor(node_id, parent_id):
            tree.guarded.add(node_id)
        else:
            tree.move(node_id, parent_id)
            tree.guarded.discard(node_id)
        node.payload.append(event)
    elif node.parent != parent_id:
        flag_nodes(tree, node_id)
        if parent_id not in tree.nodes:
            tree.add_node(parent_id, None)
        tree.add_node(node_id, parent_id, [event])
    else:
        node.payload.append(event)


def create_task_tree(events: Iterable[EventRecord]) -> TaskTree:
    """Fold a chronologically ordered event stream into a task tree."""
    tree = TaskTree()
    for event in events:
        insert_event(tree, event)
    return tree


def build_user_trees(
    records: Iterable[EventRecord], threads: int = 1
) -> dict[str, TaskTree]:
    """One tree per principal; records must already be sorted."""
    users = group_by_user(records)
    names = sorted(users)
    if threads <= 1 or len(names) <= 1:
        return {u: create_task_tree(users[u]) for u in names}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        trees = list(pool.map(lambda u: create_task_tree(users[u]), names))
    return dict(zip(names, trees))


@dataclass(frozen=True)
class Trace:
    task_key: NodeKey
    keys: tuple[int, ...]
    malicious: bool
    labels: tuple[bool, ...] = ()
    ordinals: tuple[int, ...] = ()
    user: str = ""

    def __len__(self) -> int:
        return len(self.keys)


def trace_of(
    tree: TaskTree,
    task: NodeKey,
    vocab: KeyVocabulary,
    truncate: int | None = None,
    user: str = "",
) -> Trace:
    """Chronological key trace of one task.

    The task label is the OR over every event in the task, including events
    cut off by ``truncate``.
    """
    if task not in tree.nodes:
        raise UnknownNode(task)
    if tree.nodes[task].parent is not None:
        raise ValueError(f"{task} is not a task (its parent is not the root)")
    events = [e for k in tree.subtree(task) for e in tree.nodes[k].payload]
    events.sort(key=lambda e: e.sort_key)
    malicious = any(e.malicious for e in events)
    if truncate is not None:
        events = events[:truncate]
    return Trace(
        task_key=task,
        keys=tuple(key_of(e, vocab) for e in events),
        malicious=malicious,
        labels=tuple(e.malicious for e in events),
        ordinals=tuple(e.ingest_ordinal for e in events),
        user=user,
    )


def traces_of(
    tree: TaskTree, vocab: KeyVocabulary, truncate: int | None = None, user: str = ""
) -> list[Trace]:
    return [trace_of(tree, t, vocab, truncate, user) for t in tree.tasks()]


def check_tree(tree: TaskTree) -> None:
    """Raise AssertionError if parent links, child sets and reachability disagree."""
    seen: set[NodeKey] = set()
    stack = [(k, None) for k in tree.root_children]
    while stack:
        key, parent = stack.pop()
        assert key not in seen, f"{key} reached twice"
        seen.add(key)
        node = tree.nodes[key]
        assert node.key == key
        assert node.parent == parent, f"{key} parent link mismatch"
        stack.extend((c, key) for c in node.children)
    assert seen == set(tree.nodes), "unreachable nodes present"


def write_tree_jsonl(tree: TaskTree, path: str | Path) -> None:
    """One node per line in preorder from the root, so parents precede children."""
    with open(path, "w", encoding="utf-8") as fh:
        for task in tree.tasks():
            for key in tree.subtree(task):
                node = tree.nodes[key]
                fh.write(json.dumps({
                    "key": key.to_json(),
                    "parent": "R" if node.parent is None else node.parent.to_json(),
                    "events": [e.ingest_ordinal for e in node.payload],
                }) + "\n")


def read_tree_jsonl(path: str | Path, index: Mapping[int, EventRecord]) -> TaskTree:
    """Rebuild a tree; ``index`` maps ingest ordinals back to records."""
    tree = TaskTree()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            key = NodeKey(*obj["key"])
            parent = None if obj["parent"] == "R" else NodeKey(*obj["parent"])
            tree.add_node(key, parent, [index[o] for o in obj["events"]])
            tree.flag_count = max(tree.flag_count, key.suffix)
    return tree
