from __future__ import annotations

import itertools

import pytest

from tasktrace.ingest import EventRecord

_ordinals = itertools.count()


def ev(pid, oid, ppid, aid, ts=None, obj="FILE", act="READ", malicious=False, user="u1",
       ordinal=None):
    """Compact EventRecord for tree tests; timestamps default to the ordinal."""
    o = next(_ordinals) if ordinal is None else ordinal
    return EventRecord(
        record_id=f"r{o}", object=obj, action=act, pid=pid, ppid=ppid, actor_id=aid,
        object_id=oid, timestamp=o if ts is None else ts, ingest_ordinal=o, principal=user,
        malicious=malicious,
    )


def stream(*entries):
    """Events numbered 0.. in the given order; each entry is (pid, oid, ppid, aid[, kwargs])."""
    out = []
    for i, fields in enumerate(entries):
        kw = fields[4] if len(fields) > 4 else {}
        out.append(ev(*fields[:4], ordinal=i, **kw))
    return out


@pytest.fixture
def make_event():
    return ev


# acceptance criteria report one line each; printed after the test summary
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
