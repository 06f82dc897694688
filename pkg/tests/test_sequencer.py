import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tasktrace.encoder import EncodedTrace, KeyOutOfRange
from tasktrace.sequencer import make_windows, one_hot, window_arrays


def test_window_counts():
    assert len(make_windows(list(range(17)), 15)) == 2
    assert make_windows(list(range(15)), 15) == []


def test_first_window():
    win = make_windows(list(range(17)), 15)[0]
    assert win.context == tuple(range(15)) and win.label == 15 and win.origin == (None, 0)


def test_bad_width():
    with pytest.raises(ValueError):
        make_windows([1, 2], 0)


def test_one_hot():
    assert one_hot(0, 3).tolist() == [1, 0, 0]
    assert one_hot(2, 3).tolist() == [0, 0, 1]
    with pytest.raises(KeyOutOfRange):
        one_hot(3, 3)


@given(st.lists(st.lists(st.integers(0, 9), max_size=40), max_size=8), st.integers(1, 10))
def test_window_arrays_agree_with_make_windows(corpus, w):
    traces = [EncodedTrace(tuple(k), labels=tuple(x % 2 == 0 for x in k)) for k in corpus]
    batch = window_arrays(traces, w)
    expected = [win for t in traces for win in make_windows(t, w)]
    assert len(batch) == sum(max(0, len(k) - w) for k in corpus) == len(expected)
    assert [tuple(r) for r in batch.contexts] == [win.context for win in expected]
    assert batch.labels.tolist() == [win.label for win in expected]
    assert batch.truth.tolist() == [win.label % 2 == 0 for win in expected]
    # overlap: a label is the last context key of the next window in the same trace
    for i in range(len(batch) - 1):
        if batch.trace_index[i] == batch.trace_index[i + 1]:
            assert batch.contexts[i + 1, -1] == batch.labels[i]
