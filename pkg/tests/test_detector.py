import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tasktrace.detector import (
    BadCandidateCount,
    classify_task,
    classify_window,
    observed_ranks,
    read_window_ranks,
    score_windows,
    task_verdicts,
    top_candidates,
    write_task_verdicts,
    write_window_ranks,
)
from tasktrace.encoder import EncodedTrace
from tasktrace.predictor import train_ngram
from tasktrace.sequencer import Window, make_windows, window_arrays
from tasktrace.tasktree import NodeKey


class FixedModel:
    """Returns the same distribution for every context."""

    def __init__(self, dist, w=2):
        self.dist = np.asarray(dist, dtype=float)
        self.G = len(self.dist)
        self.w = w

    def predict(self, context):
        return self.dist.copy()

    def predict_proba(self, X):
        return np.tile(self.dist, (len(np.atleast_2d(X)), 1))


def test_top_candidates_examples():
    assert top_candidates([0.5, 0.3, 0.2], 2) == [0, 1]
    assert top_candidates([0.4, 0.3, 0.3], 2) == [0, 1]
    assert top_candidates([0.1, 0.3, 0.3, 0.3], 3) == [1, 2, 3]
    assert sorted(top_candidates([0.2, 0.5, 0.3], 3)) == [0, 1, 2]
    for bad in (0, 4, -1):
        with pytest.raises(BadCandidateCount):
            top_candidates([0.5, 0.3, 0.2], bad)


def test_rank_agrees_with_top_candidates_on_ties():
    probs = np.array([[0.4, 0.3, 0.3], [0.2, 0.2, 0.6], [1 / 3, 1 / 3, 1 / 3]])
    for row in probs:
        for obs in range(3):
            r = observed_ranks(row[None, :], np.array([obs]))[0]
            assert top_candidates(row, 3).index(obs) == r


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=8), st.data())
def test_rank_is_membership_test(weights, data):
    # integer weights give plenty of exact ties
    dist = np.array(weights, dtype=float)
    G = len(dist)
    obs = data.draw(st.integers(0, G - 1))
    r = observed_ranks(dist[None, :], np.array([obs]))[0]
    for t in range(1, G + 1):
        assert (obs in top_candidates(dist, t)) == (r < t)


def test_unknown_key_is_always_anomalous():
    model = FixedModel([0.05, 0.05, 0.9], w=1)  # key 2 = unknown, and the model loves it
    win = Window((0,), 2, (None, 0))
    for t in (1, 2, 3):
        assert classify_window(model, win, t).anomalous
    assert observed_ranks(model.predict_proba([[0]]), np.array([2]), unknown=2)[0] == 3


def test_classify_window_verdict():
    model = FixedModel([0.5, 0.3, 0.1, 0.1, 0.0], w=1)
    v = classify_window(model, Window((0,), 1, ("task", 7)), 2)
    assert v.top_t == (0, 1) and not v.anomalous and v.origin == ("task", 7)
    assert classify_window(model, Window((0,), 1, None), 1).anomalous


def test_monotone_in_t():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(7), 300)
    obs = rng.integers(0, 7, 300)
    ranks = observed_ranks(probs, obs, unknown=6)
    prev = None
    for t in range(1, 8):
        flagged = ranks >= t
        if prev is not None:
            assert np.all(flagged <= prev)
        prev = flagged


def test_task_verdict_is_or_over_windows():
    # key 3 never predicted in the top 2
    model = FixedModel([0.4, 0.3, 0.2, 0.1, 0.0], w=2)
    clean = EncodedTrace((0, 1, 0, 1, 0), source=NodeKey(1, "a"))
    dirty = EncodedTrace((0, 1, 0, 3, 0, 3), source=NodeKey(2, "b"), malicious=True)
    v = classify_task(model, clean, 2, 2)
    assert (v.n_windows, v.n_anomalous, v.first_anomaly_position) == (3, 0, None)
    assert not v.malicious_predicted
    v = classify_task(model, dirty, 2, 2)
    assert (v.n_windows, v.n_anomalous, v.first_anomaly_position) == (4, 2, 1)
    assert v.malicious_predicted and v.true_label
    early = classify_task(model, dirty, 2, 2, stop_at_first=True)
    assert early.malicious_predicted and early.first_anomaly_position == 1


def test_short_trace_unevaluated():
    model = FixedModel([0.5, 0.5, 0.0], w=3)
    v = classify_task(model, EncodedTrace((0, 1, 0)), 3, 1)
    assert not v.evaluated and not v.malicious_predicted
    with pytest.raises(BadCandidateCount):
        classify_task(model, EncodedTrace((0, 1, 0, 1)), 3, 0)


def test_batch_path_matches_per_task_path():
    rng = np.random.default_rng(4)
    traces = [EncodedTrace(tuple(rng.integers(0, 6, rng.integers(0, 30)).tolist()),
                           source=NodeKey(i, "x"), malicious=bool(i % 3 == 0))
              for i in range(25)]
    model = train_ngram(window_arrays(traces[:10], 2), order=2, smoothing=0.1, G=7)
    batch = window_arrays(traces, 2)
    ranks = score_windows(model, batch)
    for t in (1, 3, 7):
        fast = task_verdicts(traces, batch, ranks, t)
        slow = [classify_task(model, tr, 2, t) for tr in traces]
        assert fast == slow


def test_per_window_path_matches_ranks():
    traces = [EncodedTrace((0, 1, 2, 0, 1, 3, 0, 1, 2))]
    model = train_ngram(make_windows(traces[0], 2), order=1, G=5)
    batch = window_arrays(traces, 2)
    ranks = score_windows(model, batch, unknown=4)
    for win, r in zip(make_windows(traces[0], 2), ranks):
        for t in (1, 2, 5):
            assert classify_window(model, win, t, unknown=4).anomalous == (r >= t)


def test_writers(tmp_path):
    traces = [EncodedTrace((0, 1, 0, 1), source=NodeKey(1, "a"), user="alice"),
              EncodedTrace((0,), source=NodeKey(2, "b"), malicious=True, user="bob")]
    model = FixedModel([0.6, 0.4, 0.0], w=2)
    batch = window_arrays(traces, 2)
    ranks = score_windows(model, batch)
    write_window_ranks(batch, ranks, tmp_path / "w.csv")
    back = read_window_ranks(tmp_path / "w.csv")
    assert np.array_equal(back["rank"], ranks)
    assert np.array_equal(back["position"], batch.position)
    write_task_verdicts(task_verdicts(traces, batch, ranks, 1), tmp_path / "v.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "user,task_key,n_windows,n_anomalous,first_anomaly_position,predicted,true_label"
    assert lines[1] == "alice,1/a,2,1,1,1,0"
    assert lines[2] == "bob,2/b,0,0,,unevaluated,1"
