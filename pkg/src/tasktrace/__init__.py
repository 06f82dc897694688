"""Task-tree based anomaly detection over host telemetry.

Events are regrouped into per-user process task trees, each task is turned
into a chronological key trace, runs are collapsed by the encoder, and a
next-key LSTM trained on benign traces flags observed keys that fall outside
its top candidates.
"""

__version__ = "0.1.0"

from tasktrace.ingest import (
    EventRecord,
    KeyVocabulary,
    MalformedLine,
    UnsupportedEventID,
    build_vocabulary,
    key_of,
    parse_lanl_line,
    parse_optc_line,
)
from tasktrace.tasktree import NodeKey, TaskTree, Trace, create_task_tree, flag_nodes
from tasktrace.encoder import EncodedTrace, encode, encode_trace, extended_alphabet_size
from tasktrace.sequencer import Window, make_windows, one_hot
from tasktrace.predictor import Hyperparams, LstmModel, NgramModel, train_lstm, train_ngram
from tasktrace.detector import classify_task, classify_window, top_candidates
from tasktrace.evaluation import MetricsReport, score_next_key, score_task_based, score_trace_based

__all__ = [
    "EventRecord",
    "KeyVocabulary",
    "MalformedLine",
    "UnsupportedEventID",
    "build_vocabulary",
    "key_of",
    "parse_lanl_line",
    "parse_optc_line",
    "NodeKey",
    "TaskTree",
    "Trace",
    "create_task_tree",
    "flag_nodes",
    "EncodedTrace",
    "encode",
    "encode_trace",
    "extended_alphabet_size",
    "Window",
    "make_windows",
    "one_hot",
    "Hyperparams",
    "LstmModel",
    "NgramModel",
    "train_lstm",
    "train_ngram",
    "classify_task",
    "classify_window",
    "top_candidates",
    "MetricsReport",
    "score_next_key",
    "score_task_based",
    "score_trace_based",
]
