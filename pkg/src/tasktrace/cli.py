"""Command line interface.

Every subcommand reads an optional ``key = value`` config file and flags;
flags win over the file, the file wins over built-in defaults. Each run
writes its artifacts and a ``manifest.json`` into ``--out``.

Exit status: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from tasktrace import __version__
from tasktrace import pipeline as pl
from tasktrace.encoder import EncodedTrace, read_encoded_jsonl, write_encoded_jsonl
from tasktrace.evaluation import MetricsReport
from tasktrace.ingest import (
    EmptyStream,
    KeyVocabulary,
    MalformedLine,
    build_vocabulary,
    read_events_jsonl,
    write_events_jsonl,
    write_optc_csv,
)
from tasktrace.predictor import DimensionMismatch, DivergedLoss, EmptyTrainingSet, Hyperparams, LstmModel
from tasktrace.tasktree import read_tree_jsonl

logger = logging.getLogger("tasktrace")

DEFAULTS: dict[str, object] = {
    "schema": "optc",
    "train": None,
    "test": None,
    "user": None,
    "window": 15,
    "candidates": 5,
    "max_candidates": 10,
    "truncate": None,
    "epochs": 160,
    "seed": 0,
    "threads": None,
    "alpha": 64,
    "layers": 2,
    "batch": 2048,
    "lr0": 0.05,
    "decay": 0.97,
    "clip": 5.0,
    "figures": True,
}
_TYPES = {"truncate": int, "threads": int, "user": str, "train": str, "test": str}
_PATH_KEYS = ("train", "test")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _convert(key: str, raw: str):
    kind = _TYPES.get(key) or type(DEFAULTS[key])
    text = raw.strip()
    if text.lower() in ("", "none"):
        return None
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        return kind(text)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None


def read_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    parser = configparser.ConfigParser(delimiters=("=", ":"), comment_prefixes=("#", ";"))
    parser.read_string("[run]\n" + path.read_text(encoding="utf-8"))
    out = {}
    for key, raw in parser["run"].items():
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}: unknown config key {key!r}")
        out[key] = _convert(key, raw)
        if key in _PATH_KEYS and out[key] is not None and not Path(out[key]).is_absolute():
            out[key] = str(path.parent / out[key])
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    if cfg["schema"] not in ("optc", "lanl"):
        raise UsageError(f"schema must be optc or lanl, got {cfg['schema']!r}")
    for key in ("window", "candidates", "max_candidates", "epochs", "threads", "alpha", "layers",
                "batch"):
        if cfg[key] < 1:
            raise UsageError(f"{key} must be >= 1")
    if cfg["truncate"] is not None and cfg["truncate"] < 1:
        raise UsageError("truncate must be >= 1")
    return cfg


def hyperparams(cfg: dict, G: int) -> Hyperparams:
    return Hyperparams(G=G, w=cfg["window"], L=cfg["layers"], alpha=cfg["alpha"], B=cfg["batch"],
                       epochs=cfg["epochs"], lr0=cfg["lr0"], decay=cfg["decay"],
                       seed=cfg["seed"], clip=cfg["clip"])


def write_manifest(out: Path, command: str, cfg: dict, inputs: list[Path]) -> None:
    """Inputs, outputs and config with content hashes; no wall-clock data."""
    hashed_cfg = {k: v for k, v in cfg.items() if k not in ("threads",)}
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "tool": "tasktrace",
        "version": __version__,
        "command": command,
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(hashed_cfg, sort_keys=True).encode()).hexdigest(),
        "seed": cfg["seed"],
        "inputs": {str(p): pl.sha256_file(p) for p in inputs},
        "outputs": {str(p.relative_to(out)): pl.sha256_file(p) for p in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args, cfg, out: Path) -> list[Path]:
    from tasktrace.synthgen import synth_corpora

    train, test = synth_corpora(args.tasks, args.anomalies, args.mode, cfg["seed"], user=args.user_name)
    write_optc_csv(train, out / "train.csv")
    write_optc_csv(test, out / "test.csv")
    (out / "synth.conf").write_text(
        "# generated by tasktrace synth\n"
        "schema = optc\n"
        "train = train.csv\n"
        "test = test.csv\n",
        encoding="utf-8",
    )
    return []


def cmd_ingest(args, cfg, out: Path) -> list[Path]:
    src = _need(args.input, "--input")
    records, stats = pl.load_events(src, cfg["schema"], cfg["user"])
    if args.vocab:
        vocab = KeyVocabulary.load(_need(args.vocab, "--vocab"))
    else:
        vocab = build_vocabulary(records)
    write_events_jsonl(records, out / "events.jsonl")
    vocab.save(out / "vocab.json")
    (out / "ingest_stats.json").write_text(json.dumps(
        {"parsed": stats.parsed, "malformed": stats.malformed, "unsupported": stats.unsupported,
         "kept": len(records), "base_keys": vocab.n}, indent=1) + "\n")
    return [src] + ([Path(args.vocab)] if args.vocab else [])


def cmd_tree(args, cfg, out: Path) -> list[Path]:
    src = _need(args.events, "--events")
    records = read_events_jsonl(src)
    trees = pl.build_trees(records, cfg["threads"])
    pl.write_trees(trees, out / "trees")
    return [src]


def _load_trees(events: Path, trees_dir: Path):
    index = {r.ingest_ordinal: r for r in read_events_jsonl(events)}
    mapping = json.loads((trees_dir / "index.json").read_text())
    return {user: read_tree_jsonl(trees_dir / name, index) for user, name in mapping.items()}


def cmd_encode(args, cfg, out: Path) -> list[Path]:
    events = _need(args.events, "--events")
    trees_dir = _need(args.trees, "--trees")
    vocab_path = _need(args.vocab, "--vocab")
    vocab = KeyVocabulary.load(vocab_path)
    encoded = pl.encode_trees(_load_trees(events, trees_dir), vocab, cfg["truncate"])
    write_encoded_jsonl(encoded, out / "encoded.jsonl")
    return [events, vocab_path]


def cmd_train(args, cfg, out: Path) -> list[Path]:
    enc_path = _need(args.encoded, "--encoded")
    vocab_path = _need(args.vocab, "--vocab")
    vocab = KeyVocabulary.load(vocab_path)
    from tasktrace.encoder import alphabet_size

    model, _ = pl.train_on(read_encoded_jsonl(enc_path), hyperparams(cfg, alphabet_size(vocab.n)))
    pl.save_model_outputs(model, out)
    if cfg["figures"]:
        from tasktrace.plotting import plot_training_log

        plot_training_log(model.history, out / "figures" / "training_loss.png")
    return [enc_path, vocab_path]


def cmd_detect(args, cfg, out: Path) -> list[Path]:
    model_path = _need(args.model, "--model")
    enc_path = _need(args.encoded, "--encoded")
    model = LstmModel.load(model_path)
    traces = read_encoded_jsonl(enc_path)
    if cfg["candidates"] > model.G:
        raise UsageError(f"--candidates exceeds the alphabet size {model.G}")
    result = pl.detect(model, traces)
    pl.write_detection(result, traces, cfg["candidates"], out)
    return [model_path, enc_path]


def _evaluate(result: pl.DetectionResult, traces: list[EncodedTrace], cfg: dict, G: int,
              out: Path) -> list[MetricsReport]:
    top = min(cfg["max_candidates"], G)
    reports = result.reports(traces, top)
    next_key = [(t, result.next_key_accuracy(t)) for t in range(1, top + 1)]
    pl.write_evaluation(reports, next_key, out, cfg["figures"])
    return reports


def cmd_evaluate(args, cfg, out: Path) -> list[Path]:
    import numpy as np

    from tasktrace.detector import read_window_ranks
    from tasktrace.sequencer import WindowBatch

    win_path = _need(args.windows, "--windows")
    enc_path = _need(args.encoded, "--encoded")
    data = read_window_ranks(win_path)
    traces = read_encoded_jsonl(enc_path)
    n = len(data["rank"])
    if n and data["trace"].max() >= len(traces):
        raise DataError("window file refers to traces missing from the encoded corpus")
    batch = WindowBatch(np.zeros((n, 0), np.int64), data["observed"], data["truth"],
                        data["trace"], data["position"])
    G = int(args.alphabet) if args.alphabet else cfg["max_candidates"]
    _evaluate(pl.DetectionResult(batch, data["rank"]), traces, cfg, G, out)
    return [win_path, enc_path]


def cmd_pipeline(args, cfg, out: Path) -> list[Path]:
    train_path = _need(cfg["train"], "train input (config 'train' or --train)")
    test_path = _need(cfg["test"], "test input (config 'test' or --test)")
    from tasktrace.encoder import alphabet_size

    train_records, train_stats = pl.load_events(train_path, cfg["schema"], cfg["user"])
    test_records, test_stats = pl.load_events(test_path, cfg["schema"], cfg["user"])
    vocab = build_vocabulary(train_records)
    vocab.save(out / "vocab.json")

    encoded = {}
    for name, records in (("train", train_records), ("test", test_records)):
        trees = pl.build_trees(records, cfg["threads"])
        write_events_jsonl(records, out / f"{name}_events.jsonl")
        pl.write_trees(trees, out / "trees" / name)
        encoded[name] = pl.encode_trees(trees, vocab, cfg["truncate"])
        write_encoded_jsonl(encoded[name], out / f"{name}_encoded.jsonl")

    G = alphabet_size(vocab.n)
    if cfg["candidates"] > G:
        raise UsageError(f"--candidates exceeds the alphabet size {G}")
    model, n_windows = pl.train_on(encoded["train"], hyperparams(cfg, G))
    pl.save_model_outputs(model, out)

    result = pl.detect(model, encoded["test"])
    pl.write_detection(result, encoded["test"], cfg["candidates"], out)
    reports = _evaluate(result, encoded["test"], cfg, G, out)
    if cfg["figures"]:
        from tasktrace.plotting import plot_training_log

        plot_training_log(model.history, out / "figures" / "training_loss.png")

    info = pl.diagnostics(vocab, encoded["train"], encoded["test"], cfg["window"])
    info.update({
        "train_windows": n_windows,
        "test_windows": len(result.ranks),
        "malformed_lines": train_stats.malformed + test_stats.malformed,
        "unsupported_lines": train_stats.unsupported + test_stats.unsupported,
    })
    (out / "diagnostics.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    print(pl.format_table(reports), end="")
    return [train_path, test_path]


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "tree": cmd_tree,
    "encode": cmd_encode,
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--schema", choices=("optc", "lanl"))
    common.add_argument("--user", help="only events of this principal")
    common.add_argument("--window", type=int)
    common.add_argument("--candidates", type=int, help="top-t size for task verdicts")
    common.add_argument("--max-candidates", dest="max_candidates", type=int,
                        help="largest t in the metric sweep")
    common.add_argument("--truncate", type=int, help="keep the first N events of each task")
    common.add_argument("--epochs", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--alpha", type=int, help="LSTM memory units per layer")
    common.add_argument("--layers", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr0", type=float)
    common.add_argument("--decay", type=float)
    common.add_argument("--clip", type=float)
    common.add_argument("--no-figures", dest="figures", action="store_const", const=False)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tasktrace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic telemetry")
    p.add_argument("--tasks", type=int, default=200)
    p.add_argument("--anomalies", type=int, default=20)
    p.add_argument("--mode", choices=("foreign-key", "shuffled", "burst"), default="foreign-key")
    p.add_argument("--user-name", default="user0201")

    p = sub.add_parser("ingest", parents=[common], help="parse telemetry into events + vocabulary")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", help="reuse an existing vocabulary instead of building one")

    p = sub.add_parser("tree", parents=[common], help="build per-user task trees")
    p.add_argument("--events", required=True)

    p = sub.add_parser("encode", parents=[common], help="encode task traces")
    p.add_argument("--events", required=True)
    p.add_argument("--trees", required=True, help="directory written by 'tree'")
    p.add_argument("--vocab", required=True)

    p = sub.add_parser("train", parents=[common], help="train the LSTM on benign traces")
    p.add_argument("--encoded", required=True)
    p.add_argument("--vocab", required=True)

    p = sub.add_parser("detect", parents=[common], help="score encoded traces")
    p.add_argument("--model", required=True)
    p.add_argument("--encoded", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="metrics from detection output")
    p.add_argument("--windows", required=True)
    p.add_argument("--encoded", required=True)
    p.add_argument("--alphabet", type=int, help="alphabet size, caps the candidate sweep")

    p = sub.add_parser("pipeline", parents=[common], help="ingest through evaluate in one run")
    p.add_argument("--train", help="training telemetry (benign)")
    p.add_argument("--test", help="evaluation telemetry")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=cfg["threads"]):
            inputs = COMMANDS[args.command](args, cfg, out)
        write_manifest(out, args.command, cfg, inputs)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError, MalformedLine, EmptyStream, EmptyTrainingSet, DimensionMismatch,
            DivergedLoss, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
