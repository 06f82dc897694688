import csv
import json

import pytest

from tasktrace.cli import main, read_config

FAST = ["--window", "5", "--alpha", "8", "--epochs", "2", "--batch", "64", "--threads", "1",
        "--max-candidates", "4"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--tasks", "30", "--anomalies", "3", "--seed", "5"]) == 0
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_outputs(corpus):
    for name in ("train.csv", "test.csv", "synth.conf", "manifest.json"):
        assert (corpus / name).is_file()
    assert read_config(corpus / "synth.conf")["train"] == str(corpus / "train.csv")


def test_pipeline_end_to_end(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["pipeline", "--config", str(corpus / "synth.conf"), "--out", str(out)] + FAST)
    assert rc == 0
    for name in ("vocab.json", "model.ckpt", "train_log.csv", "windows.csv", "verdicts.csv",
                 "metrics.csv", "metrics.txt", "nextkey.csv", "diagnostics.json",
                 "figures/metrics.png", "figures/training_loss.png", "manifest.json",
                 "train_encoded.jsonl", "test_encoded.jsonl", "trees/test/index.json"):
        assert (out / name).is_file(), name
    rows = read_csv(out / "metrics.csv")
    assert [(r["candidates"], r["mode"]) for r in rows[:2]] == [("1", "trace"), ("1", "task")]
    assert len(rows) == 8
    assert "#candidate" in capsys.readouterr().out
    info = json.loads((out / "diagnostics.json").read_text())
    assert info["base_keys"] == 12 and info["test_malicious_tasks"] == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and "metrics.csv" in manifest["outputs"]
    assert str(corpus / "train.csv") in manifest["inputs"]


def test_staged_commands_match_pipeline(corpus, tmp_path):
    one = tmp_path / "one"
    assert main(["pipeline", "--train", str(corpus / "train.csv"), "--test",
                 str(corpus / "test.csv"), "--out", str(one), "--no-figures"] + FAST) == 0

    s = {k: tmp_path / k for k in ("ingest_tr", "ingest_te", "tree_tr", "tree_te", "enc_tr",
                                    "enc_te", "train", "detect", "eval")}
    assert main(["ingest", "--input", str(corpus / "train.csv"), "--out", str(s["ingest_tr"])]) == 0
    vocab = str(s["ingest_tr"] / "vocab.json")
    assert main(["ingest", "--input", str(corpus / "test.csv"), "--vocab", vocab,
                 "--out", str(s["ingest_te"])]) == 0
    for part in ("tr", "te"):
        ev = str(s[f"ingest_{part}"] / "events.jsonl")
        assert main(["tree", "--events", ev, "--out", str(s[f"tree_{part}"])]) == 0
        assert main(["encode", "--events", ev, "--trees", str(s[f"tree_{part}"] / "trees"),
                     "--vocab", vocab, "--out", str(s[f"enc_{part}"])]) == 0
    assert main(["train", "--encoded", str(s["enc_tr"] / "encoded.jsonl"), "--vocab", vocab,
                 "--out", str(s["train"]), "--no-figures"] + FAST) == 0
    assert main(["detect", "--model", str(s["train"] / "model.ckpt"), "--encoded",
                 str(s["enc_te"] / "encoded.jsonl"), "--out", str(s["detect"])] + FAST) == 0
    assert main(["evaluate", "--windows", str(s["detect"] / "windows.csv"), "--encoded",
                 str(s["enc_te"] / "encoded.jsonl"), "--alphabet", "25", "--out", str(s["eval"]),
                 "--no-figures"] + FAST) == 0

    assert (s["train"] / "model.ckpt").read_bytes() == (one / "model.ckpt").read_bytes()
    assert (s["detect"] / "windows.csv").read_bytes() == (one / "windows.csv").read_bytes()
    assert (s["eval"] / "metrics.csv").read_bytes() == (one / "metrics.csv").read_bytes()


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert main(["pipeline", "--out", str(tmp_path), "--bogus"]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["pipeline", "--out", str(tmp_path), "--window", "0"]) == 1
    assert main([]) == 1


def test_missing_input_is_data_error(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    rc = main(["ingest", "--input", str(missing), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["pipeline", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2


def test_empty_input_is_data_error(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["pipeline", "--train", str(empty), "--test", str(empty),
                 "--out", str(tmp_path / "o")] + FAST) == 2


def test_config_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("window = 7\nepochs = 3\n# comment\ntrain = data/t.csv\n")
    cfg = read_config(conf)
    assert cfg == {"window": 7, "epochs": 3, "train": str(tmp_path / "data" / "t.csv")}

    from tasktrace.cli import build_parser, resolve_config

    args = build_parser().parse_args(["train", "--config", str(conf), "--encoded", "x",
                                      "--vocab", "y", "--out", "o", "--epochs", "9"])
    cfg = resolve_config(args)
    assert (cfg["window"], cfg["epochs"], cfg["alpha"]) == (7, 9, 64)

    conf.write_text("windw = 7\n")
    assert main(["train", "--config", str(conf), "--encoded", "x", "--vocab", "y",
                 "--out", str(tmp_path / "o")]) == 1
