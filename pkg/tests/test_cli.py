import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from selgen.cli import main
from selgen.corpus import load_corpus
from selgen.evaluation import read_alignment
from selgen.model import load_checkpoint

TINY = ["--desk", "--hidden", "6", "--embed", "6", "--gamma", "4", "--max-iters", "4", "--eval-every", "2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--n", "12", "--dev-n", "3", "--test-n", "3", "--records", "5", "--salient", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--corpus", str(data / "train.jsonl"), "--dev", str(data / "dev.jsonl"), "--out", str(out), *TINY]) == 0
    return out


def test_synth_is_reproducible_and_splits_differ(data, tmp_path):
    again = tmp_path / "again"
    main(["synth", "--out", str(again), "--n", "12", "--dev-n", "3", "--test-n", "3", "--records", "5", "--salient", "3"])
    for split in ("train", "dev", "test"):
        assert (again / f"{split}.jsonl").read_bytes() == (data / f"{split}.jsonl").read_bytes()
    train = {json.dumps(s.to_json()) for s in load_corpus(data / "train.jsonl")}
    dev = {json.dumps(s.to_json()) for s in load_corpus(data / "dev.jsonl")}
    assert not train & dev


def test_train_outputs(trained):
    for name in ("model.json", "train_log.json", "report.json", "run_config.json"):
        assert (trained / name).is_file()
    cfg = json.loads((trained / "run_config.json").read_text())
    assert cfg["batch_size"] == 10 and cfg["ensemble"] == 1 and cfg["command"] == "train"
    report = json.loads((trained / "report.json").read_text())
    assert report["model"]["hidden_size"] == 6 and report["members"][0]["iterations"] == 4


def test_published_defaults_without_preset():
    from selgen.cli import _resolve_train, build_parser

    args = build_parser().parse_args(["train"])
    _resolve_train(args)
    assert (args.batch_size, args.hidden, args.gamma, args.ensemble) == (100, 500, 8.5, 5)


def test_missing_corpus_is_a_usage_error(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "nope.jsonl"), "--dev", "x", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "no such file" in err


def test_basic_aligner_recorded(data, tmp_path):
    out = tmp_path / "basic"
    main(["train", "--corpus", str(data / "train.jsonl"), "--dev", str(data / "dev.jsonl"), "--out", str(out), *TINY, "--aligner", "basic"])
    assert load_checkpoint(out / "model.json").config.aligner_mode == "basic"


def test_config_replay_is_identical(data, trained, tmp_path):
    out = tmp_path / "replay"
    assert main(["train", "--config", str(trained / "run_config.json"), "--out", str(out)]) == 0
    assert (out / "model.json").read_bytes() == (trained / "model.json").read_bytes()
    with pytest.raises(SystemExit):
        main(["generate", "--config", str(trained / "run_config.json")])


def test_generate_beam_one_matches_greedy(data, trained, tmp_path):
    ck, test = str(trained / "model.json"), str(data / "test.jsonl")
    main(["generate", "--checkpoint", ck, "--corpus", test, "--out", str(tmp_path / "g.txt")])
    main(["generate", "--checkpoint", ck, "--corpus", test, "--out", str(tmp_path / "b.txt"), "--decode", "beam", "1"])
    assert (tmp_path / "g.txt").read_text() == (tmp_path / "b.txt").read_text()
    assert len((tmp_path / "g.txt").read_text().splitlines()) == 3
    assert (tmp_path / "g.txt.config.json").is_file()


def test_generate_knn_and_filter_agree(data, trained, tmp_path):
    common = ["--checkpoint", str(trained / "model.json"), "--corpus", str(data / "test.jsonl"), "--train-corpus", str(data / "train.jsonl")]
    assert main(["generate", *common, "--decode", "knn", "2", "1", "--out", str(tmp_path / "k.txt")]) == 0
    assert main(["filter", *common, "--out", str(tmp_path / "f.txt")]) == 0
    assert (tmp_path / "k.txt").read_text() == (tmp_path / "f.txt").read_text()


def test_bad_decode_spec(data, trained):
    assert main(["generate", "--checkpoint", str(trained / "model.json"), "--corpus", str(data / "test.jsonl"), "--decode", "beam"]) == 2


def test_generate_selection_and_alignments(data, trained, tmp_path):
    ck, test = str(trained / "model.json"), str(data / "test.jsonl")
    main(["generate", "--checkpoint", ck, "--corpus", test, "--out", str(tmp_path / "h.txt"),
          "--select", str(tmp_path / "sel.jsonl"), "--alignments", str(tmp_path / "al")])
    sels = [json.loads(line) for line in (tmp_path / "sel.jsonl").read_text().splitlines()]
    assert len(sels) == 3 and all(0 <= j < 5 for s in sels for j in s)
    labels, p, tokens, alpha = read_alignment(tmp_path / "al" / "00000.tsv")
    assert len(labels) == 5 and np.allclose(alpha.sum(axis=1), 1.0, atol=1e-5)

    main(["generate", "--checkpoint", ck, "--corpus", test, "--gold-selection", "--out", str(tmp_path / "gs.txt"),
          "--select", str(tmp_path / "gsel.jsonl")])
    gold = [sorted(s.gold_selection) for s in load_corpus(test)]
    for chosen, g in zip((json.loads(x) for x in (tmp_path / "gsel.jsonl").read_text().splitlines()), gold):
        assert set(chosen) <= set(g)


def test_evaluate_identical_files(data, tmp_path, capsys):
    ref = data / "test.jsonl"
    text = "".join(" ".join(s.tokens) + "\n" for s in load_corpus(ref))
    (tmp_path / "hyp.txt").write_text(text)
    capsys.readouterr()
    assert main(["evaluate", "--hyp", str(tmp_path / "hyp.txt"), "--ref", str(ref), "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sbleu"] == pytest.approx(100.0) and report["cbleu"] == pytest.approx(100.0)
    assert "f1" not in report


def test_evaluate_f1_needs_gold(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("a b c d\n")
    (tmp_path / "r.txt").write_text("a b c d\n")
    (tmp_path / "s.jsonl").write_text("[0]\n")
    rc = main(["evaluate", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt"), "--select", str(tmp_path / "s.jsonl"), "--metric", "f1"])
    assert rc == 1 and "gold selection unavailable" in capsys.readouterr().err


def test_evaluate_f1_with_selection(data, trained, tmp_path, capsys):
    ck, test = str(trained / "model.json"), str(data / "test.jsonl")
    main(["generate", "--checkpoint", ck, "--corpus", test, "--out", str(tmp_path / "h.txt"), "--select", str(tmp_path / "s.jsonl")])
    capsys.readouterr()
    main(["evaluate", "--hyp", str(tmp_path / "h.txt"), "--ref", test, "--select", str(tmp_path / "s.jsonl")])
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["f1"] <= 1.0


def test_inspect(trained, data, tmp_path, capsys):
    ck = str(trained / "model.json")
    assert main(["inspect", "--checkpoint", ck, "--neighbors", "</s>", "3"]) == 1
    assert "reserved token" in capsys.readouterr().err
    assert main(["inspect", "--checkpoint", ck, "--stats"]) == 0
    stats = json.loads(capsys.readouterr().out)
    names = [r["name"] for r in stats["parameters"]]
    assert len(names) == len(set(names)) == 12 and "decoder.E" in names
    assert main(["inspect", "--checkpoint", ck, "--neighbors", "high", "2"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2
    out = tmp_path / "a.tsv"
    assert main(["inspect", "--checkpoint", ck, "--alignment", "0", "--corpus", str(data / "test.jsonl"), "--out", str(out)]) == 0
    _, _, _, alpha = read_alignment(out)
    assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-5)
    assert main(["inspect", "--checkpoint", ck]) == 2


def test_console_script(tmp_path):
    exe = shutil.which("selgen") or None
    cmd = [exe] if exe else [sys.executable, "-m", "selgen.cli"]
    done = subprocess.run([*cmd, "synth", "--out", str(tmp_path), "--n", "2", "--dev-n", "0", "--test-n", "0"], capture_output=True, text=True)
    assert done.returncode == 0 and (tmp_path / "train.jsonl").is_file()
    done = subprocess.run([*cmd, "train"], capture_output=True, text=True)
    assert done.returncode == 2 and "required" in done.stderr
