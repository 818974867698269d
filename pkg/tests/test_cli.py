import json
import os
import subprocess
import sys

import numpy as np
import pytest

from kgquery.cli import build_parser, main
from kgquery.gnn import GnnConfig, init_params, load_checkpoint
from kgquery.graph import load_splits
from kgquery.bench import attach_usage, read_dataset
from kgquery.query import QUERY_TYPES
from kgquery.toy import write_synthetic
from kgquery.train import TrainConfig, train

SMALL_MODEL = ["--hidden-dim", "8", "--num-layers", "2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = write_synthetic(str(root / "kg"), num_entities=40, num_groups=5, seed=2)
    return root, manifest


@pytest.fixture(scope="module")
def dataset(workdir):
    root, manifest = workdir
    out = str(root / "data")
    assert main(["--seed", "4", "generate", "--manifest", manifest, "--counts", "10", "--out", out]) == 0
    return out


def test_generate_outputs(dataset, capsys):
    for split in ("train", "valid", "test"):
        assert os.path.isfile(os.path.join(dataset, f"{split}.jsonl"))
        assert os.path.isfile(os.path.join(dataset, f"{split}.txt"))
    stats = open(os.path.join(dataset, "stats.md")).read().splitlines()
    assert stats[0].split(" | ")[1:15] == list(QUERY_TYPES)
    assert stats[-1] == "| test | " + " | ".join(["10"] * 14) + " | 140 |"
    # train only holds trainable types when counts are given per type
    assert sum(1 for _ in open(os.path.join(dataset, "train.jsonl"))) == 100
    assert load_splits(os.path.join(dataset, "manifest.json")).test.num_entities == 40


def test_generate_zero_and_repeat(workdir):
    root, manifest = workdir
    zero = str(root / "zero")
    assert main(["generate", "--manifest", manifest, "--counts", "0", "--out", zero]) == 0
    for split in ("train", "valid", "test"):
        assert open(os.path.join(zero, f"{split}.jsonl")).read() == ""
    assert "| test | " + " | ".join(["0"] * 14) + " | 0 |" in open(os.path.join(zero, "stats.md")).read()
    a, b = str(root / "a"), str(root / "b")
    for out in (a, b):
        main(["--seed", "9", "generate", "--manifest", manifest, "--counts", "1p=5,2in=3", "--out", out])
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "stats.md"):
        assert open(os.path.join(a, name), "rb").read() == open(os.path.join(b, name), "rb").read()


def test_train_checkpoint_matches_library(workdir, dataset, capsys):
    root, _ = workdir
    ckpt = str(root / "m.ckpt")
    args = ["--seed", "3", "train", "--data", dataset, "--out", ckpt, "--iterations", "25",
            "--batch-size", "8", *SMALL_MODEL]
    assert main(args) == 0
    out = capsys.readouterr().out
    final = float(out.split("final loss ")[1].split()[0])
    rows = open(str(root / "m.csv")).read().splitlines()
    assert rows[0] == "step,loss,wall_time,valid_mrr" and len(rows) == 26
    assert float(rows[-1].split(",")[1]) == final

    splits = load_splits(os.path.join(dataset, "manifest.json"))
    samples = attach_usage(read_dataset(os.path.join(dataset, "train.jsonl"), splits.test, "train"),
                           splits.train)
    params = init_params(GnnConfig(num_layers=2, hidden_dim=8), splits.train.num_relations, seed=3)
    res = train(samples, params, TrainConfig(iterations=25, batch_size=8, seed=3), splits.train)
    loaded, _ = load_checkpoint(ckpt)
    assert loaded.equal(res.params) and res.losses[-1] == final


def test_train_without_dropout_fits(workdir, capsys):
    root, manifest = workdir
    data = str(root / "fit")
    counts = root / "fit_counts.json"
    counts.write_text(json.dumps({"train": {"1p": 30}, "valid": {"1p": 2}, "test": {"1p": 2}}))
    assert main(["generate", "--manifest", manifest, "--counts", str(counts), "--out", data]) == 0
    capsys.readouterr()
    assert main(["train", "--data", data, "--out", str(root / "fit.ckpt"), "--dropout-p", "0",
                 "--iterations", "150", "--batch-size", "16", *SMALL_MODEL]) == 0
    mrr = float(capsys.readouterr().out.split("training mrr ")[1])
    assert mrr >= 0.95


def test_train_bad_path(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "m")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "missing" in err


def test_eval_neural_and_symbolic(workdir, dataset, capsys):
    root, _ = workdir
    ckpt = str(root / "e.ckpt")
    main(["train", "--data", dataset, "--out", ckpt, "--iterations", "5", "--batch-size", "4", *SMALL_MODEL])
    out = str(root / "metrics")
    assert main(["eval", "--data", dataset, "--checkpoint", ckpt, "--out", out]) == 0
    report = json.load(open(out + ".json"))
    assert set(report["per_type"]) == set(QUERY_TYPES)
    assert open(out + ".md").read().startswith("| metric | avg_p | avg_n |")
    assert main(["eval", "--data", dataset, "--symbolic", "--out", str(root / "sym")]) == 0


def test_eval_flag_conflict_and_refusal(workdir, dataset, capsys):
    root, _ = workdir
    assert main(["eval", "--data", dataset, "--symbolic", "--checkpoint", "x", "--out", "y"]) == 1
    assert "mutually exclusive" in capsys.readouterr().err
    assert main(["eval", "--data", dataset, "--symbolic", "--split", "train", "--out", str(root / "t")]) == 1
    assert "no hard answers" in capsys.readouterr().err
    assert main(["eval", "--data", dataset, "--out", str(root / "t")]) == 1


def test_answer(workdir, capsys):
    _, manifest = workdir
    assert main(["answer", "(E e3)", "--graph", manifest, "--symbolic", "-k", "1"]) == 0
    assert capsys.readouterr().out == "e3\t1.000000\n"
    q = "(OR (P next fwd (E e0)) (P peer fwd (E e1)))"
    assert main(["answer", q, "--graph", manifest, "--symbolic", "-k", "40", "--min-prob", "0.5"]) == 0
    got = {line.split("\t")[0] for line in capsys.readouterr().out.splitlines()}
    left = {line.split("\t")[0] for line in _answer(manifest, "(P next fwd (E e0))", capsys)}
    right = {line.split("\t")[0] for line in _answer(manifest, "(P peer fwd (E e1))", capsys)}
    assert got == left | right and left and right


def _answer(manifest, q, capsys):
    main(["answer", q, "--graph", manifest, "--symbolic", "-k", "40", "--min-prob", "0.5"])
    return capsys.readouterr().out.splitlines()


def test_answer_errors(workdir, capsys):
    _, manifest = workdir
    assert main(["answer", "(P nope fwd (E e1))", "--graph", manifest, "--symbolic"]) == 1
    assert "unknown relation 'nope' at position 3" in capsys.readouterr().err
    assert main(["answer", "(P next fwd (E e1)", "--graph", manifest, "--symbolic"]) == 1
    assert "position 18" in capsys.readouterr().err


def test_inspect_symbolic(dataset, capsys):
    assert main(["inspect", "--data", dataset, "--index", "25", "--symbolic"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("query [3p]") and "false-positive" not in out
    assert main(["inspect", "--data", dataset, "--index", "9999", "--symbolic"]) == 1


def test_help_documents_flags():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"generate", "train", "eval", "answer", "inspect"}
    for name, p in sub.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)
    assert "--threads" in parser.format_help()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "kgquery", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate" in res.stdout
    res = subprocess.run([sys.executable, "-m", "kgquery", "bogus"], capture_output=True, text=True)
    assert res.returncode == 2


def test_threads_flag(workdir, capsys):
    _, manifest = workdir
    assert main(["--threads", "1", "answer", "(E e0)", "--graph", manifest, "--symbolic", "-k", "1"]) == 0
    assert main(["--threads", "0", "answer", "(E e0)", "--graph", manifest, "--symbolic"]) == 2
    np.testing.assert_equal(os.environ["OMP_NUM_THREADS"], "1")
