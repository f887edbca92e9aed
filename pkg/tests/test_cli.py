import csv
import json
from pathlib import Path

import pytest

from tprog import ir
from tprog.cli import main
from tprog.extract import verify_equivalence
from tprog.model import load_checkpoint
from tprog.tasks import Dataset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def data_dir(workdir):
    out = workdir / "data"
    assert run("gen", "--task", "hist", "--vocab", 3, "--len", 5, "--samples", 300, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def train_dir(workdir, data_dir):
    out = workdir / "run"
    code = run("train", "--data", data_dir, "--profile", "desk", "--epochs", 3, "--seeds", 2,
               "--layers", 1, "--heads", 2, "--mlps", 2, "--out", out)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def extract_dir(workdir, train_dir):
    out = workdir / "ex"
    assert run("extract", "--checkpoint", train_dir / "best.pt", "--out", out) == 0
    return out


def manifest(path):
    return json.loads((Path(path) / "manifest.json").read_text())


class TestGen:
    def test_sort_splits(self, tmp_path):
        assert run("gen", "--task", "sort", "--vocab", 8, "--len", 8, "--seed", 0, "--out", tmp_path) == 0
        for split in ("train", "val", "test"):
            assert (tmp_path / f"{split}.tsv").is_file()
        m = manifest(tmp_path)
        assert m["command"] == "gen" and m["seeds"] == [0]
        assert all(Path(a).is_file() for a in m["artifacts"])
        d = Dataset.load(tmp_path)
        assert (len(d.train), len(d.val), len(d.test)) == (16000, 2000, 2000)

    def test_dyck_cardinality(self, tmp_path):
        assert run("gen", "--task", "dyck1", "--len", 16, "--samples", 1000, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "dataset.json").read_text())["meta"]["cardinality"] == 16

    def test_missing_task(self, tmp_path, capsys):
        assert run("gen", "--out", tmp_path) == 2
        assert "--task" in capsys.readouterr().err

    def test_replay_is_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            assert run("gen", "--task", "reverse", "--samples", 500, "--seed", 4, "--out", tmp_path / sub) == 0
        for f in ("train.tsv", "val.tsv", "test.tsv", "dataset.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestTrain:
    def test_outputs_and_manifest(self, train_dir):
        m = manifest(train_dir)
        assert m["command"] == "train" and m["seeds"] == [0, 1]
        assert m["config"]["epochs"] == 3 and m["config"]["batch_size"] == 256
        assert all(Path(a).is_file() for a in m["artifacts"])
        ledger = [json.loads(l) for l in (train_dir / "ledger.jsonl").read_text().splitlines()]
        assert ledger[-1]["dataset"] == "hist" and ledger[-1]["L"] == 1

    def test_replay_identical(self, workdir, data_dir, train_dir):
        out = workdir / "replay"
        code = run("train", "--data", data_dir, "--profile", "desk", "--epochs", 3, "--seeds", 2,
                   "--layers", 1, "--heads", 2, "--mlps", 2, "--out", out)
        assert code == 0
        assert (out / "program.tp.json").read_bytes() == (train_dir / "program.tp.json").read_bytes()

    def test_config_file_and_unknown_key(self, tmp_path, data_dir, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 1, "n_layers": 1, "n_heads": 2, "n_mlps": 0, "seeds": 1}))
        assert run("train", "--data", data_dir, "--config", cfg, "--out", tmp_path / "r") == 0
        assert manifest(tmp_path / "r")["config"]["n_mlps"] == 0
        cfg.write_text(json.dumps({"epochz": 1}))
        assert run("train", "--data", data_dir, "--config", cfg, "--out", tmp_path / "r2") == 2
        assert "epochz" in capsys.readouterr().err

    def test_flags_override_file(self, tmp_path, data_dir):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 5, "n_layers": 1, "n_heads": 2, "n_mlps": 0, "seeds": 1}))
        assert run("train", "--data", data_dir, "--config", cfg, "--epochs", 1, "--out", tmp_path / "r") == 0
        assert manifest(tmp_path / "r")["config"]["epochs"] == 1

    def test_missing_data(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "r") == 2


class TestExtract:
    def test_outputs(self, extract_dir, train_dir):
        assert (extract_dir / "program.tp.json").is_file()
        src = (extract_dir / "program.py").read_text()
        compile(src, "program.py", "exec")
        assert (extract_dir / "program.tp.json").read_bytes() == (train_dir / "program.tp.json").read_bytes()
        rows = list(csv.DictReader(open(extract_dir / "stats.csv")))
        assert rows[0]["task"] == "hist"

    def test_no_compress_is_longer(self, workdir, train_dir, extract_dir):
        out = workdir / "ex_full"
        assert run("extract", "--checkpoint", train_dir / "best.pt", "--no-compress", "--out", out) == 0
        full = (out / "program.py").read_text().count("\n")
        assert full >= (extract_dir / "program.py").read_text().count("\n")

    def test_pseudo(self, tmp_path, train_dir):
        assert run("extract", "--checkpoint", train_dir / "best.pt", "--dialect", "pseudo", "--out", tmp_path) == 0
        assert (tmp_path / "program.txt").read_text().startswith("predicate ")

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint")
        assert run("extract", "--checkpoint", bad, "--out", tmp_path / "o") == 2
        assert "checkpoint" in capsys.readouterr().err


class TestVerify:
    def test_matched(self, tmp_path, train_dir, extract_dir, data_dir):
        code = run("verify", "--checkpoint", train_dir / "best.pt", "--program", extract_dir / "program.tp.json",
                   "--data", data_dir, "--out", tmp_path)
        assert code == 0
        assert json.loads((tmp_path / "equivalence.json").read_text())["match_rate"] == 1.0

    def test_mutated(self, tmp_path, train_dir, extract_dir, data_dir, capsys):
        from dataclasses import replace

        p = ir.load_program(extract_dir / "program.tp.json")
        # flip the classifier so every prediction changes
        weights = {n: tuple(tuple(-w for w in row) for row in rows) for n, rows in p.classifier.weights.items()}
        bad = p.replace(classifier=replace(p.classifier, weights=weights))
        model, _ = load_checkpoint(train_dir / "best.pt")
        assert not verify_equivalence(model, bad, Dataset.load(data_dir).test).passed
        ir.save_program(bad, tmp_path / "bad.tp.json")
        code = run("verify", "--checkpoint", train_dir / "best.pt", "--program", tmp_path / "bad.tp.json",
                   "--data", data_dir, "--out", tmp_path / "v")
        assert code == 1
        assert "first mismatch: example" in capsys.readouterr().out

    def test_missing_file(self, tmp_path, train_dir, data_dir):
        code = run("verify", "--checkpoint", train_dir / "best.pt", "--program", tmp_path / "none.json",
                   "--data", data_dir, "--out", tmp_path)
        assert code == 2


class TestEval:
    def test_metric_and_gate(self, tmp_path, extract_dir, data_dir, train_dir):
        prog = extract_dir / "program.tp.json"
        assert run("eval", "--program", prog, "--data", data_dir, "--out", tmp_path) == 0
        report = json.loads((tmp_path / "eval.json").read_text())
        ledger = json.loads((train_dir / "ledger.jsonl").read_text().splitlines()[-1])
        assert report["value"] == ledger["test"]
        assert sum(r["total"] for r in report["per_class"]) > 0
        assert run("eval", "--program", prog, "--data", data_dir, "--min", 1.01, "--out", tmp_path / "g") == 1


class TestReport:
    def test_table(self, tmp_path, train_dir):
        assert run("report", train_dir, "--weights", "--out", tmp_path) == 0
        rows = list(csv.reader(open(tmp_path / "table.csv")))
        assert rows[0] == ["Dataset", "k", "L", "H", "M", "Acc"]
        assert rows[1][0] == "Histogram" and rows[1][2:5] == ["1", "2", "2"]
        weights = list(tmp_path.glob("weights_hist_seed*.csv"))
        assert weights and next(csv.reader(open(weights[0]))) == ["variable", "value", "class", "weight"]

    def test_empty_ledger(self, tmp_path):
        (tmp_path / "ledger.jsonl").write_text("")
        assert run("report", tmp_path / "ledger.jsonl", "--out", tmp_path / "r") == 0
        assert (tmp_path / "r" / "table.csv").read_text().splitlines() == ["Dataset,k,L,H,M,Acc"]


def test_stats(tmp_path, extract_dir):
    assert run("stats", extract_dir / "program.tp.json", "--names", "hist", "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "stats.csv")))
    assert rows[0]["task"] == "hist" and int(rows[0]["lines_full"]) >= int(rows[0]["lines_pruned"])


def test_version(capsys):
    assert run("--version") == 0
    assert "tprog" in capsys.readouterr().out
