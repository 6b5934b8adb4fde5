import json
import subprocess
import sys

import pytest

from paramark.cli import main
from paramark.corpus import load_corpus
from paramark.metrics import RankCurve, read_report_csv


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth corpus -> codec -> prep, shared by the command tests."""
    ws = tmp_path_factory.mktemp("cli")
    assert run_cli("synth-corpus", "--out", ws / "corpus.jsonl", "--n-docs", 120, "--seed", 5) == 0
    assert run_cli(
        "train-codec", "--corpus", ws / "corpus.jsonl", "--mode", "bpe",
        "--vocab-size", 320, "--out", ws / "codec.json",
    ) == 0
    assert run_cli(
        "prep", "--corpus", ws / "corpus.jsonl", "--codec", ws / "codec.json",
        "--paratype", "eop-diy", "--max-tokens", 128, "--split", "0.7,0.15,0.15",
        "--seed", 1, "--out", ws / "data",
    ) == 0
    return ws


def test_synth_corpus_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run_cli("synth-corpus", "--out", a, "--n-docs", 30, "--seed", 9) == 0
    assert run_cli("synth-corpus", "--out", b, "--n-docs", 30, "--seed", 9) == 0
    assert a.read_text() == b.read_text()
    docs = load_corpus(a)
    assert len(docs) == 30
    assert all(3 <= len(d.paragraphs) <= 8 for d in docs)


def test_prep_outputs(workspace):
    data = workspace / "data"
    stats = json.loads((data / "stats.json").read_text())
    assert "train" in stats and stats["train"]["num_samples"] > 0
    train = load_corpus(data / "train.jsonl")
    valid = load_corpus(data / "valid.jsonl")
    test = load_corpus(data / "test.jsonl")
    assert len(train) + len(valid) + len(test) <= 120  # filtering may drop docs
    assert len({d.id for d in train + valid + test}) == len(train) + len(valid) + len(test)


def test_train_generate_eval_rank_curve(workspace):
    ws = workspace
    data = ws / "data"
    assert run_cli(
        "train", "--train", data / "train.jsonl", "--valid", data / "valid.jsonl",
        "--codec", ws / "codec.json", "--paratype", "eop-diy",
        "--layers", 1, "--heads", 2, "--d-model", 32, "--d-ff", 64, "--context", 128,
        "--steps", 10, "--batch-size", 8, "--eval-every", 5, "--seed", 2,
        "--out", ws / "model.ckpt",
    ) == 0
    assert (ws / "model.ckpt").read_bytes()[:5] == b"plmw1"

    assert run_cli(
        "generate", "--ckpt", ws / "model.ckpt", "--codec", ws / "codec.json",
        "--test", data / "test.jsonl", "--num", 4, "--max-new", 20,
        "--system", "eop-diy", "--seed", 3, "--out", ws / "gens.jsonl",
    ) == 0
    recs = [json.loads(l) for l in (ws / "gens.jsonl").read_text().splitlines()]
    assert len(recs) == 4

    assert run_cli(
        "eval", "--codec", ws / "codec.json", "--test", data / "test.jsonl",
        "--paratype", "eop-diy", "--ckpt", ws / "model.ckpt", "--gens", ws / "gens.jsonl",
        "--num-eval", 4, "--dump", ws / "logprobs.jsonl",
        "--out", ws / "report.json", "--csv", ws / "report.csv",
    ) == 0
    report = json.loads((ws / "report.json").read_text())
    assert report["paratype"] == "eop-diy"
    assert report["t_ppl"] >= 1.0
    (row,) = read_report_csv(ws / "report.csv")
    assert row.paratype == "eop-diy"

    # metric-only mode from the dump reproduces the scored report exactly
    assert run_cli(
        "eval", "--codec", ws / "codec.json", "--test", data / "test.jsonl",
        "--paratype", "eop-diy", "--logprobs", ws / "logprobs.jsonl",
        "--gens", ws / "gens.jsonl", "--out", ws / "report2.json",
    ) == 0
    assert json.loads((ws / "report2.json").read_text()) == report

    assert run_cli(
        "rank-curve", "--ckpt", ws / "model.ckpt", "--codec", ws / "codec.json",
        "--test", data / "test.jsonl", "--paratype", "eop-diy", "--num", 6,
        "--out", ws / "curve.csv",
    ) == 0
    curve = RankCurve.read_csv(ws / "curve.csv")
    assert sum(curve.counts.values()) > 0


def test_compare_five_paratypes(tmp_path):
    cfg = {
        "out_dir": str(tmp_path / "exp"),
        "seed": 1,
        "corpus": {"synth": {"n_docs": 70}},
        "codec": {"vocab_size": 300},
        "max_tokens": 128,
        "model": {"n_layers": 1, "n_heads": 2, "d_model": 32, "d_ff": 64, "context_len": 128},
        "train": {"total_steps": 8, "batch_size": 8, "warmup_steps": 2, "eval_every": 4},
        "gen": {"max_new_tokens": 16, "num_docs": 3},
        "eval": {"num_docs": 3},
    }
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps(cfg))
    assert run_cli("compare", "--config", cfg_path) == 0
    rows = read_report_csv(tmp_path / "exp" / "compare.csv")
    assert [r.paratype for r in rows] == ["none", "sep-nl", "sep-diy", "eop-nl", "eop-diy"]


def test_unknown_flag_fails(workspace, capsys):
    assert run_cli("eval", "--codec", workspace / "codec.json") != 0
    assert run_cli("generate", "--bogus-flag", "x") != 0


def test_missing_file_fails_with_stage_name(tmp_path, capsys):
    code = run_cli("train-codec", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "c.json")
    assert code == 1
    assert "train-codec" in capsys.readouterr().err


def test_study_report_offline(tmp_path):
    from fastapi.testclient import TestClient

    from paramark.service import StudyStore, create_app

    store_dir = tmp_path / "studies"
    client = TestClient(create_app(StudyStore(store_dir), admin_token="tok"))
    body = {
        "systems": ["a", "b"],
        "generations": {s: {f"s{i}": f"text {i}" for i in range(3)} for s in ("a", "b")},
        "sample_count": 3,
        "rater_ids": ["r1"],
        "seed": 0,
        "study_id": "st",
    }
    assert client.post("/studies", json=body, headers={"X-Admin-Token": "tok"}).status_code == 200
    task = client.get("/studies/st/tasks", params={"rater": "r1"}).json()
    client.post(
        "/studies/st/judgments",
        json={"task_id": task["task_id"], "rater_id": "r1", "metric": "fluency", "verdict": "left"},
    )
    out = tmp_path / "report.json"
    assert run_cli("study-report", "--store", store_dir, "--study", "st", "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["study_id"] == "st"
    assert report["judgments"] == 1


def test_module_entrypoint(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "paramark", "synth-corpus", "--out", str(tmp_path / "c.jsonl"),
         "--n-docs", "5", "--seed", "0"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "c.jsonl").exists()
