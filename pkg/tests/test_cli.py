"""End-to-end command line flow on a micro benchmark: generate, parse,
train, evaluate, predict, report."""

import json

import pytest

from ovarkit.cli import main
from ovarkit.data import read_jsonl

MICRO_TOML = """\
[synth]
n_det = 24
n_attr = 24
n_cap = 14
n_test = 12
captions_per_image = 2

[train]
max_captions = 10

[train.rpn]
kind = "sgd"
lr = 1e-2
epochs = 2
batch = 8

[train.step1]
kind = "adamw"
lr = 3e-3
epochs = 3
batch = 32

[train.step2]
kind = "adamw"
lr = 1e-4
epochs = 1
batch = 8

[train.ovarnet]
kind = "adamw"
lr = 1e-3
epochs = 1
batch = 4
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "micro.toml"
    cfg.write_text(MICRO_TOML)
    data = root / "bench"
    assert main(["gen-synth", "--out", str(data), "--seed", "0",
                 "--config", str(cfg)]) == 0
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--seed", "0", "--config", str(cfg)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run}


def test_gen_synth_refuses_overwrite(work, capsys):
    rc = main(["gen-synth", "--out", str(work["data"]), "--seed", "0",
               "--config", str(work["cfg"])])
    capsys.readouterr()
    assert rc == 2


def test_gen_synth_force_and_json(work, capsys):
    rc = main(["gen-synth", "--out", str(work["root"] / "bench2"), "--seed", "1",
               "--config", str(work["cfg"]), "--json"])
    out = capsys.readouterr().out
    assert rc == 0
    summary = json.loads(out)
    assert summary["n_train_instances"] > 0
    assert "dark blue" in summary["novel"]


def test_parse_captions_round_trip(work, capsys):
    out_file = work["root"] / "parses.jsonl"
    rc = main(["parse-captions", "--captions", str(work["data"] / "captions.jsonl"),
               "--vocab", str(work["data"] / "vocab.jsonl"),
               "--out", str(out_file), "--json"])
    payload = json.loads(capsys.readouterr().out)
    assert rc == 0
    assert payload["n_expected"] == payload["n_captions"] > 0
    assert payload["n_match"] == payload["n_expected"]
    rows = read_jsonl(out_file)
    assert len(rows) == payload["n_captions"]
    assert all(r["matches_expected"] for r in rows)


def test_parse_captions_flags_mismatch(work, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({
        "image_id": "x", "caption": "a red square",
        "expected": {"categories": ["circle"], "attributes": [],
                     "noun_phrases": []}}) + "\n")
    rc = main(["parse-captions", "--captions", str(bad),
               "--vocab", str(work["data"] / "vocab.jsonl"), "--json"])
    payload = json.loads(capsys.readouterr().out)
    assert rc == 1
    assert payload["n_match"] == 0


def test_train_refuses_overwrite(work, capsys):
    rc = main(["train", "--data", str(work["data"]), "--out", str(work["run"]),
               "--seed", "0", "--config", str(work["cfg"])])
    err = capsys.readouterr().err
    assert rc == 2
    assert "--force" in err


def test_train_run_layout(work):
    run = work["run"]
    for name in ("run.json", "teacher.npz", "student.npz", "losses.csv",
                 "report_teacher_box_given.json", "report_student_box_given.json"):
        assert (run / name).exists(), name
    meta = json.loads((run / "run.json").read_text())
    assert meta["seed"] == 0
    assert "fingerprint" in meta
    header = (run / "losses.csv").read_text().splitlines()[0]
    assert header == "stage,step,name,value"


def test_evaluate_saved_student(work, capsys):
    out = work["root"] / "eval.json"
    rc = main(["evaluate", "--data", str(work["data"]), "--run", str(work["run"]),
               "--model", "student", "--protocol", "box_free",
               "--out", str(out), "--json"])
    payload = json.loads(capsys.readouterr().out)
    assert rc == 0
    assert payload["protocol"] == "box_free"
    assert json.loads(out.read_text())["map_all"] == payload["map_all"]


def test_evaluate_teacher_rejects_box_free(work, capsys):
    rc = main(["evaluate", "--data", str(work["data"]), "--run", str(work["run"]),
               "--model", "teacher", "--protocol", "box_free"])
    err = capsys.readouterr().err
    assert rc == 2
    assert "box_given" in err


def test_evaluate_teacher_matches_train_report(work, capsys):
    rc = main(["evaluate", "--data", str(work["data"]), "--run", str(work["run"]),
               "--model", "teacher", "--json"])
    payload = json.loads(capsys.readouterr().out)
    assert rc == 0
    saved = json.loads((work["run"] / "report_teacher_box_given.json").read_text())
    assert payload["map_all"] == pytest.approx(saved["map_all"], abs=1e-12)


def test_predict_writes_scored_boxes(work, capsys):
    out = work["root"] / "preds.jsonl"
    rc = main(["predict", "--data", str(work["data"]), "--run", str(work["run"]),
               "--out", str(out), "--json"])
    payload = json.loads(capsys.readouterr().out)
    assert rc == 0
    rows = read_jsonl(out)
    head, body = rows[0], rows[1:]
    assert len(body) == payload["n_predictions"] > 0
    n_concepts = len(head["concepts"])
    for r in body[:5]:
        assert len(r["box"]) == 4
        assert len(r["scores"]) == n_concepts
        assert all(0.0 <= s <= 1.0 for s in r["scores"])


def test_report_pretty_and_json(work, capsys):
    path = work["run"] / "report_student_box_given.json"
    assert main(["report", "--report", str(path)]) == 0
    text = capsys.readouterr().out
    assert "protocol: box_given" in text
    assert "map_novel" in text
    assert main(["report", "--report", str(path), "--json"]) == 0
    again = json.loads(capsys.readouterr().out)
    assert again == json.loads(path.read_text())
