import json

import pytest
import yaml

from edurank.checkpoint import load_checkpoint
from edurank.cli import main
from edurank.pipeline import EXIT_INPUT, EXIT_MISMATCH, few_shot_subset, PipelineError

SMALL = {
    "seed": 3,
    "data": {"synthetic": {"train": 6, "validation": 2, "test": 2, "seed": 5, "n_docs": 3, "edus_per_doc": 12}},
    "labels": {"k_q": 6, "k_f": 6},
    "training": {"learning_rate": 0.01, "batch_size": 2, "epochs": 2, "k": 4},
    "truncation": {"budget": 120},
}


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture
def config(tmp_path):
    return write_config(tmp_path / "cfg.yaml", {**SMALL, "out": str(tmp_path / "run")})


def test_full_run(tmp_path, config, capsys):
    out = tmp_path / "run"
    for cmd in ("prepare", "train", "retrieve", "evaluate"):
        assert main([cmd, "--config", config]) == 0, cmd
    for rel in ("effective_config.yaml", "prepared/train.labels.jsonl", "prepared/test.segmented.jsonl",
                "train/checkpoint_best.zip", "train/checkpoint_last.zip", "retrieve/full/plans.jsonl",
                "retrieve/full/inputs.jsonl", "evaluate/report.json"):
        assert (out / rel).exists(), rel
    plans = [json.loads(l) for l in (out / "retrieve/full/plans.jsonl").read_text().splitlines()]
    assert len(plans) == 2 and all(p["used_tokens"] <= 120 for p in plans)
    report = json.loads((out / "evaluate/report.json").read_text())
    assert set(report["methods"]) == {"model", "bm25+rake", "bm25+gold"}
    assert set(report["ablations"]) == {"full", "no_rank", "no_filter", "no_both", "even"}
    assert len((out / "train/training_log.jsonl").read_text().splitlines()) == 2


def test_flags_override_config(tmp_path, config):
    assert main(["prepare", "--config", config]) == 0
    assert main(["train", "--config", config]) == 0
    assert main(["retrieve", "--config", config, "--variant", "even", "--budget", "90"]) == 0
    plans = [json.loads(l) for l in (tmp_path / "run/retrieve/even/plans.jsonl").read_text().splitlines()]
    assert all(p["variant"] == "even" and p["used_tokens"] <= 90 for p in plans)


def test_missing_corpus_exit_code(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {"out": str(tmp_path / "o"), "data": {"train": str(tmp_path / "nope.jsonl")}})
    assert main(["prepare", "--config", cfg]) == EXIT_INPUT


def test_malformed_corpus_exit_code_writes_nothing(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"docs": ["a b c."], "summary": "a"}\n{broken\n')
    cfg = write_config(tmp_path / "c.yaml", {"out": str(tmp_path / "o"), "data": {"train": str(tmp_path / "bad.jsonl")}})
    assert main(["prepare", "--config", cfg]) == EXIT_INPUT
    assert not (tmp_path / "o" / "prepared").exists()


def test_unknown_config_key(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {"modle": {}})
    assert main(["prepare", "--config", cfg]) == EXIT_INPUT


def test_train_before_prepare(tmp_path, config):
    assert main(["train", "--config", config]) == EXIT_INPUT


def test_checkpoint_mismatch_exit_code(tmp_path, config):
    assert main(["prepare", "--config", config]) == 0
    assert main(["train", "--config", config]) == 0
    other = write_config(tmp_path / "other.yaml", {**SMALL, "out": str(tmp_path / "run"), "chunk_size": 512})
    assert main(["evaluate", "--config", other]) == EXIT_MISMATCH


def test_resume_matches_uninterrupted_run(tmp_path):
    def run(name, epochs, resume=None):
        cfg = {**SMALL, "out": str(tmp_path / name), "training": {**SMALL["training"], "epochs": epochs}}
        path = write_config(tmp_path / f"{name}-{epochs}.yaml", cfg)
        if resume is None:
            assert main(["prepare", "--config", path]) == 0
        args = ["train", "--config", path] + (["--resume", resume] if resume else [])
        assert main(args) == 0
        return tmp_path / name / "train"

    straight = run("a", 4)
    half = run("b", 2)
    resumed = run("b", 4, str(half / "checkpoint_last.zip"))
    a, b = load_checkpoint(straight / "checkpoint_last.zip"), load_checkpoint(resumed / "checkpoint_last.zip")
    assert a.epoch == b.epoch == 4
    assert all((a.params[k] == b.params[k]).all() for k in a.params)


def test_zero_epochs_saves_initial_model(tmp_path):
    cfg = {**SMALL, "out": str(tmp_path / "z"), "training": {**SMALL["training"], "epochs": 0}}
    path = write_config(tmp_path / "z.yaml", cfg)
    assert main(["prepare", "--config", path]) == 0 and main(["train", "--config", path]) == 0
    best = load_checkpoint(tmp_path / "z/train/checkpoint_best.zip")
    assert best.epoch == 0


def test_few_shot_subset():
    picked = few_shot_subset(20, 0.25, seed=1)
    assert len(picked) == 5 and picked == sorted(picked) and picked == few_shot_subset(20, 0.25, seed=1)
    with pytest.raises(PipelineError):
        few_shot_subset(20, 0.0, seed=1)


def test_summarizer_hook(tmp_path, config):
    assert main(["prepare", "--config", config]) == 0
    assert main(["train", "--config", config]) == 0
    cfg = {**SMALL, "out": str(tmp_path / "run"), "truncation": {"budget": 120, "summarizer_command": "head -c 20"}}
    path = write_config(tmp_path / "s.yaml", cfg)
    assert main(["retrieve", "--config", path]) == 0
    rows = [json.loads(l) for l in (tmp_path / "run/retrieve/full/summaries.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and all(0 < len(r["summary"]) <= 20 for r in rows)
