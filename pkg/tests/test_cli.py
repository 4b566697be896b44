import io
import json
import logging

import pandas as pd
import pytest
import yaml

from app.commands import run as run_command
from app.main import build_parser, main
from app.models.schemas import AppLabel, Judgment, Split
from app.services.artifacts import ArtifactStore, read_records, write_records
from app.services.policy import PolicyCheckpoint
from app.services.ranking import write_judgments
from config.experiment import load_experiment
from tests.conftest import TEXTS, make_record


def judgment(winner, loser, annotator="a1", set_id="s1"):
    return Judgment(set_id=set_id, left_id=winner, right_id=loser, annotator_id=annotator, winner_id=winner)


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_rank_plan_prints_pairs(capsys, tmp_path):
    assert main(["rank", "plan", "--k", "6", "--lambda", "3", "--sets", "2", "--out", str(tmp_path / "plan.csv")]) == 0
    assert capsys.readouterr().out.splitlines() == ["1\t4", "2\t5", "3\t6"]
    assert len(pd.read_csv(tmp_path / "plan.csv")) == 6


def test_domain_errors_exit_with_status_one():
    assert main(["rank", "plan", "--k", "1"]) == 1


def test_rank_aggregate_and_relative_report(tmp_path, capsys):
    judgments = [
        judgment("s1:A", "s1:B"),
        judgment("s1:A", "s1:B", "a2"),
        judgment("s2:B", "s2:A", set_id="s2"),
    ]
    write_judgments(judgments, tmp_path / "judgments.csv")
    assert main(["rank", "aggregate", "--judgments", str(tmp_path / "judgments.csv"), "--out", str(tmp_path / "ranks.csv")]) == 0
    ranks = pd.read_csv(tmp_path / "ranks.csv")
    assert ranks.loc[ranks["set_id"] == "s1", "rewrite_id"].tolist() == ["s1:A", "s1:B"]

    args = ["rank", "report", "--style", "table3b", "--judgments", str(tmp_path / "judgments.csv")]
    assert main(args + ["--out", str(tmp_path / "report.tsv")]) == 0
    report = pd.read_csv(tmp_path / "report.tsv", sep="\t")
    assert sorted(report["System"]) == ["A", "B"]
    assert main(["rank", "report", "--style", "absolute"]) == 1


def test_absolute_report_rejects_out_of_range_ratings(tmp_path):
    ratings = tmp_path / "ratings.csv"
    ratings.write_text("set_id,system,annotator_id,criterion,score\ns1,A,a1,Appropriateness,4\ns1,B,a1,Appropriateness,7\n", encoding="utf-8")
    assert main(["rank", "report", "--style", "table3a", "--ratings", str(ratings)]) == 1


def test_eval_run_with_descriptor_files(tmp_path, classifier, language_model):
    store = ArtifactStore(tmp_path)
    store.save_descriptor(classifier.descriptor(), "classifier.json")
    store.save_descriptor(language_model.descriptor(), "lm.json")
    (tmp_path / "pairs.tsv").write_text("original\trewrite\nthe stupid plan .\tthe plan .\n", encoding="utf-8")
    args = ["eval", "run", "--pairs", str(tmp_path / "pairs.tsv"), "--classifier", str(tmp_path / "classifier.json")]
    args += ["--lm", str(tmp_path / "lm.json"), "--system", "manual", "--out", str(tmp_path / "report.tsv")]
    assert main(args) == 0
    report = pd.read_csv(tmp_path / "report.tsv", sep="\t")
    assert report["System"].tolist() == ["manual"]

    with open(tmp_path / "lm.json", "a", encoding="utf-8") as handle:
        handle.write(" ")
    assert main(args) == 1


def test_corpus_filter_drops_short_arguments(tmp_path, records):
    short = make_record(99, "too short to keep .")
    write_records(records + [short], tmp_path / "raw.jsonl")
    assert main(["corpus", "filter", "--in", str(tmp_path / "raw.jsonl"), "--out", str(tmp_path / "kept.jsonl")]) == 0
    kept = read_records(tmp_path / "kept.jsonl")
    assert [r.id for r in kept] == [r.id for r in records]
    assert ArtifactStore(tmp_path).verify("kept.jsonl").exists()


def test_exemplar_embed_and_select(tmp_path, capsys):
    rows = [
        {"id": "a", "text": "city buses run late", "scores": {"Unclear Meaning": 1.0}},
        {"id": "b", "text": "city buses are crowded", "scores": {"Unclear Meaning": 1.0}},
        {"id": "c", "text": "late buses frustrate the city", "scores": {"Unclear Meaning": 0.0}},
    ]
    (tmp_path / "args.jsonl").write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    embeddings = str(tmp_path / "embeddings.jsonl")
    assert main(["exemplar", "embed", "--in", str(tmp_path / "args.jsonl"), "--features", "256", "--out", embeddings]) == 0
    assert main(["exemplar", "select", "--embeddings", embeddings, "--dim", "Unclear Meaning", "--damping", "0.85"]) == 0
    assert capsys.readouterr().out.strip() in {"a", "b"}


def test_exemplar_select_reads_default_embeddings(tmp_path, capsys, monkeypatch):
    rows = [
        {"id": "a", "text": "city buses run late", "scores": {"Unclear Meaning": 1.0}},
        {"id": "b", "text": "city buses are crowded", "scores": {"Unclear Meaning": 1.0}},
        {"id": "c", "text": "late buses frustrate the city", "scores": {"Unclear Meaning": 0.0}},
    ]
    (tmp_path / "args.jsonl").write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    monkeypatch.chdir(tmp_path)
    assert main(["exemplar", "embed", "--in", "args.jsonl"]) == 0
    assert main(["exemplar", "select", "--dim", "Unclear Meaning", "--damping", "0.85"]) == 0
    assert capsys.readouterr().out.strip() in {"a", "b"}


def test_run_loads_the_preset(monkeypatch, tmp_path):
    seen = {}

    def fake_run_pipeline(config, output_directory):
        seen.update(name=config.name, seed=config.seed, out=output_directory)
        return type("Manifest", (), {"config_hash": "0" * 64})()

    monkeypatch.setattr(run_command, "run_pipeline", fake_run_pipeline)
    assert main(["run", "--preset", "smoke", "--seed", "9", "--out", str(tmp_path)]) == 0
    assert seen == {"name": "smoke", "seed": 9, "out": str(tmp_path)}


@pytest.fixture
def staged_run(tmp_path, tiny_model, vocabulary, classifier, language_model):
    """Experiment file, split corpus, scorer descriptors and an initial policy, as earlier stages leave them."""
    store = ArtifactStore(tmp_path)
    store.save_descriptor(classifier.descriptor(), "classifier.json")
    store.save_descriptor(language_model.descriptor(), "lm.json")
    experiment = {
        "name": "cli",
        "seed": 3,
        "ppo": {"lr_start": 1e-3, "lr_end": 1e-4, "batch_size": 2, "epochs": 1, "total_steps": 1, "checkpoint_every": 1},
        "generation": {"max_new_tokens": 5},
        "prompt_mode": "zero_shot",
        "reward": {"alpha_sim": 0.0, "beta": 0.01, "app_scorer": "classifier.json", "fluency_scorer": "lm.json"},
    }
    (tmp_path / "experiment.yaml").write_text(yaml.safe_dump(experiment), encoding="utf-8")
    config_hash = load_experiment(tmp_path / "experiment.yaml").config_hash()
    texts = TEXTS[:3] + ["the stupid buses run late and the garbage schedule ignores everyone ."]
    splits = [Split.TRAIN, Split.TRAIN, Split.TRAIN, Split.VALIDATION]
    records = [
        make_record(i, text, app_score=0.1, app_label=AppLabel.INAPPROPRIATE, split=split)
        for i, (text, split) in enumerate(zip(texts, splits))
    ]
    store.save_records(records, "split.jsonl")
    checkpoint = PolicyCheckpoint.from_model(tiny_model, vocabulary, step=0, config_hash=config_hash)
    ArtifactStore(tmp_path, config_hash).save_checkpoint(checkpoint, "initial.pt")
    return tmp_path


def ppo_args(root):
    return [
        "ppo", "train", "--config", str(root / "experiment.yaml"), "--corpus", str(root / "split.jsonl"),
        "--init", str(root / "initial.pt"), "--out", str(root / "ppo"),
    ]


def test_ppo_train_takes_scorers_from_the_experiment_file(staged_run):
    assert main(ppo_args(staged_run)) == 0
    store = ArtifactStore(staged_run / "ppo")
    assert store.load_checkpoint("policy.pt").adapters is not None
    assert len(pd.read_csv(store.verify("ppo_log.csv"))) == 1


def test_ppo_train_rejects_a_tampered_initial_policy(staged_run, caplog):
    with open(staged_run / "initial.pt", "ab") as handle:
        handle.write(b"\0")
    with caplog.at_level(logging.ERROR):
        assert main(ppo_args(staged_run)) == 1
    assert "initial.pt changed after it was written" in caplog.text
    assert not (staged_run / "ppo" / "policy.pt").exists()


def test_ppo_train_rejects_a_policy_from_another_config(staged_run, tiny_model, vocabulary, caplog):
    other = load_experiment(preset="smoke").config_hash()
    checkpoint = PolicyCheckpoint.from_model(tiny_model, vocabulary, step=0, config_hash=other)
    ArtifactStore(staged_run, other).save_checkpoint(checkpoint, "initial.pt")
    with caplog.at_level(logging.ERROR):
        assert main(ppo_args(staged_run)) == 1
    assert "produced under config" in caplog.text


def test_policy_pretrain_seals_its_checkpoint(tmp_path, records, capsys, monkeypatch):
    write_records(records, tmp_path / "corpus.jsonl")
    out = tmp_path / "initial.pt"
    args = ["policy", "pretrain", "--preset", "smoke", "--corpus", str(tmp_path / "corpus.jsonl"), "--out", str(out)]
    assert main(args) == 0
    config_hash = load_experiment(preset="smoke").config_hash()
    assert ArtifactStore(tmp_path, config_hash).load_checkpoint("initial.pt").config_hash == config_hash
    assert main(["policy", "sample", "--ckpt", str(out), "--text", TEXTS[0], "--max-new-tokens", "4"]) == 0
    monkeypatch.setattr("sys.stdin", io.StringIO(TEXTS[1] + "\n\n" + TEXTS[2] + "\n"))
    capsys.readouterr()
    assert main(["policy", "sample", "--ckpt", str(out), "--prompt-mode", "instruction", "--seed", "3", "--max-new-tokens", "4"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2
