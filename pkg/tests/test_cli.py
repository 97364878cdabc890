"""End-to-end command tests against the toy workspace and scripted backends."""

from __future__ import annotations

import json
import os
import shutil

import jsonschema
import pytest

from selfask.cli import main
from selfask.conversation import parse_sample_record, validate_structure
from selfask.jsonio import read_jsonl
from selfask.mockllm import MockBackend, MockServer
from selfask.toydata import make_toy_workspace
from tests.conftest import fixture_path

SCHEMAS = os.path.join(os.path.dirname(__file__), "..", "src", "selfask", "schemas")


def load_schema(name: str) -> dict:
    with open(os.path.join(SCHEMAS, name), encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture
def workspace(tmp_path):
    return make_toy_workspace(str(tmp_path / "ws"))


def run_cli(*argv: str) -> int:
    return main(list(argv))


def out_file(workspace, name: str) -> str:
    return os.path.join(os.path.dirname(workspace["config"]), "out", name)


# --- generate ----------------------------------------------------------------------


def test_generate_toy_corpus(workspace):
    code = run_cli("--config", workspace["config"], "generate", "--corpus", workspace["corpus"])
    assert code == 0
    records = read_jsonl(out_file(workspace, "dataset.jsonl"))
    assert len(records) == 5
    for record in records:
        sample = parse_sample_record(record)
        assert validate_structure(sample.conversation, sample.activity_label) == []
    stats = json.load(open(out_file(workspace, "stats.json")))
    assert stats["n_samples"] == 5
    assert stats["n_qa_pairs"] == 25  # five questions per toy annotation
    manifest = json.load(open(out_file(workspace, "manifest_generate.json")))
    assert manifest["backend"]["model"] == "scripted-1"
    assert manifest["request_digests"]
    assert manifest["seeds"]["run"] == 0


def test_generate_with_split(workspace):
    code = run_cli(
        "--config",
        workspace["config"],
        "generate",
        "--corpus",
        workspace["corpus"],
        "--train-count",
        "3",
        "--test-count",
        "2",
    )
    assert code == 0
    records = read_jsonl(out_file(workspace, "dataset.jsonl"))
    splits = [r["split"] for r in records]
    assert splits.count("train") == 3 and splits.count("test") == 2


def test_generate_empty_corpus(workspace, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    code = run_cli("--config", workspace["config"], "generate", "--corpus", str(empty))
    assert code == 0
    assert read_jsonl(out_file(workspace, "dataset.jsonl")) == []
    stats = json.load(open(out_file(workspace, "stats.json")))
    assert stats == {"n_samples": 0, "n_qa_pairs": 0, "qa_per_sample_mean": 0.0}


def test_generate_unreachable_backend_exits_fatal(workspace, tmp_path):
    config = json.load(open(workspace["config"]))
    config["backends"]["mock"] = {
        "endpoint": "http://127.0.0.1:9",  # discard port, nothing listens
        "model": "m",
        "retry_budget": 0,
        "backoff_base": 0.01,
        "timeout": 0.2,
    }
    bad_config = tmp_path / "bad.json"
    bad_config.write_text(json.dumps(config), encoding="utf-8")
    code = run_cli("--config", str(bad_config), "generate", "--corpus", workspace["corpus"])
    assert code == 1
    out_dir = tmp_path / "out"  # out paths anchor to the config file's directory
    dataset_path = out_dir / "dataset.jsonl"
    # the dataset file is either absent or complete (atomic write), never half-written
    if dataset_path.exists():
        for record in read_jsonl(dataset_path):
            parse_sample_record(record)
    assert not any(name.startswith(".tmp-") for name in os.listdir(out_dir))
    rejected = read_jsonl(out_dir / "rejected.jsonl")
    assert rejected and all("TransportError" in r["reason"] for r in rejected)


# --- infer -------------------------------------------------------------------------


def infer_config(tmp_path, script_fixture: str, out_name: str = "out") -> str:
    root = tmp_path / "infer-ws"
    root.mkdir(exist_ok=True)
    shutil.copy(fixture_path(script_fixture), root / "script.json")
    config = {
        "default_backend": "mock",
        "seed": 0,
        "out": str(root / out_name),
        "backends": {"mock": {"endpoint": "mock:script.json", "model": "scripted-1"}},
    }
    path = root / "config.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return str(path)


def test_infer_single_image_three_turn(tmp_path):
    config = infer_config(tmp_path, "script_sedan_three_turn.json")
    code = run_cli(
        "--config", config, "infer", "--image", "images/sedan-0001.jpg", "--id", "sedan-0001"
    )
    assert code == 0
    out_dir = json.load(open(config))["out"]
    results = read_jsonl(os.path.join(out_dir, "results.jsonl"))
    assert len(results) == 1
    record = results[0]
    assert record["mode"] == "three_turn_main_question"
    assert len(record["questions"]) == 6
    assert record["qa"][1]["answer"] == "The person is getting out of a black sedan."
    assert record["final_answer"].startswith("In the image, a person is getting out")
    expected = open(fixture_path("transcript_sedan_three_turn.jsonl"), encoding="utf-8").read().strip()
    assert json.dumps(record["transcript"], ensure_ascii=False, sort_keys=True, separators=(",", ":")) == expected


def test_infer_one_turn_empty_questions(tmp_path):
    config = infer_config(tmp_path, "script_sedan_one_turn.json")
    code = run_cli("--config", config, "infer", "--image", "x.jpg", "--mode", "1turn")
    assert code == 0
    out_dir = json.load(open(config))["out"]
    record = read_jsonl(os.path.join(out_dir, "results.jsonl"))[0]
    assert record["questions"] == []
    assert record["qa"] == []
    assert record["final_answer"].startswith("In the image, a person is walking")


def test_infer_warm_cache_rerun_is_identical_with_zero_transport(tmp_path):
    config_path = infer_config(tmp_path, "script_sedan_three_turn.json")
    root = os.path.dirname(config_path)
    config = json.load(open(config_path))
    config["cache"] = os.path.join(root, "cache.jsonl")
    open(config_path, "w", encoding="utf-8").write(json.dumps(config))

    assert run_cli("--config", config_path, "infer", "--image", "a.jpg", "--id", "it-1") == 0
    results_path = os.path.join(config["out"], "results.jsonl")
    manifest_path = os.path.join(config["out"], "manifest_infer.json")
    first_results = open(results_path, "rb").read()
    first_manifest = open(manifest_path, "rb").read()
    cache_size = os.path.getsize(os.path.join(root, "cache.jsonl"))

    # sabotage the script: any transport call would now produce different text
    open(os.path.join(root, "script.json"), "w", encoding="utf-8").write(
        json.dumps({"default": "WRONG ANSWER", "entries": []})
    )
    assert run_cli("--config", config_path, "infer", "--image", "a.jpg", "--id", "it-1") == 0
    assert open(results_path, "rb").read() == first_results
    assert open(manifest_path, "rb").read() == first_manifest
    assert os.path.getsize(os.path.join(root, "cache.jsonl")) == cache_size


def test_infer_testset_runs_all_items(workspace):
    assert run_cli("--config", workspace["config"], "generate", "--corpus", workspace["corpus"]) == 0
    code = run_cli(
        "--config",
        workspace["config"],
        "infer",
        "--testset",
        out_file(workspace, "dataset.jsonl"),
    )
    assert code == 0
    results = read_jsonl(out_file(workspace, "results.jsonl"))
    assert [r["id"] for r in results] == [f"toy-00{i}" for i in range(1, 6)]


def test_infer_partial_failure_exit_code(tmp_path):
    # script answers the self-ask stage with prose for one item id marker
    root = tmp_path / "pf"
    root.mkdir()
    entries = [
        {"match": {"contains": "bad-item"}, "reply": "no questions for you"},
        {"match": {"contains": "formulate"}, "reply": "Q0. ok?\nQ1. fine?"},
        {"match": {"contains": "answer all"}, "reply": "yes\nsure"},
        {"match": {"contains": "Use detailed"}, "reply": "a description"},
    ]
    (root / "script.json").write_text(json.dumps(entries), encoding="utf-8")
    config = {
        "default_backend": "mock",
        "seed": 0,
        "out": str(root / "out"),
        "backends": {"mock": {"endpoint": "mock:script.json", "model": "m"}},
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")
    testset = root / "testset.jsonl"
    lines = []
    lines.append(
        json.dumps(
            {
                "id": "good-item",
                "image": "a.jpg",
                "conversations": [
                    {"from": "human", "value": "<image> hi"},
                    {"from": "gpt", "value": "hello"},
                ],
            }
        )
    )
    lines.append(
        json.dumps(
            {
                "id": "bad-item",
                "image": "b.jpg",
                "main_question": "bad-item trigger",
                "conversations": [
                    {"from": "human", "value": "<image> hi"},
                    {"from": "gpt", "value": "hello"},
                ],
            }
        )
    )
    testset.write_text("\n".join(lines) + "\n", encoding="utf-8")
    code = run_cli("--config", str(config_path), "infer", "--testset", str(testset))
    assert code == 2
    manifest = json.load(open(root / "out" / "manifest_infer.json"))
    assert manifest["n_ok"] == 1
    assert manifest["errors"][0]["id"] == "bad-item"


# --- eval-capqa ----------------------------------------------------------------------


def prepared_eval_workspace(workspace):
    assert run_cli("--config", workspace["config"], "generate", "--corpus", workspace["corpus"]) == 0
    dataset = out_file(workspace, "dataset.jsonl")
    assert run_cli("--config", workspace["config"], "infer", "--testset", dataset) == 0
    return dataset, out_file(workspace, "results.jsonl")


def test_eval_capqa_hals_report(workspace):
    dataset, results = prepared_eval_workspace(workspace)
    code = run_cli(
        "--config",
        workspace["config"],
        "eval-capqa",
        "--testset",
        dataset,
        "--outputs",
        results,
        "--metric",
        "hals",
    )
    assert code == 0
    summary = json.load(open(out_file(workspace, "capqa_hals_summary.json")))
    assert summary["avg"] == pytest.approx(75.0)  # scripted judge replies "8 6"
    assert summary["repeats"] == 3
    jsonschema.validate(summary, load_schema("capqa_summary.schema.json"))
    verdicts = read_jsonl(out_file(workspace, "capqa_hals_run0.jsonl"))
    assert len(verdicts) == 5


def test_eval_capqa_qqs_report(workspace):
    dataset, results = prepared_eval_workspace(workspace)
    code = run_cli(
        "--config",
        workspace["config"],
        "eval-capqa",
        "--testset",
        dataset,
        "--outputs",
        results,
        "--metric",
        "qqs",
        "--repeats",
        "1",
    )
    assert code == 0
    summary = json.load(open(out_file(workspace, "capqa_qqs_summary.json")))
    assert summary["avg"] == pytest.approx(75.0)  # scripted judge replies "4 3"
    jsonschema.validate(summary, load_schema("capqa_summary.schema.json"))


def test_eval_capqa_missing_output_is_fatal(workspace, tmp_path):
    dataset, results = prepared_eval_workspace(workspace)
    truncated = tmp_path / "partial.jsonl"
    lines = open(results, encoding="utf-8").read().strip().split("\n")[:-1]
    truncated.write_text("\n".join(lines) + "\n", encoding="utf-8")
    code = run_cli(
        "--config",
        workspace["config"],
        "eval-capqa",
        "--testset",
        dataset,
        "--outputs",
        str(truncated),
        "--metric",
        "hals",
    )
    assert code == 1


def test_eval_capqa_half_score_judge_reports_50(workspace, tmp_path):
    dataset, results = prepared_eval_workspace(workspace)
    root = os.path.dirname(workspace["config"])
    script = json.load(open(workspace["script"]))
    script[0] = {"match": {"contains": "based on the hallucination"}, "reply": "8 4\nHalf."}
    judge_script = os.path.join(root, "judge_script.json")
    open(judge_script, "w", encoding="utf-8").write(json.dumps(script))
    config = json.load(open(workspace["config"]))
    config["backends"]["mock"]["endpoint"] = "mock:judge_script.json"
    config_path = os.path.join(root, "judge_config.json")
    open(config_path, "w", encoding="utf-8").write(json.dumps(config))
    code = run_cli(
        "--config", config_path, "eval-capqa",
        "--testset", dataset, "--outputs", results, "--metric", "hals", "--repeats", "1",
    )
    assert code == 0
    summary = json.load(open(out_file(workspace, "capqa_hals_summary.json")))
    assert summary["avg"] == pytest.approx(50.0)


# --- eval-pope -------------------------------------------------------------------------


def test_eval_pope_echo_run_scores_perfectly(workspace):
    from selfask.pope import ObjectAnnotations, build_pope_set

    ann = ObjectAnnotations.load(workspace["pope_annotations"])
    items = build_pope_set(ann, "popular", k_pos=3, k_neg=3, seed=0)
    entries = [
        {"match": {"call_index": i}, "reply": "Yes." if item.label == "yes" else "No."}
        for i, item in enumerate(items)
    ]
    root = os.path.dirname(workspace["config"])
    open(os.path.join(root, "echo_script.json"), "w", encoding="utf-8").write(json.dumps(entries))
    config = json.load(open(workspace["config"]))
    config["backends"]["mock"]["endpoint"] = "mock:echo_script.json"
    config_path = os.path.join(root, "echo_config.json")
    open(config_path, "w", encoding="utf-8").write(json.dumps(config))
    code = run_cli(
        "--config", config_path, "--concurrency", "1", "eval-pope",
        "--annotations", workspace["pope_annotations"], "--setting", "popular",
    )
    assert code == 0
    summary = json.load(open(out_file(workspace, "pope_summary.json")))
    for metric in ("accuracy", "precision", "recall", "f1"):
        assert summary["metrics"][metric] == pytest.approx(1.0)


def test_eval_pope_report(workspace):
    code = run_cli(
        "--config",
        workspace["config"],
        "eval-pope",
        "--annotations",
        workspace["pope_annotations"],
        "--setting",
        "adversarial",
    )
    assert code == 0
    summary = json.load(open(out_file(workspace, "pope_summary.json")))
    jsonschema.validate(summary, load_schema("pope_summary.schema.json"))
    # the toy script always answers yes
    assert summary["metrics"]["recall"] == pytest.approx(1.0)
    assert summary["metrics"]["accuracy"] == pytest.approx(0.5)
    assert summary["metrics"]["yes_rate"] == pytest.approx(1.0)
    items = read_jsonl(out_file(workspace, "pope_items.jsonl"))
    assert len(items) == 30  # 5 images x (3 + 3)
    assert summary["n_items"] == 30


# --- export / stats -----------------------------------------------------------------------


def test_export_augment_and_filter(workspace):
    assert run_cli(
        "--config",
        workspace["config"],
        "generate",
        "--corpus",
        workspace["corpus"],
        "--train-count",
        "3",
        "--test-count",
        "2",
    ) == 0
    dataset = out_file(workspace, "dataset.jsonl")
    code = run_cli(
        "--config",
        workspace["config"],
        "export",
        "--dataset",
        dataset,
        "--split",
        "train",
        "--augment",
    )
    assert code == 0
    exported = read_jsonl(out_file(workspace, "export.jsonl"))
    assert len(exported) == 3
    for record in exported:
        sample = parse_sample_record(record)
        assert validate_structure(sample.conversation, sample.activity_label) == []


def test_stats_command(workspace):
    assert run_cli("--config", workspace["config"], "generate", "--corpus", workspace["corpus"]) == 0
    code = run_cli(
        "--config", workspace["config"], "stats", "--dataset", out_file(workspace, "dataset.jsonl")
    )
    assert code == 0
    stats = json.load(open(out_file(workspace, "stats.json")))
    assert stats["n_samples"] == 5


# --- served mock equivalence ------------------------------------------------------------


def test_infer_against_served_mock_matches_in_process(tmp_path):
    config_path = infer_config(tmp_path, "script_sedan_three_turn.json", out_name="out_local")
    assert run_cli("--config", config_path, "infer", "--image", "a.jpg", "--id", "x") == 0
    root = os.path.dirname(config_path)
    local = read_jsonl(os.path.join(root, "out_local", "results.jsonl"))

    backend = MockBackend.load(fixture_path("script_sedan_three_turn.json"))
    with MockServer(backend) as server:
        config = {
            "default_backend": "served",
            "seed": 0,
            "out": os.path.join(root, "out_served"),
            "backends": {"served": {"endpoint": server.endpoint, "model": "scripted-1"}},
        }
        served_config = os.path.join(root, "config_served.json")
        open(served_config, "w", encoding="utf-8").write(json.dumps(config))
        assert run_cli("--config", served_config, "infer", "--image", "a.jpg", "--id", "x") == 0
    served = read_jsonl(os.path.join(root, "out_served", "results.jsonl"))

    def strip_digests(records):
        return [{k: v for k, v in r.items() if k != "request_digests"} for r in records]

    # request digests embed the backend identity; everything else must agree
    assert strip_digests(served) == strip_digests(local)


def test_mock_serve_port_in_use_is_fatal():
    with MockServer(MockBackend.from_script([])) as server:
        code = run_cli(
            "mock-serve", "--script", fixture_path("script_sedan_one_turn.json"),
            "--port", str(server.port),
        )
    assert code == 1


def test_cli_requires_config():
    assert run_cli("infer", "--image", "x.jpg") == 1


def test_cli_unknown_backend_is_fatal(workspace):
    code = run_cli(
        "--config",
        workspace["config"],
        "--backend",
        "nope",
        "infer",
        "--image",
        "x.jpg",
    )
    assert code == 1
