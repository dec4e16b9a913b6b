import dataclasses
import json
import os

import pytest

import golden_episode
from planqa.cli import ConfigError, build_parser, load_config, main
from planqa.planning import (
    SINGLE_HOP,
    Answer,
    Trajectory,
    trajectory_to_json_dict,
)
from planqa.synthesis import tool_response_spans

DOC = "\"Paris\" Paris is the capital and largest city of France."
EASY_ANSWER = " ".join(DOC.split()[:6])


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("PLANQA_"):
            monkeypatch.delenv(key)


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text(json.dumps({"id": "c1", "contents": DOC}) + "\n")
    return path


@pytest.fixture
def dataset(tmp_path):
    rows = [
        {"id": "s1", "question": "What is the capital of France?",
         "golden_answers": [EASY_ANSWER]},
        {"id": "s2", "question": "Name the river.", "golden_answers": ["Nile"]},
    ]
    path = tmp_path / "dataset.jsonl"
    path.write_text("".join(json.dumps(row) + "\n" for row in rows))
    return path


def _args(*argv):
    return build_parser().parse_args(list(argv))


def _golden_rows(tmp_path):
    trajectory = dataclasses.replace(
        golden_episode.run_golden_episode(), trajectory_id="t1"
    )
    traj_path = tmp_path / "traj.jsonl"
    traj_path.write_text(
        json.dumps(trajectory_to_json_dict(trajectory), ensure_ascii=False) + "\n"
    )
    annot_path = tmp_path / "annot.jsonl"
    annot_path.write_text(
        json.dumps({"id": "t1", "golden_answers": ["Lead"], "hop_count": 3,
                    "sub_answers": ["Lead", "Lead"]}) + "\n"
    )
    return traj_path, annot_path


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config(_args("run"))
        assert (cfg.k, cfg.m, cfg.top_k) == (3, 1, 5)
        assert cfg.lambda_ == 0.5 and cfg.resume is True

    def test_file_env_flag_precedence(self, tmp_path, monkeypatch):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"k": 5, "alpha": 0.25}))
        cfg = load_config(_args("run", "--config", str(config)))
        assert cfg.k == 5 and cfg.alpha == 0.25
        monkeypatch.setenv("PLANQA_K", "7")
        assert load_config(_args("run", "--config", str(config))).k == 7
        cfg = load_config(_args("run", "--config", str(config), "--k", "9"))
        assert cfg.k == 9 and cfg.alpha == 0.25

    def test_config_path_from_env(self, tmp_path, monkeypatch):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"top_k": 8}))
        monkeypatch.setenv("PLANQA_CONFIG", str(config))
        assert load_config(_args("run")).top_k == 8

    def test_unknown_file_key(self, tmp_path):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"zap": 1}))
        with pytest.raises(ConfigError, match="zap"):
            load_config(_args("run", "--config", str(config)))

    def test_bad_env_value(self, monkeypatch):
        monkeypatch.setenv("PLANQA_K", "three")
        with pytest.raises(ConfigError, match="PLANQA_K"):
            load_config(_args("run"))

    def test_bool_env_coercion(self, monkeypatch):
        monkeypatch.setenv("PLANQA_ALLOW_HIGH_LAMBDA", "true")
        assert load_config(_args("run")).allow_high_lambda is True
        monkeypatch.setenv("PLANQA_ALLOW_HIGH_LAMBDA", "maybe")
        with pytest.raises(ConfigError):
            load_config(_args("run"))

    def test_lambda_flag_maps_to_field(self):
        cfg = load_config(_args("run", "--lambda", "0.7", "--allow-high-lambda"))
        assert cfg.lambda_ == 0.7
        assert cfg.reward_config().lambda_ == 0.7

    def test_reward_config_guard_wrapped(self):
        cfg = load_config(_args("run", "--lambda", "0.7"))
        with pytest.raises(ConfigError):
            cfg.reward_config()

    def test_episode_config_guard_wrapped(self):
        cfg = load_config(_args("run", "--k", "0"))
        with pytest.raises(ConfigError):
            cfg.episode_config()

    def test_concurrency_guard(self):
        with pytest.raises(ConfigError, match="concurrency"):
            load_config(_args("run", "--concurrency", "0"))

    def test_no_resume_flag(self):
        assert load_config(_args("run", "--no-resume")).resume is False


class TestValidateCommand:
    def test_clean_file_passes(self, tmp_path, capsys):
        traj_path, _ = _golden_rows(tmp_path)
        assert main(["validate", str(traj_path)]) == 0
        assert "t1: PASS" in capsys.readouterr().out

    def test_constraint_violation_fails(self, tmp_path, capsys):
        bad = Trajectory("Q?", SINGLE_HOP, (Answer("a"), Answer("b")), "a", "dup")
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(trajectory_to_json_dict(bad)) + "\n")
        assert main(["validate", str(path)]) == 1
        out = capsys.readouterr().out
        assert "dup: FAIL [c1]" in out

    def test_unreadable_record_fails(self, tmp_path, capsys):
        path = tmp_path / "bad.jsonl"
        path.write_text("not json\n")
        assert main(["validate", str(path)]) == 1
        assert "unreadable record" in capsys.readouterr().out

    def test_missing_file_is_config_error(self, tmp_path, capsys):
        assert main(["validate", str(tmp_path / "nope.jsonl")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_empty_file_ok(self, tmp_path, capsys):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert main(["validate", str(path)]) == 0
        assert "no records found" in capsys.readouterr().err


class TestRunCommand:
    def test_mock_end_to_end(self, tmp_path, corpus, dataset, capsys):
        out = tmp_path / "out"
        code = main([
            "run", "--dataset", str(dataset),
            "--retriever", f"mem:{corpus}", "--out", str(out),
        ])
        assert code == 0
        rows = [json.loads(l) for l in (out / "trajectories.jsonl").read_text().splitlines()]
        assert [row["id"] for row in rows] == ["s1", "s2"]
        assert rows[0]["final_answer"] == EASY_ANSWER
        stdout = capsys.readouterr().out
        assert "run: wrote 2 trajectories" in stdout
        assert "em: 0.5000" in stdout

    def test_resume_skips_completed(self, tmp_path, corpus, dataset, capsys):
        out = tmp_path / "out"
        argv = ["run", "--dataset", str(dataset),
                "--retriever", f"mem:{corpus}", "--out", str(out)]
        assert main(argv) == 0
        capsys.readouterr()
        assert main(argv) == 0
        assert "2 already done" in capsys.readouterr().out
        assert len((out / "trajectories.jsonl").read_text().splitlines()) == 2

    def test_no_resume_refuses_overwrite(self, tmp_path, corpus, dataset, capsys):
        out = tmp_path / "out"
        argv = ["run", "--dataset", str(dataset),
                "--retriever", f"mem:{corpus}", "--out", str(out)]
        assert main(argv) == 0
        assert main(argv + ["--no-resume"]) == 2
        assert "refusing to touch existing output" in capsys.readouterr().err

    def test_missing_dataset_is_config_error(self, tmp_path, corpus, capsys):
        code = main(["run", "--retriever", f"mem:{corpus}", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "dataset" in capsys.readouterr().err

    def test_unknown_reasoner_spec(self, tmp_path, corpus, dataset, capsys):
        code = main([
            "run", "--dataset", str(dataset), "--retriever", f"mem:{corpus}",
            "--out", str(tmp_path / "o"), "--reasoner", "gpt",
        ])
        assert code == 2
        assert "unknown backend spec" in capsys.readouterr().err

    def test_unreachable_backend_exit_code(self, tmp_path, corpus, dataset, capsys):
        code = main([
            "run", "--dataset", str(dataset), "--retriever", f"mem:{corpus}",
            "--out", str(tmp_path / "o"), "--reasoner", "http:http://127.0.0.1:9",
        ])
        assert code == 3
        err = capsys.readouterr().err
        assert "FAILED s1" in err and "FAILED s2" in err


class TestRewardCommand:
    def test_scores_golden_trajectory(self, tmp_path, capsys):
        traj_path, annot_path = _golden_rows(tmp_path)
        out = tmp_path / "out"
        code = main([
            "reward", str(traj_path), str(annot_path),
            "--out", str(out), "--k", "2",
        ])
        assert code == 0
        rows = [json.loads(l) for l in (out / "rewards.jsonl").read_text().splitlines()]
        assert rows[0]["trajectory_id"] == "t1"
        assert rows[0]["r_total"] == pytest.approx(1.3)
        assert "mean r_total 1.3000" in capsys.readouterr().out

    def test_missing_annotations_is_config_error(self, tmp_path, capsys):
        traj_path, _ = _golden_rows(tmp_path)
        code = main([
            "reward", str(traj_path), str(tmp_path / "nope.jsonl"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 2


class TestEvalCommand:
    def test_metrics_with_judge_and_classifier(self, tmp_path, capsys):
        traj_path, annot_path = _golden_rows(tmp_path)
        wrong = Trajectory("What metal?", SINGLE_HOP, (Answer("Tin"),), "Tin", "t2")
        orphan = Trajectory("Who?", SINGLE_HOP, (Answer("x"),), "x", "t9")
        with open(traj_path, "a", encoding="utf-8") as handle:
            for t in (wrong, orphan):
                handle.write(json.dumps(trajectory_to_json_dict(t)) + "\n")
        with open(annot_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps({"id": "t2", "golden_answers": ["Lead"],
                                     "hop_count": 1}) + "\n")
        out = tmp_path / "out"
        code = main([
            "eval", str(traj_path), "--dataset", str(annot_path),
            "--out", str(out), "--judge", "mock", "--classify-errors",
        ])
        assert code == 0
        rows = [json.loads(l) for l in (out / "eval.jsonl").read_text().splitlines()]
        assert len(rows) == 2
        first, second = rows
        assert first["trajectory_id"] == "t1"
        assert first["em"] == 1 and first["lasj"] == 1
        assert first["error_type"] == "correct"
        assert (first["vrc"], first["irc"], first["trc"], first["sac"]) == (1, 2, 3, 1)
        assert first["first_vr"] is True
        assert second["em"] == 0 and second["lasj"] == 0
        assert second["error_type"] == "E3"
        captured = capsys.readouterr()
        assert "skipped 1" in captured.out
        assert "t9: no annotation" in captured.err

    def test_requires_annotation_dataset(self, tmp_path, capsys):
        traj_path, _ = _golden_rows(tmp_path)
        assert main(["eval", str(traj_path), "--out", str(tmp_path / "o")]) == 2


class TestSynthesizeCommand:
    def test_mock_pipeline(self, tmp_path, corpus, dataset, capsys):
        out = tmp_path / "out"
        code = main([
            "synthesize", "--dataset", str(dataset),
            "--retriever", f"mem:{corpus}", "--out", str(out),
        ])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "2 records (1 success), 1 reasoner targets, 1 purifier targets" in stdout

        synth = [json.loads(l) for l in (out / "synthesis.jsonl").read_text().splitlines()]
        assert [row["status"] for row in synth] == ["success", "failure"]

        reasoner = [json.loads(l) for l in (out / "sft_reasoner.jsonl").read_text().splitlines()]
        assert len(reasoner) == 1
        target = reasoner[0]["target"]
        spans = [tuple(span) for span in reasoner[0]["loss_mask_spans"]]
        assert spans == list(tool_response_spans(target))
        assert len(spans) == 1

        purifier = [json.loads(l) for l in (out / "sft_purifier.jsonl").read_text().splitlines()]
        assert len(purifier) == 1 and purifier[0]["role"] == "purifier"
