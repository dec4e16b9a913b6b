"""Command-line pipeline: run, synthesize, reward, validate, eval.

Configuration merges four layers, strongest first: command-line flags,
PLANQA_* environment variables, a JSON config file, built-in defaults.
Backend specs are "mock" for the deterministic built-in agents or
"http:<base-url>" for remote model endpoints (API tokens come only from
the PLANQA_API_TOKEN environment variable). Retriever specs are
"mem:<corpus.jsonl>" or "http:<base-url>".

Exit codes: 0 success, 1 validation failure, 2 configuration error,
3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

from .agents import BackendError, ChatPurifier, ChatReasoner, HttpChatBackend, Purifier, Reasoner
from .evaluation import (
    EvalRecord,
    aggregate,
    answer_f1,
    classify_error,
    exact_match,
    first_vr_after_revision,
    lasj_judge,
    render_summary,
    retrieval_quality,
    write_eval_records,
)
from .planning import (
    EpisodeConfig,
    MULTI_HOP,
    SINGLE_HOP,
    Trajectory,
    run_episode,
    serialize_trajectory,
    trajectory_from_json_dict,
    trajectory_to_json_dict,
)
from .retrieval import Retriever, build_retriever
from .rewards import GoldAnnotation, RewardConfig, batch_score, load_annotations
from .scripted import EmJudgeBackend, RulePurifier, RuleReasoner
from .synthesis import SynthesisRecord, export_sft, synthesize_multi_hop, synthesize_single_hop, write_sft_records, write_synthesis_records

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3

ENV_PREFIX = "PLANQA_"


class ConfigError(Exception):
    """Bad configuration value; the message names the offending field."""


@dataclass
class RunConfig:
    dataset: str | None = None
    retriever: str | None = None
    out: str | None = None
    reasoner: str = "mock"
    purifier: str = "mock"
    judge: str | None = None
    k: int = 3
    m: int = 1
    top_k: int = 5
    alpha: float = 0.1
    beta: float = 0.1
    lambda_: float = 0.5
    seed: int = 0
    concurrency: int = 1
    resume: bool = True
    allow_high_lambda: bool = False

    def episode_config(self) -> EpisodeConfig:
        try:
            return EpisodeConfig(max_retrieval_attempts=self.k, max_revisions=self.m, top_k=self.top_k)
        except ValueError as error:
            raise ConfigError(str(error))

    def reward_config(self) -> RewardConfig:
        try:
            return RewardConfig(
                alpha=self.alpha,
                beta=self.beta,
                lambda_=self.lambda_,
                max_retrieval_attempts=self.k,
                allow_high_lambda=self.allow_high_lambda,
            )
        except ValueError as error:
            raise ConfigError(str(error))


_CONFIG_KEYS = {
    "dataset": str, "retriever": str, "out": str,
    "reasoner": str, "purifier": str, "judge": str,
    "k": int, "m": int, "top_k": int,
    "alpha": float, "beta": float, "lambda": float,
    "seed": int, "concurrency": int,
    "allow_high_lambda": bool,
}


def _coerce(field_name: str, value, kind) -> object:
    try:
        if kind is bool and isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes"):
                return True
            if lowered in ("0", "false", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return kind(value)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"{field_name}: {error}")


def _attr(key: str) -> str:
    return "lambda_" if key == "lambda" else key


def load_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config file, environment, and flags, in that order."""
    cfg = RunConfig()

    config_path = getattr(args, "config", None) or os.environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as handle:
                file_values = json.load(handle)
        except (OSError, json.JSONDecodeError) as error:
            raise ConfigError(f"config file {config_path}: {error}")
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {config_path}: expected a JSON object")
        for key, value in file_values.items():
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"config file {config_path}: unknown key {key!r}")
            setattr(cfg, _attr(key), _coerce(key, value, _CONFIG_KEYS[key]))

    for key, kind in _CONFIG_KEYS.items():
        env_value = os.environ.get(ENV_PREFIX + key.upper())
        if env_value is not None:
            setattr(cfg, _attr(key), _coerce(f"{ENV_PREFIX}{key.upper()}", env_value, kind))

    for key in _CONFIG_KEYS:
        flag_value = getattr(args, _attr(key), None)
        if flag_value is not None:
            setattr(cfg, _attr(key), flag_value)
    if getattr(args, "no_resume", False):
        cfg.resume = False

    if cfg.concurrency < 1:
        raise ConfigError("concurrency must be at least 1")
    return cfg


def _build_reasoner(spec: str) -> Reasoner:
    if spec == "mock":
        return RuleReasoner()
    kind, _, rest = spec.partition(":")
    if kind == "http" and rest:
        return ChatReasoner(HttpChatBackend(rest, model_id="reasoner"))
    raise ConfigError(f"reasoner: unknown backend spec {spec!r}")


def _build_purifier(spec: str) -> Purifier:
    if spec == "mock":
        return RulePurifier()
    kind, _, rest = spec.partition(":")
    if kind == "http" and rest:
        return ChatPurifier(HttpChatBackend(rest, model_id="purifier"))
    raise ConfigError(f"purifier: unknown backend spec {spec!r}")


def _build_judge(spec: str):
    if spec == "mock":
        return EmJudgeBackend()
    kind, _, rest = spec.partition(":")
    if kind == "http" and rest:
        return HttpChatBackend(rest, model_id="judge")
    raise ConfigError(f"judge: unknown backend spec {spec!r}")


def _build_retriever(spec: str) -> Retriever:
    try:
        return build_retriever(spec)
    except (ValueError, OSError) as error:
        raise ConfigError(f"retriever: {error}")


@dataclass(frozen=True)
class DatasetRow:
    row_id: str
    question: str
    gold_answers: tuple[str, ...]
    hop_count: int | None = None
    sub_answers: tuple[str, ...] = ()


def load_dataset(path: str) -> list[DatasetRow]:
    rows: list[DatasetRow] = []
    try:
        handle = open(path, encoding="utf-8")
    except OSError as error:
        raise ConfigError(f"dataset: {error}")
    with handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append(
                    DatasetRow(
                        row_id=str(obj.get("id", f"q{line_no}")),
                        question=str(obj["question"]),
                        gold_answers=tuple(str(a) for a in obj.get("golden_answers", ())),
                        hop_count=obj.get("hop_count"),
                        sub_answers=tuple(str(a) for a in obj.get("sub_answers", ())),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as error:
                raise ConfigError(f"dataset {path}:{line_no}: {error}")
    return rows


def _prepare_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("out: an output directory is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _completed_ids(path: Path) -> set[str]:
    done: set[str] = set()
    if not path.exists():
        return done
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                try:
                    done.add(str(json.loads(line)["id"]))
                except (json.JSONDecodeError, KeyError):
                    continue
    return done


def _check_resume(cfg: RunConfig, paths: Sequence[Path]) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not cfg.resume:
        raise ConfigError(
            "refusing to touch existing output under --no-resume: " + ", ".join(existing)
        )


def cmd_run(cfg: RunConfig) -> int:
    if not cfg.dataset:
        raise ConfigError("dataset: a dataset file is required")
    if not cfg.retriever:
        raise ConfigError("retriever: a retriever spec is required")
    out = _prepare_out(cfg)
    out_path = out / "trajectories.jsonl"
    _check_resume(cfg, [out_path])

    rows = load_dataset(cfg.dataset)
    done = _completed_ids(out_path) if cfg.resume else set()
    pending = [row for row in rows if row.row_id not in done]
    print(f"run: {len(rows)} questions, {len(rows) - len(pending)} already done")

    reasoner = _build_reasoner(cfg.reasoner)
    purifier = _build_purifier(cfg.purifier)
    retriever = _build_retriever(cfg.retriever)
    episode_cfg = cfg.episode_config()

    def run_one(row: DatasetRow) -> Trajectory:
        return run_episode(
            row.question,
            reasoner,
            purifier,
            retriever,
            episode_cfg,
            hop_hint=row.hop_count,
            trajectory_id=row.row_id,
        )

    failures: list[tuple[str, str]] = []
    results: list[Trajectory] = []
    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        futures = [(row, pool.submit(run_one, row)) for row in pending]
        for row, future in futures:
            try:
                results.append(future.result())
            except BackendError as error:
                failures.append((row.row_id, str(error)))

    with open(out_path, "a", encoding="utf-8") as handle:
        for trajectory in results:
            handle.write(json.dumps(trajectory_to_json_dict(trajectory), ensure_ascii=False) + "\n")

    by_id = {row.row_id: row for row in rows}
    eval_records = []
    for trajectory in results:
        row = by_id[trajectory.trajectory_id]
        if not row.gold_answers:
            continue
        pred = trajectory.final_answer or ""
        eval_records.append(
            EvalRecord(
                trajectory_id=trajectory.trajectory_id,
                em=exact_match(pred, row.gold_answers),
                f1=answer_f1(pred, row.gold_answers),
                hop_count=row.hop_count,
            )
        )
    print(f"run: wrote {len(results)} trajectories to {out_path}")
    if eval_records:
        print(render_summary(aggregate(eval_records)))
    if failures:
        for row_id, message in failures:
            print(f"run: FAILED {row_id}: {message}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_synthesize(cfg: RunConfig) -> int:
    if not cfg.dataset:
        raise ConfigError("dataset: a dataset file is required")
    if not cfg.retriever:
        raise ConfigError("retriever: a retriever spec is required")
    out = _prepare_out(cfg)
    synthesis_path = out / "synthesis.jsonl"
    reasoner_path = out / "sft_reasoner.jsonl"
    purifier_path = out / "sft_purifier.jsonl"
    _check_resume(cfg, [synthesis_path, reasoner_path, purifier_path])

    rows = load_dataset(cfg.dataset)
    teacher = _build_reasoner(cfg.reasoner)
    purifier = _build_purifier(cfg.purifier)
    retriever = _build_retriever(cfg.retriever)
    episode_cfg = cfg.episode_config()

    def synth_one(row: DatasetRow) -> SynthesisRecord:
        if row.hop_count is not None and row.hop_count >= 2:
            return synthesize_multi_hop(
                row.question, row.gold_answers, row.hop_count,
                teacher, purifier, retriever, episode_cfg, trajectory_id=row.row_id,
            )
        return synthesize_single_hop(
            row.question, row.gold_answers,
            teacher, purifier, retriever, episode_cfg, trajectory_id=row.row_id,
        )

    records: list[SynthesisRecord] = []
    failures: list[tuple[str, str]] = []
    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        futures = [(row, pool.submit(synth_one, row)) for row in rows]
        for row, future in futures:
            try:
                records.append(future.result())
            except BackendError as error:
                failures.append((row.row_id, str(error)))

    write_synthesis_records(synthesis_path, records)
    reasoner_records, purifier_records, diagnostics = export_sft(records, teacher)
    write_sft_records(reasoner_path, reasoner_records)
    write_sft_records(purifier_path, purifier_records)

    succeeded = sum(1 for record in records if record.status == "success")
    print(
        f"synthesize: {len(records)} records ({succeeded} success), "
        f"{len(reasoner_records)} reasoner targets, {len(purifier_records)} purifier targets"
    )
    for line in diagnostics:
        print(f"synthesize: {line}", file=sys.stderr)
    if failures:
        for row_id, message in failures:
            print(f"synthesize: FAILED {row_id}: {message}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_reward(cfg: RunConfig, trajectories: str, annotations: str) -> int:
    out = _prepare_out(cfg)
    reward_cfg = cfg.reward_config()
    try:
        records = batch_score(trajectories, annotations, reward_cfg)
    except (OSError, ValueError) as error:
        raise ConfigError(str(error))
    out_path = out / "rewards.jsonl"
    with open(out_path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
    scored = [record for record in records if "r_total" in record]
    errored = len(records) - len(scored)
    mean_total = sum(record["r_total"] for record in scored) / len(scored) if scored else 0.0
    print(f"reward: scored {len(scored)} trajectories (errors {errored}), mean r_total {mean_total:.4f}")
    print(f"reward: wrote {out_path}")
    return EXIT_OK


def cmd_validate(trajectories: str) -> int:
    from .grammar import validate_format

    try:
        handle = open(trajectories, encoding="utf-8")
    except OSError as error:
        raise ConfigError(f"trajectories: {error}")
    any_fail = False
    total = 0
    with handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            total += 1
            label = f"line {line_no}"
            try:
                trajectory = trajectory_from_json_dict(json.loads(line))
                label = trajectory.trajectory_id or label
                text = serialize_trajectory(trajectory)
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as error:
                print(f"{label}: FAIL unreadable record ({error})")
                any_fail = True
                continue
            report = validate_format(text, expects_plan=trajectory.question_type == MULTI_HOP)
            if report.passed:
                print(f"{label}: PASS")
            else:
                ids = ",".join(f"c{v.constraint_id}" for v in report.violations)
                detail = "; ".join(v.message for v in report.violations)
                print(f"{label}: FAIL [{ids}] {detail}")
                any_fail = True
    if total == 0:
        print("validate: no records found", file=sys.stderr)
    return EXIT_VALIDATION if any_fail else EXIT_OK


def cmd_eval(cfg: RunConfig, trajectories: str, classify: bool) -> int:
    if not cfg.dataset:
        raise ConfigError("dataset: an annotation file is required")
    out = _prepare_out(cfg)
    try:
        annotations = load_annotations(cfg.dataset)
    except (OSError, ValueError) as error:
        raise ConfigError(str(error))
    judge = _build_judge(cfg.judge) if cfg.judge else None

    records: list[EvalRecord] = []
    skipped = 0
    try:
        lines = Path(trajectories).read_text(encoding="utf-8").splitlines()
    except OSError as error:
        raise ConfigError(f"trajectories: {error}")
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            trajectory = trajectory_from_json_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as error:
            print(f"eval: skipping line {line_no}: {error}", file=sys.stderr)
            skipped += 1
            continue
        gold = annotations.get(str(trajectory.trajectory_id))
        if gold is None:
            print(f"eval: skipping {trajectory.trajectory_id}: no annotation", file=sys.stderr)
            skipped += 1
            continue
        pred = trajectory.final_answer or ""
        vrc = irc = trc = sac = 0
        first_vr = None
        if gold.sub_answers:
            quality = retrieval_quality(trajectory, gold.sub_answers)
            vrc, irc, trc, sac = quality
            first_vr = first_vr_after_revision(trajectory, gold.sub_answers)
        lasj = None
        error_type = None
        if judge is not None:
            lasj = lasj_judge(trajectory.question, pred, gold.gold_answers[0], judge)
            if classify:
                error_type = classify_error(
                    trajectory.question, serialize_trajectory(trajectory), gold.gold_answers, judge
                )
        records.append(
            EvalRecord(
                trajectory_id=trajectory.trajectory_id,
                em=exact_match(pred, gold.gold_answers),
                f1=answer_f1(pred, gold.gold_answers),
                vrc=vrc,
                irc=irc,
                trc=trc,
                sac=sac,
                lasj=lasj,
                first_vr=first_vr,
                error_type=error_type,
                hop_count=gold.hop_count,
            )
        )

    out_path = out / "eval.jsonl"
    write_eval_records(out_path, records)
    print(f"eval: wrote {len(records)} records to {out_path} (skipped {skipped})")
    print(render_summary(aggregate(records)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planqa",
        description="Plan-and-retrieve multi-hop QA pipeline: run, synthesize, reward, validate, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--dataset", help="dataset JSONL file")
        p.add_argument("--retriever", help="retriever spec: mem:<corpus.jsonl> or http:<url>")
        p.add_argument("--out", help="output directory")
        p.add_argument("--reasoner", help="reasoner spec: mock or http:<url>")
        p.add_argument("--purifier", help="purifier spec: mock or http:<url>")
        p.add_argument("--judge", help="judge spec: mock or http:<url>")
        p.add_argument("--seed", type=int)
        p.add_argument("--concurrency", type=int)
        p.add_argument("--k", type=int, help="max retrieval attempts per sub-question")
        p.add_argument("--m", type=int, help="max plan revisions per episode")
        p.add_argument("--top-k", dest="top_k", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--lambda", dest="lambda_", type=float)
        p.add_argument("--allow-high-lambda", dest="allow_high_lambda", action="store_const", const=True)
        p.add_argument("--no-resume", dest="no_resume", action="store_true")

    shared(sub.add_parser("run", help="run inference episodes over a dataset"))
    shared(sub.add_parser("synthesize", help="synthesize trajectories and SFT data"))

    reward = sub.add_parser("reward", help="score a trajectory file against annotations")
    reward.add_argument("trajectories", help="trajectory JSONL file")
    reward.add_argument("annotations", help="annotation JSONL file")
    shared(reward)

    validate = sub.add_parser("validate", help="format-check a trajectory file")
    validate.add_argument("trajectories", help="trajectory JSONL file")

    evaluate = sub.add_parser("eval", help="compute metrics for a trajectory file")
    evaluate.add_argument("trajectories", help="trajectory JSONL file")
    evaluate.add_argument("--classify-errors", dest="classify_errors", action="store_true")
    shared(evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args.trajectories)
        cfg = load_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "synthesize":
            return cmd_synthesize(cfg)
        if args.command == "reward":
            return cmd_reward(cfg, args.trajectories, args.annotations)
        if args.command == "eval":
            return cmd_eval(cfg, args.trajectories, args.classify_errors)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as error:
        print(f"config error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as error:
        print(f"backend error: {error}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
