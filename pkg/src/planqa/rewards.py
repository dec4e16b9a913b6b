"""Reward kernel over trajectories: format gate, planning, adaptation, answer.

Every component is a pure function of a Trajectory and its dataset
annotation. The total is gated by the format check: a malformed
trajectory earns zero regardless of content. Planning quality is scored
by sub-question count against the annotated hop count, never by text.
Adaptation combines the refinement check (every answer-dependent
sub-question of the active final plan got a placeholder-free refinement)
with the revision term: correct answers score 1, incorrect-but-revised
trajectories earn a discounted partial credit for revising at the right
time (only after the full retrieval budget failed) and in the right
direction (first post-revision query retrieves relevant evidence).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .grammar import PlanEntry, find_placeholders, validate_format
from .planning import (
    MULTI_HOP,
    Event,
    InitialPlan,
    Refinement,
    Revision,
    SubAnswer,
    Think,
    ToolCall,
    ToolResponse,
    Trajectory,
    serialize_trajectory,
    trajectory_from_json_dict,
)
from .textnorm import best_f1, matches_any

CORRECTNESS_MODES = ("em", "f1")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.1
    beta: float = 0.1
    lambda_: float = 0.5
    max_retrieval_attempts: int = 3
    correctness: str = "em"
    f1_threshold: float = 0.5
    allow_high_lambda: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 <= self.lambda_ <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.lambda_ > 0.5 and not self.allow_high_lambda:
            # With lambda > 0.5 a wrong-but-revised trajectory can outscore
            # a correct one (lambda * 2 > 1), inverting the intended order.
            raise ValueError("lambda > 0.5 requires allow_high_lambda=True")
        if self.max_retrieval_attempts < 1:
            raise ValueError("max_retrieval_attempts must be at least 1")
        if self.correctness not in CORRECTNESS_MODES:
            raise ValueError(f"correctness must be one of {CORRECTNESS_MODES}")
        if not 0 <= self.f1_threshold <= 1:
            raise ValueError("f1_threshold must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "lambda": self.lambda_,
            "K": self.max_retrieval_attempts,
            "correctness": self.correctness,
            "f1_threshold": self.f1_threshold,
            "allow_high_lambda": self.allow_high_lambda,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> RewardConfig:
        return cls(
            alpha=float(obj.get("alpha", 0.1)),
            beta=float(obj.get("beta", 0.1)),
            lambda_=float(obj.get("lambda", 0.5)),
            max_retrieval_attempts=int(obj.get("K", 3)),
            correctness=str(obj.get("correctness", "em")),
            f1_threshold=float(obj.get("f1_threshold", 0.5)),
            allow_high_lambda=bool(obj.get("allow_high_lambda", False)),
        )


@dataclass(frozen=True)
class GoldAnnotation:
    gold_answers: tuple[str, ...]
    hop_count: int | None = None
    sub_answers: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError("gold_answers must be non-empty")
        if self.hop_count is not None and self.hop_count < 1:
            raise ValueError("hop_count must be at least 1 when present")

    @classmethod
    def from_json_dict(cls, obj: dict) -> GoldAnnotation:
        sub = obj.get("sub_answers")
        return cls(
            gold_answers=tuple(str(a) for a in obj["golden_answers"]),
            hop_count=obj.get("hop_count"),
            sub_answers=tuple(str(a) for a in sub) if sub is not None else None,
        )


@dataclass(frozen=True)
class RewardBreakdown:
    r_f: int
    r_p: int | None
    r_refine: int
    r_revise: float
    r_a: float
    r_ans: float
    r_total: float
    diagnostics: tuple[str, ...] = ()

    def to_json_dict(self, trajectory_id: str | None = None) -> dict:
        return {
            "trajectory_id": trajectory_id,
            "r_f": self.r_f,
            "r_p": self.r_p,
            "r_refine": self.r_refine,
            "r_revise": self.r_revise,
            "r_a": self.r_a,
            "r_ans": self.r_ans,
            "r_total": self.r_total,
            "diagnostics": list(self.diagnostics),
        }


def format_reward(source: str, expects_plan: bool) -> int:
    return 1 if validate_format(source, expects_plan).passed else 0


def initial_planning_reward(trajectory: Trajectory, gold: GoldAnnotation) -> int | None:
    """Count-based planning score; None when the dataset has no hop count."""
    if gold.hop_count is None:
        return None
    plans = [event for event in trajectory.events if isinstance(event, InitialPlan)]
    if gold.hop_count == 1:
        return 1 if not plans else 0
    if not plans:
        return 0
    return 1 if len(plans[0].plan) == gold.hop_count else 0


def active_final_plan(events: Sequence[Event]) -> tuple[PlanEntry, ...] | None:
    """The globally numbered plan in force at the end of the event log.

    Each revision keeps the already-answered prefix and splices in its
    locally numbered entries, renumbered to continue the sequence.
    """
    entries: list[PlanEntry] | None = None
    answered = 0
    for event in events:
        if isinstance(event, InitialPlan):
            entries = list(event.plan.sub_questions)
        elif isinstance(event, SubAnswer):
            answered += 1
        elif isinstance(event, Revision):
            current = answered + 1
            prefix = [e for e in (entries or []) if e.index < current]
            entries = prefix + [
                PlanEntry(current - 1 + e.index, e.text) for e in event.plan.sub_questions
            ]
    return tuple(entries) if entries is not None else None


def _effective_refinements(events: Sequence[Event]) -> dict[int, str]:
    """Surviving refinement text per sub-question index.

    A revision voids refinements aimed at the replaced region; a later
    refinement for the same index supersedes an earlier one.
    """
    refinements: dict[int, str] = {}
    answered = 0
    for event in events:
        if isinstance(event, SubAnswer):
            answered += 1
        elif isinstance(event, Revision):
            current = answered + 1
            refinements = {i: t for i, t in refinements.items() if i < current}
        elif isinstance(event, Refinement):
            refinements[event.index] = event.text
    return refinements


def refine_reward(trajectory: Trajectory) -> int:
    """1 iff every answer-dependent sub-question was refined placeholder-free.

    Dependence means the planned text (in the active final plan) contains
    an ``#A_<j>`` placeholder. Vacuously 1 when nothing depends.
    """
    plan = active_final_plan(trajectory.events)
    if plan is None:
        return 1
    refinements = _effective_refinements(trajectory.events)
    for entry in plan:
        if not any(ref.kind == "answer" for ref in find_placeholders(entry.text)):
            continue
        refined = refinements.get(entry.index)
        if refined is None or find_placeholders(refined):
            return 0
    return 1


def _revision_timing(events: Sequence[Event], max_attempts: int) -> int:
    """1 iff every revision came right after a full budget of failures.

    Walking back from each Revision (Think events are transparent), there
    must be exactly ``max_attempts`` consecutive irrelevant tool responses
    whose calls target the then-current sub-question.
    """
    for position, event in enumerate(events):
        if not isinstance(event, Revision):
            continue
        target = next(
            (e.target_question for e in reversed(events[:position]) if isinstance(e, ToolCall)),
            None,
        )
        if target is None:
            return 0
        streak = 0
        i = position - 1
        while i >= 0:
            current = events[i]
            if isinstance(current, Think):
                i -= 1
                continue
            if isinstance(current, ToolResponse):
                j = i - 1
                while j >= 0 and isinstance(events[j], Think):
                    j -= 1
                call = events[j] if j >= 0 and isinstance(events[j], ToolCall) else None
                if call is None or call.target_question != target or current.verdict.relevant:
                    break
                streak += 1
                i = j - 1
                continue
            break
        if streak != max_attempts:
            return 0
    return 1


def _revision_quality(events: Sequence[Event]) -> int:
    """1 iff the first query after the first revision retrieved relevant evidence."""
    seen_revision = False
    seen_call = False
    for event in events:
        if isinstance(event, Revision) and not seen_revision:
            seen_revision = True
        elif seen_revision and isinstance(event, ToolCall):
            seen_call = True
        elif seen_revision and seen_call and isinstance(event, ToolResponse):
            return 1 if event.verdict.relevant else 0
    return 0


def revise_reward(trajectory: Trajectory, answer_correct: bool, cfg: RewardConfig) -> float:
    """Revision term: 1 when correct; discounted process credit when revised."""
    if answer_correct:
        return 1.0
    if not any(isinstance(event, Revision) for event in trajectory.events):
        return 0.0
    r_t = _revision_timing(trajectory.events, cfg.max_retrieval_attempts)
    r_q = _revision_quality(trajectory.events)
    return cfg.lambda_ * (r_t + r_q)


def answer_reward(pred: str, gold_answers: Sequence[str]) -> float:
    return best_f1(pred, gold_answers)


def answer_correct(pred: str, gold_answers: Sequence[str], cfg: RewardConfig) -> bool:
    if cfg.correctness == "em":
        return matches_any(pred, gold_answers)
    return best_f1(pred, gold_answers) >= cfg.f1_threshold


def total_reward(
    trajectory: Trajectory, gold: GoldAnnotation, cfg: RewardConfig | None = None
) -> RewardBreakdown:
    if cfg is None:
        cfg = RewardConfig()
    diagnostics: list[str] = []

    expects_plan = trajectory.question_type == MULTI_HOP
    try:
        text = serialize_trajectory(trajectory)
    except ValueError as error:
        text = None
        r_f = 0
        diagnostics.append(f"format: trajectory is unserializable ({error})")
    if text is not None:
        report = validate_format(text, expects_plan)
        r_f = 1 if report.passed else 0
        for violation in report.violations:
            diagnostics.append(f"format: [c{violation.constraint_id}] {violation.message}")

    r_p = initial_planning_reward(trajectory, gold)
    if r_p is None:
        diagnostics.append("initial_planning: unscored, annotation has no hop_count")
    elif r_p == 0:
        diagnostics.append("initial_planning: sub-question count does not match the hop count")

    r_refine = refine_reward(trajectory)
    if r_refine == 0:
        diagnostics.append("refinement: a dependent sub-question lacks a placeholder-free refinement")

    pred = trajectory.final_answer or ""
    r_ans = answer_reward(pred, gold.gold_answers)
    correct = answer_correct(pred, gold.gold_answers, cfg)
    r_revise = revise_reward(trajectory, correct, cfg)
    if not correct:
        diagnostics.append(f"answer: not correct under {cfg.correctness}")
        if any(isinstance(event, Revision) for event in trajectory.events):
            diagnostics.append(
                "revision: timing="
                f"{_revision_timing(trajectory.events, cfg.max_retrieval_attempts)}"
                f" first_query_relevant={_revision_quality(trajectory.events)}"
            )

    r_a = r_refine + r_revise
    r_total = r_f * (cfg.alpha * (r_p or 0) + cfg.beta * r_a + r_ans)
    return RewardBreakdown(
        r_f=r_f,
        r_p=r_p,
        r_refine=r_refine,
        r_revise=r_revise,
        r_a=r_a,
        r_ans=r_ans,
        r_total=r_total,
        diagnostics=tuple(diagnostics),
    )


def load_annotations(path: str | Path) -> dict[str, GoldAnnotation]:
    annotations: dict[str, GoldAnnotation] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                annotations[str(obj["id"])] = GoldAnnotation.from_json_dict(obj)
            except (json.JSONDecodeError, KeyError, ValueError) as error:
                raise ValueError(f"{path}:{line_no}: bad annotation record: {error}")
    return annotations


def batch_score(
    trajectory_path: str | Path,
    annotations_path: str | Path,
    cfg: RewardConfig | None = None,
) -> list[dict]:
    """Score a trajectory file against an annotation file, order-preserving.

    Malformed trajectory lines and missing annotations become error
    records with the line number; they never abort the batch.
    """
    if cfg is None:
        cfg = RewardConfig()
    annotations = load_annotations(annotations_path)
    records: list[dict] = []
    with open(trajectory_path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                trajectory = trajectory_from_json_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as error:
                records.append({"line": line_no, "error": f"unreadable trajectory: {error}"})
                continue
            gold = annotations.get(str(trajectory.trajectory_id))
            if gold is None:
                records.append(
                    {
                        "line": line_no,
                        "trajectory_id": trajectory.trajectory_id,
                        "error": "no annotation for this trajectory id",
                    }
                )
                continue
            breakdown = total_reward(trajectory, gold, cfg)
            records.append(breakdown.to_json_dict(trajectory.trajectory_id))
    return records
