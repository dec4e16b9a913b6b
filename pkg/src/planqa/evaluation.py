"""Evaluation harness: answer metrics, judge client, retrieval quality.

Answer quality is exact match and token F1 under the shared QA
normalization, optionally backed by a binary LLM judge. Retrieval quality
counts, per trajectory, how many retrieval calls returned documents that
contain an annotated sub-answer (valid calls), how many sub-answers were
covered anywhere, and whether the first query after a plan revision was
valid. The error classifier delegates the taxonomy judgment to a judge
model but short-circuits trajectories whose answer already matches gold.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

from .agents import BackendError, ChatBackend, ChatMessage, ChatRequest, first_json_object
from .grammar import MissingAnswer, extract_answer
from .planning import Revision, ToolCall, ToolResponse, Trajectory
from .prompts import render_prompt
from .textnorm import best_f1, matches_any, normalize_answer, normalized_contains

ERROR_TYPES = {
    "type 1": "E1",
    "type 2": "E2_1",
    "type 3": "E2_2",
    "type 4": "E3",
}


class MalformedJudgment(BackendError):
    source = "judge"


class MalformedClassification(BackendError):
    source = "error_classifier"


@dataclass(frozen=True)
class EvalRecord:
    trajectory_id: str | None
    em: int
    f1: float
    vrc: int = 0
    irc: int = 0
    trc: int = 0
    sac: int = 0
    lasj: int | None = None
    first_vr: bool | None = None
    error_type: str | None = None
    hop_count: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "em": self.em,
            "f1": self.f1,
            "vrc": self.vrc,
            "irc": self.irc,
            "trc": self.trc,
            "sac": self.sac,
            "lasj": self.lasj,
            "first_vr": self.first_vr,
            "error_type": self.error_type,
            "hop_count": self.hop_count,
        }


class RetrievalQuality(NamedTuple):
    vrc: int
    irc: int
    trc: int
    sac: int


def exact_match(pred: str, gold_answers: Sequence[str]) -> int:
    return 1 if matches_any(pred, gold_answers) else 0


def answer_f1(pred: str, gold_answers: Sequence[str]) -> float:
    return best_f1(pred, gold_answers)


def _ask(backend: ChatBackend, messages: list[ChatMessage]) -> str:
    request = ChatRequest(
        model_id=getattr(backend, "model_id", "default"), messages=tuple(messages)
    )
    return backend.complete(request).content


def lasj_judge(question: str, pred: str, gold: str, backend: ChatBackend) -> int:
    """Binary judged correctness: Yes → 1, No → 0, one corrective retry."""
    prompt = render_prompt(
        "judge_answer", question=question, llm_answer=pred, reference_answer=gold
    )
    messages = [ChatMessage("user", prompt)]
    last = ""
    for _ in range(2):
        last = _ask(backend, messages)
        verdict = last.strip().lower()
        if verdict == "yes":
            return 1
        if verdict == "no":
            return 0
        messages = messages + [
            ChatMessage("assistant", last),
            ChatMessage("user", 'Answer with exactly one word: "Yes" or "No".'),
        ]
    raise MalformedJudgment(f"judge reply is not Yes/No: {last!r}")


def _paired_calls(trajectory: Trajectory) -> list[tuple[ToolCall, ToolResponse]]:
    pairs: list[tuple[ToolCall, ToolResponse]] = []
    pending: ToolCall | None = None
    for event in trajectory.events:
        if isinstance(event, ToolCall):
            pending = event
        elif isinstance(event, ToolResponse) and pending is not None:
            pairs.append((pending, event))
            pending = None
    return pairs


def _docs_contain(docs: Sequence, needles: Sequence[str]) -> bool:
    return any(
        normalized_contains(doc.contents, needle) for doc in docs for needle in needles
    )


def retrieval_quality(trajectory: Trajectory, sub_answers: Sequence[str]) -> RetrievalQuality:
    """Valid/invalid/total retrieval calls and sub-answer coverage.

    A call is valid when any of its returned documents contains any
    annotated sub-answer, both sides normalized. Coverage counts distinct
    sub-answers (by normalized form) found anywhere across all calls.
    """
    if not sub_answers:
        raise ValueError("retrieval_quality requires at least one annotated sub-answer")
    pairs = _paired_calls(trajectory)
    vrc = sum(1 for _, response in pairs if _docs_contain(response.docs, sub_answers))
    trc = len(pairs)
    all_docs = [doc for _, response in pairs for doc in response.docs]
    covered = {
        normalize_answer(answer)
        for answer in sub_answers
        if _docs_contain(all_docs, [answer])
    }
    return RetrievalQuality(vrc=vrc, irc=trc - vrc, trc=trc, sac=len(covered))


def first_vr_after_revision(trajectory: Trajectory, sub_answers: Sequence[str]) -> bool | None:
    """Validity of the first retrieval call after the first plan revision.

    None when the trajectory never revised; False when it revised but
    issued no further retrieval call.
    """
    events = trajectory.events
    revision_at = next(
        (i for i, event in enumerate(events) if isinstance(event, Revision)), None
    )
    if revision_at is None:
        return None
    pending = False
    for event in events[revision_at + 1 :]:
        if isinstance(event, ToolCall):
            pending = True
        elif pending and isinstance(event, ToolResponse):
            return _docs_contain(event.docs, sub_answers)
    return False


def classify_error(
    question: str,
    trajectory_text: str,
    gold_answers: Sequence[str],
    backend: ChatBackend,
) -> str:
    """Map a failed trajectory onto the four-way error taxonomy.

    Correct answers (exact match of the answer tag body) return "correct"
    without consulting the judge. Otherwise the judge returns a JSON
    verdict whose error_type is one of Type 1..4; one corrective retry.
    """
    try:
        answer = extract_answer(trajectory_text)
    except MissingAnswer:
        answer = ""
    if answer and matches_any(answer, gold_answers):
        return "correct"

    prompt = render_prompt(
        "error_classification",
        question=question,
        trajectory=trajectory_text,
        golden_answer="; ".join(gold_answers),
    )
    messages = [ChatMessage("user", prompt)]
    detail = "no response"
    for _ in range(2):
        reply = _ask(backend, messages)
        obj = first_json_object(reply)
        if obj is None:
            detail = "reply contained no JSON object"
        else:
            label = str(obj.get("error_type", "")).strip().lower()
            if label in ERROR_TYPES:
                return ERROR_TYPES[label]
            detail = f"unknown error_type {obj.get('error_type')!r}"
        messages = messages + [
            ChatMessage("assistant", reply),
            ChatMessage(
                "user",
                'Reply with only the JSON object; "error_type" must be "Type 1", "Type 2", "Type 3", or "Type 4".',
            ),
        ]
    raise MalformedClassification(detail)


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate(
    records: Sequence[EvalRecord], hop_counts: Mapping[str, int] | None = None
) -> dict:
    """Dataset-level means and proportions, optionally grouped by hop count."""
    summary: dict = {"count": len(records)}
    if not records:
        return summary
    summary["em"] = _mean([r.em for r in records])
    summary["f1"] = _mean([r.f1 for r in records])
    summary["vrc"] = _mean([r.vrc for r in records])
    summary["irc"] = _mean([r.irc for r in records])
    summary["trc"] = _mean([r.trc for r in records])
    summary["sac"] = _mean([r.sac for r in records])
    summary["lasj"] = _mean([r.lasj for r in records if r.lasj is not None])
    first_vr = [r.first_vr for r in records if r.first_vr is not None]
    summary["first_vr"] = _mean([1.0 if v else 0.0 for v in first_vr])
    errors = Counter(r.error_type for r in records if r.error_type is not None)
    summary["errors"] = dict(sorted(errors.items()))

    def hop_of(record: EvalRecord) -> int | None:
        if record.hop_count is not None:
            return record.hop_count
        if hop_counts is not None and record.trajectory_id in hop_counts:
            return hop_counts[record.trajectory_id]
        return None

    groups: dict[int, list[EvalRecord]] = {}
    for record in records:
        hop = hop_of(record)
        if hop is not None:
            groups.setdefault(hop, []).append(record)
    if groups:
        summary["by_hop"] = {
            hop: {
                "count": len(group),
                "em": _mean([r.em for r in group]),
                "f1": _mean([r.f1 for r in group]),
            }
            for hop, group in sorted(groups.items())
        }
    return summary


def render_summary(summary: dict) -> str:
    """Plain-text table of an aggregate summary."""
    lines = [f"records: {summary.get('count', 0)}"]
    for key in ("em", "f1", "lasj", "first_vr", "vrc", "irc", "trc", "sac"):
        value = summary.get(key)
        if value is not None:
            lines.append(f"{key:>8}: {value:.4f}")
    if summary.get("errors"):
        parts = ", ".join(f"{label}={count}" for label, count in summary["errors"].items())
        lines.append(f"  errors: {parts}")
    for hop, group in (summary.get("by_hop") or {}).items():
        lines.append(
            f"  hop {hop}: count={group['count']} em={group['em']:.4f} f1={group['f1']:.4f}"
        )
    return "\n".join(lines)


def write_eval_records(path, records: Sequence[EvalRecord]) -> int:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")
    return len(records)
