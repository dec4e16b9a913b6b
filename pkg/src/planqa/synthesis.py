"""Teacher-driven trajectory synthesis and SFT export.

The synthesis loops reuse the episode engine with two changes relative to
inference: routing follows the dataset's hop count instead of the
teacher's own complexity assessment, and budget exhaustion ends the
episode as a failure instead of falling back to internal knowledge.
Successful trajectories are rejection-filtered (exact answer match plus
at least one retrieval call), reformatted by the teacher into free-form
reasoning text for the planner's SFT targets (tool-response bytes are
loss-masked), and mined for purifier input/output pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .agents import PurifierVerdict, Purifier, Reasoner, render_purifier_prompt
from .grammar import TagKind, tolerant_scan, validate_format
from .planning import (
    MULTI_HOP,
    SINGLE_HOP,
    EpisodeConfig,
    ToolCall,
    ToolResponse,
    Trajectory,
    run_episode,
    serialize_trajectory,
    trajectory_from_json_dict,
    trajectory_to_json_dict,
)
from .retrieval import RetrievedDoc, Retriever
from .textnorm import matches_any


class RewriteBrokeFormat(RuntimeError):
    """The teacher's free-form rewrite lost a required format constraint."""

    def __init__(self, detail: str, violations=()):
        super().__init__(detail)
        self.violations = tuple(violations)


@dataclass(frozen=True)
class PurifierPair:
    target_question: str
    docs: tuple[RetrievedDoc, ...]
    verdict: PurifierVerdict

    def to_json_dict(self) -> dict:
        return {
            "target_question": self.target_question,
            "docs": [doc.to_json_dict() for doc in self.docs],
            "verdict": self.verdict.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> PurifierPair:
        return cls(
            target_question=obj["target_question"],
            docs=tuple(RetrievedDoc.from_json_dict(doc) for doc in obj["docs"]),
            verdict=PurifierVerdict.from_json_dict(obj["verdict"]),
        )


@dataclass(frozen=True)
class SynthesisRecord:
    question: str
    gold_answers: tuple[str, ...]
    hop_count: int | None
    trajectory: Trajectory
    purifier_pairs: tuple[PurifierPair, ...]
    status: str  # "success" or "failure"

    def __post_init__(self):
        if self.status == "success" and self.trajectory.final_answer is None:
            raise ValueError("a success record requires a final answer")

    def tool_call_count(self) -> int:
        return sum(1 for event in self.trajectory.events if isinstance(event, ToolCall))

    def to_json_dict(self) -> dict:
        return {
            "question": self.question,
            "gold_answers": list(self.gold_answers),
            "hop_count": self.hop_count,
            "status": self.status,
            "trajectory": trajectory_to_json_dict(self.trajectory),
            "purifier_pairs": [pair.to_json_dict() for pair in self.purifier_pairs],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> SynthesisRecord:
        return cls(
            question=obj["question"],
            gold_answers=tuple(obj["gold_answers"]),
            hop_count=obj.get("hop_count"),
            trajectory=trajectory_from_json_dict(obj["trajectory"]),
            purifier_pairs=tuple(PurifierPair.from_json_dict(p) for p in obj["purifier_pairs"]),
            status=obj["status"],
        )


@dataclass(frozen=True)
class SftRecord:
    role: str  # "reasoner" or "purifier"
    prompt: str
    target: str
    loss_mask_spans: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        for start, end in self.loss_mask_spans:
            if not 0 <= start <= end <= len(self.target):
                raise ValueError(f"mask span ({start}, {end}) falls outside the target")

    def to_json_dict(self) -> dict:
        return {
            "role": self.role,
            "prompt": self.prompt,
            "target": self.target,
            "loss_mask_spans": [[start, end] for start, end in self.loss_mask_spans],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> SftRecord:
        return cls(
            role=obj["role"],
            prompt=obj["prompt"],
            target=obj["target"],
            loss_mask_spans=tuple((int(s), int(e)) for s, e in obj.get("loss_mask_spans", ())),
        )


def purifier_pairs_from_trajectory(trajectory: Trajectory) -> tuple[PurifierPair, ...]:
    """One pair per retrieval cycle, read off the tool events.

    Pair count therefore always equals the trajectory's tool-call count;
    cycles whose verdict was synthesized (empty retrieval) carry no docs.
    """
    pairs: list[PurifierPair] = []
    pending: ToolCall | None = None
    for event in trajectory.events:
        if isinstance(event, ToolCall):
            pending = event
        elif isinstance(event, ToolResponse) and pending is not None:
            pairs.append(PurifierPair(pending.target_question, event.docs, event.verdict))
            pending = None
    return tuple(pairs)


def _synthesize(
    question: str,
    gold_answers: Sequence[str],
    hop_count: int | None,
    question_type: str,
    teacher: Reasoner,
    purifier: Purifier,
    retriever: Retriever,
    cfg: EpisodeConfig,
    trajectory_id: str | None,
) -> SynthesisRecord:
    trajectory = run_episode(
        question,
        teacher,
        purifier,
        retriever,
        cfg,
        hop_hint=hop_count,
        exhaust_policy="fail",
        force_question_type=question_type,
        trajectory_id=trajectory_id,
    )
    return SynthesisRecord(
        question=question,
        gold_answers=tuple(gold_answers),
        hop_count=hop_count,
        trajectory=trajectory,
        purifier_pairs=purifier_pairs_from_trajectory(trajectory),
        status="success" if trajectory.final_answer is not None else "failure",
    )


def synthesize_single_hop(
    question: str,
    gold_answers: Sequence[str],
    teacher: Reasoner,
    purifier: Purifier,
    retriever: Retriever,
    cfg: EpisodeConfig | None = None,
    *,
    trajectory_id: str | None = None,
) -> SynthesisRecord:
    return _synthesize(
        question, gold_answers, 1, SINGLE_HOP, teacher, purifier, retriever,
        cfg or EpisodeConfig(), trajectory_id,
    )


def synthesize_multi_hop(
    question: str,
    gold_answers: Sequence[str],
    hop_count: int | None,
    teacher: Reasoner,
    purifier: Purifier,
    retriever: Retriever,
    cfg: EpisodeConfig | None = None,
    *,
    trajectory_id: str | None = None,
) -> SynthesisRecord:
    return _synthesize(
        question, gold_answers, hop_count, MULTI_HOP, teacher, purifier, retriever,
        cfg or EpisodeConfig(), trajectory_id,
    )


def filter_trajectories(
    records: Iterable[SynthesisRecord],
    gold_map: Mapping[str, Sequence[str]] | None = None,
    *,
    normalized: bool = True,
) -> list[SynthesisRecord]:
    """Rejection filter: exact answer match AND at least one retrieval call.

    Gold answers come from each record, unless ``gold_map`` (keyed by
    trajectory id) overrides them. ``normalized`` applies the shared QA
    normalization before comparing; raw string equality otherwise.
    """
    kept: list[SynthesisRecord] = []
    for record in records:
        final = record.trajectory.final_answer
        if final is None:
            continue
        golds: Sequence[str] = record.gold_answers
        if gold_map is not None and record.trajectory.trajectory_id in gold_map:
            golds = gold_map[record.trajectory.trajectory_id]
        if normalized:
            correct = matches_any(final, golds)
        else:
            correct = any(final == gold for gold in golds)
        if correct and record.tool_call_count() >= 1:
            kept.append(record)
    return kept


def tool_response_spans(text: str) -> tuple[tuple[int, int], ...]:
    spans, _ = tolerant_scan(text)
    return tuple(span.body_range for span in spans if span.kind is TagKind.TOOL_RESPONSE)


def reformat_reasoner(record: SynthesisRecord, teacher: Reasoner) -> SftRecord:
    """Turn a structured trajectory into a free-form SFT target.

    The teacher rewrites the canonical text into flowing reasoning; the
    result must still pass the format gate or the record is rejected with
    RewriteBrokeFormat. Tool-response bodies in the rewritten text become
    loss-mask spans, since the model should not learn to generate them.
    """
    source = serialize_trajectory(record.trajectory)
    rewritten = teacher.rewrite_trajectory(source)
    expects_plan = record.trajectory.question_type == MULTI_HOP
    report = validate_format(rewritten, expects_plan)
    if not report.passed:
        ids = sorted(report.constraint_ids())
        raise RewriteBrokeFormat(
            f"rewritten trajectory violates constraint(s) {ids}", report.violations
        )
    return SftRecord(
        role="reasoner",
        prompt=record.question,
        target=rewritten,
        loss_mask_spans=tool_response_spans(rewritten),
    )


def verdict_target_json(verdict: PurifierVerdict) -> str:
    return json.dumps(
        {
            "relevant": "Yes" if verdict.relevant else "No",
            "extracted_info": verdict.extracted_info,
            "summary": verdict.summary,
        },
        ensure_ascii=False,
    )


def extract_purifier_pairs(records: Iterable[SynthesisRecord]) -> list[SftRecord]:
    """One SFT record per purifier call across the given records."""
    out: list[SftRecord] = []
    for record in records:
        for pair in record.purifier_pairs:
            out.append(
                SftRecord(
                    role="purifier",
                    prompt=render_purifier_prompt(pair.target_question, pair.docs),
                    target=verdict_target_json(pair.verdict),
                )
            )
    return out


def export_sft(
    records: Iterable[SynthesisRecord],
    teacher: Reasoner,
    *,
    gold_map: Mapping[str, Sequence[str]] | None = None,
    normalized: bool = True,
) -> tuple[list[SftRecord], list[SftRecord], list[str]]:
    """Filter, reformat, and extract: the full SFT data construction step.

    Returns (reasoner records, purifier records, diagnostics). A record
    whose rewrite breaks the format loses its reasoner target and is
    reported; its purifier pairs are kept, since they do not depend on
    the rewrite.
    """
    kept = filter_trajectories(records, gold_map, normalized=normalized)
    reasoner_records: list[SftRecord] = []
    diagnostics: list[str] = []
    for record in kept:
        try:
            reasoner_records.append(reformat_reasoner(record, teacher))
        except RewriteBrokeFormat as error:
            diagnostics.append(
                f"discarded reasoner target for {record.trajectory.trajectory_id or record.question!r}: {error}"
            )
    return reasoner_records, extract_purifier_pairs(kept), diagnostics


def write_synthesis_records(path: str | Path, records: Iterable[SynthesisRecord]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_synthesis_records(path: str | Path) -> Iterator[SynthesisRecord]:
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                yield SynthesisRecord.from_json_dict(json.loads(line))


def write_sft_records(path: str | Path, records: Iterable[SftRecord]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_sft_records(path: str | Path) -> Iterator[SftRecord]:
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                yield SftRecord.from_json_dict(json.loads(line))
