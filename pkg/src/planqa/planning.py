"""Episode engine: the plan/retrieve/refine/revise state machine.

run_episode drives one question through the dual-agent workflow: assess
complexity, decompose multi-hop questions into a sub-question plan, solve
sub-questions sequentially with budgeted iterative retrieval, refine the
next sub-question after each success, revise the remaining plan after a
retrieval-budget exhaustion, and synthesize the final answer. Everything
the agents did is recorded as an ordered event log (Trajectory), which
serializes both to the canonical tag grammar and to JSON lines.

Budgets: at most ``max_retrieval_attempts`` retrieval cycles per
sub-question per plan version, and at most ``max_revisions`` revisions
per episode.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence, Union

from .agents import (
    IRRELEVANT_MARKER,
    RELEVANT_MARKER,
    BackendError,
    Purifier,
    PurifierVerdict,
    Reasoner,
    render_purifier_result,
)
from .grammar import (
    ForwardDependency,
    ParsedPlan,
    PlanEntry,
    PlanParseError,
    TagKind,
    Violation,
    contains_tag_token,
    find_placeholders,
    parse_plan_body,
    tag_name,
    tolerant_scan,
    validate_format,
)
from .retrieval import RetrievedDoc, Retriever

SINGLE_HOP = "single_hop"
MULTI_HOP = "multi_hop"

STATUS_PENDING = "pending"
STATUS_REFINED = "refined"
STATUS_SOLVED = "solved"
STATUS_EXHAUSTED = "unsolved_exhausted"


class PlanningError(RuntimeError):
    """A workflow operation was applied in a state that forbids it."""


class NoNextSubQuestion(PlanningError):
    pass


class RefinementContainsPlaceholder(PlanningError):
    pass


class RevisionBudgetExhausted(PlanningError):
    pass


class TrajectoryParseError(ValueError):
    def __init__(self, message: str, violations: Sequence[Violation] = ()):
        if violations:
            message = f"{message}: " + "; ".join(
                f"[c{violation.constraint_id}] {violation.message}" for violation in violations
            )
        super().__init__(message)
        self.violations = tuple(violations)


class ContextEntry(NamedTuple):
    sub_question: str
    answer: str
    info: str


class GlobalContext:
    """Append-only record of solved sub-questions and their evidence."""

    def __init__(self, entries: Iterable[ContextEntry] = ()):
        self._entries: list[ContextEntry] = list(entries)

    @property
    def entries(self) -> tuple[ContextEntry, ...]:
        return tuple(self._entries)

    def append(self, sub_question: str, answer: str, info: str = "") -> None:
        self._entries.append(ContextEntry(sub_question, answer, info))

    def __len__(self) -> int:
        return len(self._entries)

    def qa_pairs(self) -> list[tuple[str, str]]:
        return [(entry.sub_question, entry.answer) for entry in self._entries]


@dataclass(frozen=True)
class EpisodeConfig:
    max_retrieval_attempts: int = 3
    max_revisions: int = 1
    top_k: int = 5

    def __post_init__(self):
        if self.max_retrieval_attempts < 1:
            raise ValueError("max_retrieval_attempts must be at least 1")
        if self.max_revisions < 0:
            raise ValueError("max_revisions must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")

    def to_json_dict(self) -> dict:
        return {"K": self.max_retrieval_attempts, "M": self.max_revisions, "top_k": self.top_k}

    @classmethod
    def from_json_dict(cls, obj: dict) -> EpisodeConfig:
        return cls(
            max_retrieval_attempts=int(obj.get("K", 3)),
            max_revisions=int(obj.get("M", 1)),
            top_k=int(obj.get("top_k", 5)),
        )


@dataclass
class SubQuestion:
    index: int
    text: str
    status: str = STATUS_PENDING
    answer: str | None = None
    refined_text: str | None = None

    @property
    def effective_text(self) -> str:
        return self.refined_text if self.refined_text is not None else self.text


@dataclass
class Plan:
    sub_questions: list[SubQuestion]
    revision_count: int = 0

    @classmethod
    def from_parsed(cls, parsed: ParsedPlan) -> Plan:
        return cls([SubQuestion(entry.index, entry.text) for entry in parsed.sub_questions])

    def __len__(self) -> int:
        return len(self.sub_questions)

    def get(self, index: int) -> SubQuestion:
        if not 1 <= index <= len(self.sub_questions):
            raise NoNextSubQuestion(f"no sub-question with index {index}")
        return self.sub_questions[index - 1]


@dataclass(frozen=True)
class Think:
    text: str


@dataclass(frozen=True)
class InitialPlan:
    plan: ParsedPlan


@dataclass(frozen=True)
class ToolCall:
    query: str
    target_question: str


@dataclass(frozen=True)
class ToolResponse:
    verdict: PurifierVerdict
    docs: tuple[RetrievedDoc, ...] = ()


@dataclass(frozen=True)
class Refinement:
    index: int
    text: str


@dataclass(frozen=True)
class Revision:
    plan: ParsedPlan  # locally numbered replacement for the remaining sub-questions


@dataclass(frozen=True)
class SubAnswer:
    index: int
    text: str


@dataclass(frozen=True)
class Answer:
    text: str


Event = Union[Think, InitialPlan, ToolCall, ToolResponse, Refinement, Revision, SubAnswer, Answer]


@dataclass(frozen=True)
class Trajectory:
    question: str
    question_type: str
    events: tuple[Event, ...] = ()
    final_answer: str | None = None
    trajectory_id: str | None = None
    hop_hint: int | None = None
    config: EpisodeConfig = EpisodeConfig()


class RetrievalAttempt(NamedTuple):
    query: str
    info: str
    relevant: bool


class RetrievalOutcome(NamedTuple):
    status: str  # "success" or "failure"
    info: str | None
    attempts: tuple[RetrievalAttempt, ...]


def iterative_retrieval(
    target: str,
    context: GlobalContext,
    reasoner: Reasoner,
    purifier: Purifier,
    retriever: Retriever,
    max_attempts: int,
    *,
    top_k: int = 5,
    first_query: str | None = None,
    events: list[Event] | None = None,
) -> RetrievalOutcome:
    """Budgeted retrieve-and-purify loop for one target question.

    Stops at the first relevant verdict. The first attempt queries with
    ``first_query`` (falling back to the target verbatim); later attempts
    ask the reasoner to rewrite against the failure history. An empty
    retrieval result yields a synthesized irrelevant verdict without
    consulting the purifier, whose contract requires documents.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    if events is None:
        events = []
    attempts: list[RetrievalAttempt] = []
    failed_queries: list[str] = []
    for attempt in range(max_attempts):
        if attempt == 0:
            query = first_query if first_query else target
        else:
            rewrite = reasoner.rewrite_query(target, failed_queries, context)
            if rewrite.reason:
                events.append(Think(rewrite.reason))
            query = rewrite.new_query
        events.append(ToolCall(query, target))
        docs = tuple(retriever.retrieve(query, top_k))
        if docs:
            verdict = purifier.purify(target, docs)
        else:
            verdict = PurifierVerdict(
                relevant=False, summary="no documents retrieved", warning="empty_retrieval"
            )
        events.append(ToolResponse(verdict, docs))
        attempts.append(RetrievalAttempt(query, verdict.extracted_info, verdict.relevant))
        if verdict.relevant:
            return RetrievalOutcome("success", verdict.extracted_info, tuple(attempts))
        failed_queries.append(query)
    return RetrievalOutcome("failure", None, tuple(attempts))


def apply_refinement(plan: Plan, solved_index: int, refined_text: str) -> Plan:
    """Install the refined text of the sub-question after ``solved_index``.

    The refinement must be self-contained: any remaining placeholder
    raises RefinementContainsPlaceholder and leaves the plan untouched.
    """
    solved = plan.get(solved_index)
    if solved.status != STATUS_SOLVED:
        raise PlanningError(
            f"sub-question {solved_index} has status {solved.status}, expected {STATUS_SOLVED}"
        )
    if solved_index + 1 > len(plan):
        raise NoNextSubQuestion(f"sub-question {solved_index} is the last one")
    if find_placeholders(refined_text):
        raise RefinementContainsPlaceholder(
            f"refined text for sub-question {solved_index + 1} still contains placeholders"
        )
    target = plan.get(solved_index + 1)
    target.refined_text = refined_text
    target.status = STATUS_REFINED
    return plan


def apply_revision(plan: Plan, current_index: int, new_plan: ParsedPlan, max_revisions: int) -> Plan:
    """Replace sub-questions from ``current_index`` on with the revised list.

    The revised entries arrive locally numbered 1..m and are renumbered to
    continue the global sequence. Placeholder indices inside their text
    are NOT renumbered: they are read against the final renumbered plan,
    so small indices reach the preserved solved prefix. Each reference
    must point strictly before its own renumbered position.
    """
    if plan.revision_count >= max_revisions:
        raise RevisionBudgetExhausted(
            f"revision budget of {max_revisions} already spent"
        )
    current = plan.get(current_index)
    if current.status != STATUS_EXHAUSTED:
        raise PlanningError(
            f"sub-question {current_index} has status {current.status}, expected {STATUS_EXHAUSTED}"
        )
    if not new_plan.sub_questions:
        raise PlanParseError("revision plan is empty")
    replacement: list[SubQuestion] = []
    for entry in new_plan.sub_questions:
        global_index = current_index - 1 + entry.index
        for ref in find_placeholders(entry.text):
            if ref.index >= global_index:
                raise ForwardDependency(
                    f"revised sub-question {global_index} references index {ref.index},"
                    " which is not strictly earlier in the renumbered plan"
                )
        replacement.append(SubQuestion(global_index, entry.text))
    plan.sub_questions = plan.sub_questions[: current_index - 1] + replacement
    plan.revision_count += 1
    return plan


def run_episode(
    question: str,
    reasoner: Reasoner,
    purifier: Purifier,
    retriever: Retriever,
    cfg: EpisodeConfig | None = None,
    *,
    hop_hint: int | None = None,
    exhaust_policy: str = "answer_internally",
    force_question_type: str | None = None,
    trajectory_id: str | None = None,
) -> Trajectory:
    """Run one question through the full workflow and return its trajectory.

    ``exhaust_policy`` selects what happens when a sub-question exhausts
    both its retrieval budget and the revision budget: the inference
    workflow answers it from the reasoner's internal knowledge and keeps
    going; the synthesis pipeline passes "fail" to stop and return a
    trajectory with no final answer. ``force_question_type`` overrides the
    complexity assessment's routing (used when the dataset's hop count is
    authoritative); the assessment is still requested so its reasoning
    opens the trajectory. ``hop_hint`` is carried as metadata for reward
    scoring and never shown to any agent.

    A BackendError aborts the episode; the partial trajectory is attached
    to the exception as ``partial_trajectory`` before it propagates.
    """
    if cfg is None:
        cfg = EpisodeConfig()
    if exhaust_policy not in ("answer_internally", "fail"):
        raise ValueError(f"unknown exhaust_policy {exhaust_policy!r}")
    if force_question_type not in (None, SINGLE_HOP, MULTI_HOP):
        raise ValueError(f"unknown question type {force_question_type!r}")

    events: list[Event] = []
    question_type = force_question_type or SINGLE_HOP
    try:
        assessment = reasoner.assess_complexity(question)
        if assessment.reasoning:
            events.append(Think(assessment.reasoning))
        if assessment.question_type not in (SINGLE_HOP, MULTI_HOP):
            raise ValueError(f"assessment returned unknown type {assessment.question_type!r}")
        question_type = force_question_type or assessment.question_type
        if question_type == SINGLE_HOP:
            final = _run_single_hop(question, reasoner, purifier, retriever, cfg, exhaust_policy, events)
        else:
            final = _run_multi_hop(question, reasoner, purifier, retriever, cfg, exhaust_policy, events)
    except BackendError as error:
        error.partial_trajectory = Trajectory(
            question, question_type, tuple(events), None, trajectory_id, hop_hint, cfg
        )
        raise
    return Trajectory(question, question_type, tuple(events), final, trajectory_id, hop_hint, cfg)


def _run_single_hop(
    question: str,
    reasoner: Reasoner,
    purifier: Purifier,
    retriever: Retriever,
    cfg: EpisodeConfig,
    exhaust_policy: str,
    events: list[Event],
) -> str | None:
    context = GlobalContext()
    outcome = iterative_retrieval(
        question, context, reasoner, purifier, retriever,
        cfg.max_retrieval_attempts, top_k=cfg.top_k, events=events,
    )
    if outcome.status != "success" and exhaust_policy == "fail":
        return None
    answer = reasoner.answer_subquestion(question, outcome.info, context)
    events.append(Answer(answer))
    return answer


def _run_multi_hop(
    question: str,
    reasoner: Reasoner,
    purifier: Purifier,
    retriever: Retriever,
    cfg: EpisodeConfig,
    exhaust_policy: str,
    events: list[Event],
) -> str | None:
    rationale, parsed = reasoner.decompose(question)
    if rationale:
        events.append(Think(rationale))
    events.append(InitialPlan(parsed))
    plan = Plan.from_parsed(parsed)
    context = GlobalContext()

    index = 1
    while index <= len(plan):
        current = plan.get(index)
        target = current.effective_text
        decision = reasoner.decide_retrieval(question, context, target)
        if decision.reason:
            events.append(Think(decision.reason))
        info: str | None = None
        if decision.need_retrieval:
            outcome = iterative_retrieval(
                target, context, reasoner, purifier, retriever,
                cfg.max_retrieval_attempts, top_k=cfg.top_k,
                first_query=decision.query, events=events,
            )
            if outcome.status == "success":
                info = outcome.info
            else:
                current.status = STATUS_EXHAUSTED
                if plan.revision_count < cfg.max_revisions:
                    remaining = [sub.effective_text for sub in plan.sub_questions[index - 1 :]]
                    new_plan = reasoner.revise_plan(question, remaining, index, context)
                    apply_revision(plan, index, new_plan, cfg.max_revisions)
                    events.append(Revision(new_plan))
                    continue
                if exhaust_policy == "fail":
                    return None
                answer = reasoner.answer_subquestion(target, None, context)
                current.answer = answer
                events.append(SubAnswer(index, answer))
                context.append(target, answer, "")
                index += 1
                continue
        answer = reasoner.answer_subquestion(target, info, context)
        current.answer = answer
        current.status = STATUS_SOLVED
        events.append(SubAnswer(index, answer))
        context.append(target, answer, info or "")
        if index < len(plan):
            refined = reasoner.refine_subquestion(
                question, index + 1, plan.get(index + 1).effective_text, context
            )
            events.append(Refinement(index + 1, refined))
            try:
                apply_refinement(plan, index, refined)
            except RefinementContainsPlaceholder:
                # Recorded but not installed; the refinement reward reads
                # the event log and penalizes the leftover placeholder.
                pass
        index += 1

    final = reasoner.final_answer(question, context)
    events.append(Answer(final))
    return final


_QUESTION_HEADER = re.compile(r"Question: (.*)")
_SUB_ANSWER_LINE = re.compile(r"#A_([0-9]+): (.+)")
_WS = re.compile(r"\s+")


def _plan_body(plan: ParsedPlan) -> str:
    return "\n".join(f"#Q_{entry.index}: {entry.text}" for entry in plan.sub_questions)


def _check_body(body: str, what: str) -> str:
    if contains_tag_token(body):
        raise ValueError(f"{what} contains a tag token and cannot be serialized")
    return body


def serialize_trajectory(trajectory: Trajectory) -> str:
    """Render a trajectory in the canonical tag grammar.

    Raises ValueError when any body would confuse the tag scanner (a tag
    token inside free text) or the question is not a single line.
    """
    if "\n" in trajectory.question:
        raise ValueError("question must be a single line")
    blocks: list[str] = []
    for event in trajectory.events:
        if isinstance(event, Think):
            blocks.append(f"<think>{_check_body(event.text, 'think text')}</think>")
        elif isinstance(event, InitialPlan):
            blocks.append(f"<plan>\n{_check_body(_plan_body(event.plan), 'plan body')}\n</plan>")
        elif isinstance(event, ToolCall):
            payload = json.dumps(
                {"name": "search", "arguments": {"query": event.query, "question": event.target_question}},
                ensure_ascii=False,
            )
            blocks.append(f"<tool_call>\n{_check_body(payload, 'tool call')}\n</tool_call>")
        elif isinstance(event, ToolResponse):
            payload = json.dumps(
                {"result": render_purifier_result(event.verdict)}, ensure_ascii=False
            )
            blocks.append(f"<tool_response>\n{_check_body(payload, 'tool response')}\n</tool_response>")
        elif isinstance(event, Refinement):
            name = tag_name(TagKind.UPDATED_SUBQ, event.index)
            blocks.append(f"<{name}>{_check_body(event.text, 'refinement text')}</{name}>")
        elif isinstance(event, Revision):
            blocks.append(f"<replan>\n{_check_body(_plan_body(event.plan), 'replan body')}\n</replan>")
        elif isinstance(event, SubAnswer):
            text = _WS.sub(" ", event.text).strip()
            blocks.append(f"#A_{event.index}: {_check_body(text, 'sub-answer')}")
        elif isinstance(event, Answer):
            blocks.append(f"<answer>{_check_body(event.text, 'answer text')}</answer>")
        else:
            raise TypeError(f"unknown event type {type(event).__name__}")
    return "\n".join([f"Question: {trajectory.question}", ""] + blocks)


def _verdict_from_result(result: str) -> PurifierVerdict:
    if result.startswith(RELEVANT_MARKER):
        info = result[len(RELEVANT_MARKER) :].lstrip(" ")
        if info:
            return PurifierVerdict(True, extracted_info=info)
        return PurifierVerdict(False, summary="", warning="empty_extracted_info")
    if result.startswith(IRRELEVANT_MARKER):
        summary = result[len(IRRELEVANT_MARKER) :]
        return PurifierVerdict(False, summary=summary.lstrip("\n"))
    return PurifierVerdict(False, summary=result, warning="unrecognized_result")


def _tool_payload(span_body: str, keys: Sequence[str], offset: int) -> dict:
    try:
        payload = json.loads(span_body)
    except json.JSONDecodeError as error:
        raise TrajectoryParseError(f"tool body at offset {offset} is not valid JSON: {error}")
    for key_path in keys:
        node = payload
        for key in key_path.split("."):
            if not isinstance(node, dict) or key not in node:
                raise TrajectoryParseError(f"tool body at offset {offset} is missing {key_path!r}")
            node = node[key]
    return payload


def deserialize_trajectory(text: str, trajectory_id: str | None = None) -> Trajectory:
    """Parse canonical trajectory text back into an event log.

    The text must pass the format gate (the plan expectation is derived
    from whether a plan pair is present). Prose outside tags is dropped,
    except bare ``#A_<i>: `` lines, which become SubAnswer events.
    Documents attached to tool responses do not survive the text form.
    """
    header = _QUESTION_HEADER.match(text)
    if header is None:
        raise TrajectoryParseError("trajectory text must start with a 'Question: ' line")
    question = header.group(1).strip()
    body_start = header.end()

    spans, _ = tolerant_scan(text)
    expects_plan = any(span.kind is TagKind.PLAN for span in spans)
    report = validate_format(text, expects_plan=expects_plan)
    if not report.passed:
        raise TrajectoryParseError("trajectory text fails format validation", report.violations)

    events: list[Event] = []
    final_answer: str | None = None

    def harvest_gap(start: int, end: int) -> None:
        for line in text[start:end].split("\n"):
            match = _SUB_ANSWER_LINE.fullmatch(line.strip())
            if match:
                events.append(SubAnswer(int(match.group(1)), match.group(2).strip()))

    cursor = body_start
    for span in spans:
        harvest_gap(cursor, span.start)
        cursor = span.end
        if span.kind is TagKind.THINK:
            events.append(Think(span.body))
        elif span.kind is TagKind.PLAN:
            events.append(InitialPlan(_checked_plan(span.body, "initial", span.start)))
        elif span.kind is TagKind.REPLAN:
            events.append(Revision(_checked_plan(span.body, "revision", span.start)))
        elif span.kind is TagKind.TOOL_CALL:
            payload = _tool_payload(span.body, ("arguments.query", "arguments.question"), span.start)
            events.append(
                ToolCall(str(payload["arguments"]["query"]), str(payload["arguments"]["question"]))
            )
        elif span.kind is TagKind.TOOL_RESPONSE:
            payload = _tool_payload(span.body, ("result",), span.start)
            events.append(ToolResponse(_verdict_from_result(str(payload["result"]))))
        elif span.kind is TagKind.UPDATED_SUBQ:
            events.append(Refinement(span.index or 0, span.body.strip()))
        elif span.kind is TagKind.ANSWER:
            final_answer = span.body.strip()
            events.append(Answer(final_answer))
    harvest_gap(cursor, len(text))

    question_type = MULTI_HOP if expects_plan else SINGLE_HOP
    return Trajectory(question, question_type, tuple(events), final_answer, trajectory_id)


def _checked_plan(body: str, source: str, offset: int) -> ParsedPlan:
    try:
        return parse_plan_body(body, source)
    except PlanParseError as error:
        raise TrajectoryParseError(f"plan body at offset {offset} does not parse: {error}")


def _event_to_json(event: Event) -> dict:
    if isinstance(event, Think):
        return {"kind": "think", "text": event.text}
    if isinstance(event, InitialPlan):
        return {
            "kind": "initial_plan",
            "sub_questions": [{"index": e.index, "text": e.text} for e in event.plan.sub_questions],
        }
    if isinstance(event, ToolCall):
        return {"kind": "tool_call", "query": event.query, "target_question": event.target_question}
    if isinstance(event, ToolResponse):
        return {
            "kind": "tool_response",
            "verdict": event.verdict.to_json_dict(),
            "docs": [doc.to_json_dict() for doc in event.docs],
        }
    if isinstance(event, Refinement):
        return {"kind": "refinement", "index": event.index, "text": event.text}
    if isinstance(event, Revision):
        return {
            "kind": "revision",
            "sub_questions": [{"index": e.index, "text": e.text} for e in event.plan.sub_questions],
        }
    if isinstance(event, SubAnswer):
        return {"kind": "sub_answer", "index": event.index, "text": event.text}
    if isinstance(event, Answer):
        return {"kind": "answer", "text": event.text}
    raise TypeError(f"unknown event type {type(event).__name__}")


def _plan_from_json(entries: list, source: str) -> ParsedPlan:
    return ParsedPlan(
        tuple(PlanEntry(int(e["index"]), str(e["text"])) for e in entries), source
    )


def _event_from_json(obj: dict) -> Event:
    kind = obj["kind"]
    if kind == "think":
        return Think(obj["text"])
    if kind == "initial_plan":
        return InitialPlan(_plan_from_json(obj["sub_questions"], "initial"))
    if kind == "tool_call":
        return ToolCall(obj["query"], obj["target_question"])
    if kind == "tool_response":
        return ToolResponse(
            PurifierVerdict.from_json_dict(obj["verdict"]),
            tuple(RetrievedDoc.from_json_dict(doc) for doc in obj.get("docs", ())),
        )
    if kind == "refinement":
        return Refinement(int(obj["index"]), obj["text"])
    if kind == "revision":
        return Revision(_plan_from_json(obj["sub_questions"], "revision"))
    if kind == "sub_answer":
        return SubAnswer(int(obj["index"]), obj["text"])
    if kind == "answer":
        return Answer(obj["text"])
    raise TrajectoryParseError(f"unknown event kind {kind!r}")


def trajectory_to_json_dict(trajectory: Trajectory) -> dict:
    obj: dict = {
        "id": trajectory.trajectory_id,
        "question": trajectory.question,
        "question_type": trajectory.question_type,
        "events": [_event_to_json(event) for event in trajectory.events],
        "config": trajectory.config.to_json_dict(),
    }
    if trajectory.hop_hint is not None:
        obj["hop_hint"] = trajectory.hop_hint
    if trajectory.final_answer is not None:
        obj["final_answer"] = trajectory.final_answer
    return obj


def trajectory_from_json_dict(obj: dict) -> Trajectory:
    events = tuple(_event_from_json(e) for e in obj.get("events", ()))
    question_type = obj.get("question_type")
    if question_type is None:
        question_type = MULTI_HOP if any(isinstance(e, InitialPlan) for e in events) else SINGLE_HOP
    return Trajectory(
        question=obj["question"],
        question_type=question_type,
        events=events,
        final_answer=obj.get("final_answer"),
        trajectory_id=obj.get("id"),
        hop_hint=obj.get("hop_hint"),
        config=EpisodeConfig.from_json_dict(obj.get("config", {})),
    )


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for trajectory in trajectories:
            handle.write(json.dumps(trajectory_to_json_dict(trajectory), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_trajectories(path: str | Path) -> Iterator[Trajectory]:
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                yield trajectory_from_json_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as error:
                raise TrajectoryParseError(f"line {line_no}: {error}")
