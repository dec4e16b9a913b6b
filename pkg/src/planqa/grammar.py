"""Trajectory tag grammar: scanning, plan parsing, and format validation.

Reasoning trajectories are plain text interleaved with a small set of
XML-ish tags: ``<plan>``, ``<replan>``, ``<answer>``, ``<think>``,
``<tool_call>``, ``<tool_response>`` and the refinement form
``<Updated_#Q_i>``. Tag names match case-insensitively; canonical output
uses lowercase names except the mixed-case ``Updated_#Q_i``. Tags never
nest: once a tag opens, everything up to its matching close tag is an
opaque body, so JSON payloads inside tool tags need no escaping.

Plan bodies hold one sub-question per line in the exact form
``#Q_<i>: text`` (a single space after the colon, no space before it).
Placeholders ``#Q_<j>`` / ``#A_<j>`` inside sub-question text refer to
earlier sub-questions and their answers; a sub-question may only point
backwards.

Offsets throughout this module are Python string (character) offsets into
the source text, half-open.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple


class TagKind(str, Enum):
    PLAN = "plan"
    REPLAN = "replan"
    UPDATED_SUBQ = "updated_subq"
    TOOL_CALL = "tool_call"
    TOOL_RESPONSE = "tool_response"
    ANSWER = "answer"
    THINK = "think"


_TAG_TOKEN = re.compile(
    r"</?(?:plan|replan|answer|think|tool_call|tool_response|updated_#q_[0-9]+)>",
    re.IGNORECASE,
)
_PLACEHOLDER = re.compile(r"#([QA])_([0-9]+)")
_SUBQ_LINE = re.compile(r"#Q_([0-9]+): (.+)")


class GrammarError(ValueError):
    """Base class for trajectory grammar failures."""


class UnbalancedTag(GrammarError):
    def __init__(self, tag_name: str, offset: int, detail: str = "no matching close tag"):
        super().__init__(f"tag '{tag_name}' at offset {offset}: {detail}")
        self.tag_name = tag_name
        self.offset = offset


class OverlappingTags(GrammarError):
    def __init__(self, tag_name: str, offset: int):
        super().__init__(
            f"close tag '{tag_name}' at offset {offset} interleaves with an earlier tag pair"
        )
        self.tag_name = tag_name
        self.offset = offset


class PlanParseError(GrammarError):
    """Base class for plan-body failures."""


class GapInIndices(PlanParseError):
    pass


class DuplicateIndex(PlanParseError):
    pass


class ForwardDependency(PlanParseError):
    pass


class EmptyPlan(PlanParseError):
    pass


class MissingAnswer(GrammarError):
    pass


class MalformedRefinementTag(GrammarError):
    pass


class PlaceholderRef(NamedTuple):
    kind: str  # "question" or "answer"
    index: int


class PlanEntry(NamedTuple):
    index: int
    text: str


@dataclass(frozen=True)
class TagSpan:
    """One matched open/close tag pair.

    ``start``/``end`` delimit the whole span including both tags, so the
    range is never empty even for an empty body; ``body_start``/``body_end``
    delimit the body slice.
    """

    kind: TagKind
    body: str
    start: int
    end: int
    body_start: int
    body_end: int
    index: int | None = None

    @property
    def byte_range(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def body_range(self) -> tuple[int, int]:
        return (self.body_start, self.body_end)


@dataclass(frozen=True)
class ParsedPlan:
    """An ordered list of sub-questions from a plan or replan body."""

    sub_questions: tuple[PlanEntry, ...]
    source: str = "initial"  # "initial" or "revision"

    def __len__(self) -> int:
        return len(self.sub_questions)

    def texts(self) -> list[str]:
        return [entry.text for entry in self.sub_questions]


@dataclass(frozen=True)
class Violation:
    constraint_id: int
    message: str
    byte_range: tuple[int, int] | None = None


@dataclass(frozen=True)
class FormatReport:
    passed: bool
    violations: tuple[Violation, ...] = ()

    def constraint_ids(self) -> set[int]:
        return {violation.constraint_id for violation in self.violations}


class _Token(NamedTuple):
    kind: TagKind
    index: int | None
    is_close: bool
    start: int
    end: int


class ScanProblem(NamedTuple):
    kind: TagKind
    index: int | None
    offset: int
    reason: str  # "unclosed", "stray_close", "interleaved"


def tag_name(kind: TagKind, index: int | None = None) -> str:
    if kind is TagKind.UPDATED_SUBQ:
        return f"Updated_#Q_{index}"
    return kind.value


def contains_tag_token(text: str) -> bool:
    """True when the text holds anything the scanner would read as a tag."""
    return _TAG_TOKEN.search(text) is not None


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    for match in _TAG_TOKEN.finditer(source):
        text = match.group(0)
        is_close = text[1] == "/"
        inner = text[2:-1] if is_close else text[1:-1]
        lowered = inner.lower()
        if lowered.startswith("updated_#q_"):
            kind = TagKind.UPDATED_SUBQ
            index: int | None = int(lowered.rsplit("_", 1)[1])
        else:
            kind = TagKind(lowered)
            index = None
        tokens.append(_Token(kind, index, is_close, match.start(), match.end()))
    return tokens


def tolerant_scan(source: str) -> tuple[list[TagSpan], list[ScanProblem]]:
    """Scan for tag spans, collecting problems instead of raising.

    Bodies are opaque: after an open tag the scanner looks only for the
    matching close tag, so tag-looking text inside a body is swallowed.
    An unclosed open tag is skipped (scanning resumes right after it) so
    later tags are still recovered.
    """
    tokens = _tokenize(source)
    spans: list[TagSpan] = []
    problems: list[ScanProblem] = []
    swallowed: list[_Token] = []
    ti = 0
    while ti < len(tokens):
        token = tokens[ti]
        if token.is_close:
            match_pos = next(
                (
                    n
                    for n, open_token in enumerate(swallowed)
                    if open_token.kind == token.kind and open_token.index == token.index
                ),
                None,
            )
            if match_pos is not None:
                del swallowed[match_pos]
                problems.append(ScanProblem(token.kind, token.index, token.start, "interleaved"))
            else:
                problems.append(ScanProblem(token.kind, token.index, token.start, "stray_close"))
            ti += 1
            continue
        close_at = next(
            (
                j
                for j in range(ti + 1, len(tokens))
                if tokens[j].is_close
                and tokens[j].kind == token.kind
                and tokens[j].index == token.index
            ),
            None,
        )
        if close_at is None:
            problems.append(ScanProblem(token.kind, token.index, token.start, "unclosed"))
            ti += 1
            continue
        close = tokens[close_at]
        swallowed.extend(t for t in tokens[ti + 1 : close_at] if not t.is_close)
        spans.append(
            TagSpan(
                kind=token.kind,
                body=source[token.end : close.start],
                start=token.start,
                end=close.end,
                body_start=token.end,
                body_end=close.start,
                index=token.index,
            )
        )
        ti = close_at + 1
    return spans, problems


def scan_tags(source: str) -> list[TagSpan]:
    """Return all well-formed tag spans in document order.

    Raises UnbalancedTag for an unclosed open tag or a stray close tag,
    OverlappingTags for interleaved pairs.
    """
    spans, problems = tolerant_scan(source)
    if problems:
        problem = problems[0]
        name = tag_name(problem.kind, problem.index)
        if problem.reason == "interleaved":
            raise OverlappingTags(name, problem.offset)
        detail = "no matching close tag" if problem.reason == "unclosed" else "close tag without a matching open tag"
        raise UnbalancedTag(name, problem.offset, detail)
    return spans


def find_placeholders(text: str) -> list[PlaceholderRef]:
    """Every ``#Q_<i>`` / ``#A_<i>`` occurrence, left-to-right, duplicates kept.

    The marker is case-sensitive and indices start at 1; a zero index is
    not a placeholder.
    """
    refs: list[PlaceholderRef] = []
    for match in _PLACEHOLDER.finditer(text):
        index = int(match.group(2))
        if index < 1:
            continue
        kind = "question" if match.group(1) == "Q" else "answer"
        refs.append(PlaceholderRef(kind, index))
    return refs


def parse_plan_body(body: str, source: str = "initial") -> ParsedPlan:
    """Parse sub-question lines out of a plan or replan body.

    Lines that do not match ``#Q_<i>: text`` exactly are rationale and are
    ignored. Indices must be exactly 1..n in any order; placeholders may
    only reference strictly earlier sub-questions.
    """
    entries: list[PlanEntry] = []
    for raw_line in body.split("\n"):
        match = _SUBQ_LINE.fullmatch(raw_line.strip())
        if match:
            entries.append(PlanEntry(int(match.group(1)), match.group(2).strip()))
    if not entries:
        raise EmptyPlan(f"{source} plan body contains no '#Q_<i>: ' lines")
    indices = [entry.index for entry in entries]
    if len(set(indices)) != len(indices):
        dupes = sorted({i for i in indices if indices.count(i) > 1})
        raise DuplicateIndex(f"duplicate sub-question indices {dupes}")
    if sorted(indices) != list(range(1, len(indices) + 1)):
        raise GapInIndices(f"sub-question indices {sorted(indices)} are not exactly 1..{len(indices)}")
    entries.sort(key=lambda entry: entry.index)
    for entry in entries:
        for ref in find_placeholders(entry.text):
            if ref.index >= entry.index:
                raise ForwardDependency(
                    f"sub-question {entry.index} references #{'QA'[ref.kind == 'answer']}_{ref.index},"
                    " which is not strictly earlier"
                )
    return ParsedPlan(tuple(entries), source)


def parse_plan(span: TagSpan) -> ParsedPlan:
    """Parse a plan or replan TagSpan into a ParsedPlan."""
    if span.kind not in (TagKind.PLAN, TagKind.REPLAN):
        raise ValueError(f"expected a plan or replan span, got {span.kind.value}")
    source = "initial" if span.kind is TagKind.PLAN else "revision"
    return parse_plan_body(span.body, source)


_PROBLEM_CONSTRAINT = {
    TagKind.ANSWER: 1,
    TagKind.PLAN: 2,
    TagKind.UPDATED_SUBQ: 4,
    TagKind.REPLAN: 5,
}


def validate_format(source: str, expects_plan: bool) -> FormatReport:
    """Check the five output-format constraints, in order.

    1. exactly one ``<answer>`` pair;
    2. when a plan is expected, exactly one ``<plan>`` pair (a second pair
       is always a violation: revisions must use ``<replan>``);
    3. every plan/replan body parses as sub-question lines;
    4. refinement tags are well-formed ``Updated_#Q_i`` pairs;
    5. revision tags are well-formed ``<replan>`` pairs.

    Violations are reported, never raised; tags outside the five
    constraints (think/tool tags) do not gate.
    """
    spans, problems = tolerant_scan(source)
    violations: list[Violation] = []

    answers = [span for span in spans if span.kind is TagKind.ANSWER]
    if len(answers) != 1:
        where = answers[1].byte_range if len(answers) > 1 else None
        violations.append(
            Violation(1, f"expected exactly one answer tag pair, found {len(answers)}", where)
        )

    plans = [span for span in spans if span.kind is TagKind.PLAN]
    if expects_plan and not plans:
        violations.append(Violation(2, "multi-hop output must contain a plan tag pair"))
    if len(plans) > 1:
        violations.append(
            Violation(
                2,
                f"found {len(plans)} plan pairs; revised plans must use replan tags",
                plans[1].byte_range,
            )
        )

    for problem in problems:
        constraint = _PROBLEM_CONSTRAINT.get(problem.kind)
        if constraint is None:
            continue
        name = tag_name(problem.kind, problem.index)
        violations.append(
            Violation(
                constraint,
                f"tag '{name}' is not a balanced pair ({problem.reason})",
                (problem.offset, problem.offset),
            )
        )

    for span in spans:
        if span.kind in (TagKind.PLAN, TagKind.REPLAN):
            try:
                parse_plan(span)
            except PlanParseError as error:
                violations.append(
                    Violation(3, f"{type(error).__name__}: {error}", span.body_range)
                )

    for span in spans:
        if span.kind is TagKind.UPDATED_SUBQ and (span.index is None or span.index < 1):
            violations.append(
                Violation(4, f"refinement tag index must be >= 1, got {span.index}", span.byte_range)
            )

    violations.sort(key=lambda violation: violation.constraint_id)
    return FormatReport(passed=not violations, violations=tuple(violations))


def extract_answer(source: str) -> str:
    """Body of the first balanced answer pair, stripped.

    Intended for sources that already passed validate_format (then the
    pair is unique); raises MissingAnswer when no balanced pair exists.
    """
    spans, _ = tolerant_scan(source)
    for span in spans:
        if span.kind is TagKind.ANSWER:
            return span.body.strip()
    raise MissingAnswer("no balanced answer tag pair in source")


def extract_refinements(source: str) -> list[tuple[int, str]]:
    """All (index, text) refinement spans in order of appearance.

    Tolerates partial trajectories; raises MalformedRefinementTag when a
    refinement tag fails to pair up.
    """
    spans, problems = tolerant_scan(source)
    for problem in problems:
        if problem.kind is TagKind.UPDATED_SUBQ:
            raise MalformedRefinementTag(
                f"refinement tag at offset {problem.offset} is {problem.reason}"
            )
    return [
        (span.index, span.body.strip())
        for span in spans
        if span.kind is TagKind.UPDATED_SUBQ and span.index is not None
    ]


def extract_revisions(source: str) -> list[ParsedPlan]:
    """All replan bodies parsed as revision plans, in order. Parse errors propagate."""
    spans, _ = tolerant_scan(source)
    return [parse_plan(span) for span in spans if span.kind is TagKind.REPLAN]
