"""Deterministic agent implementations for tests and offline runs.

ScriptedReasoner/ScriptedPurifier replay pre-recorded behavior and fail
loudly when the script runs out, which keeps workflow tests honest about
exactly how many agent calls an episode makes. RuleReasoner/RulePurifier
are self-contained heuristics with no script: same inputs, same outputs,
so CLI runs in mock mode are reproducible byte for byte.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .agents import (
    ChatBackend,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    ComplexityAssessment,
    PurifierVerdict,
    QueryRewrite,
    RetrievalDecision,
    ScriptExhausted,
)
from .grammar import ParsedPlan, PlanEntry, find_placeholders
from .retrieval import RetrievedDoc, tokenize

if TYPE_CHECKING:
    from .planning import GlobalContext


def make_plan(texts: Sequence[str], source: str = "initial") -> ParsedPlan:
    return ParsedPlan(
        sub_questions=tuple(PlanEntry(i, text) for i, text in enumerate(texts, 1)),
        source=source,
    )


class ScriptedReasoner:
    """Replays queued return values per method; raises ScriptExhausted past the end."""

    _METHODS = (
        "assess_complexity",
        "decompose",
        "decide_retrieval",
        "rewrite_query",
        "answer_subquestion",
        "refine_subquestion",
        "revise_plan",
        "final_answer",
        "rewrite_trajectory",
    )

    def __init__(self, **scripts: Iterable):
        unknown = set(scripts) - set(self._METHODS)
        if unknown:
            raise ValueError(f"unknown scripted methods: {sorted(unknown)}")
        self._scripts = {name: deque(scripts.get(name, ())) for name in self._METHODS}
        self.calls: list[tuple[str, tuple]] = []

    def _next(self, method: str, *args):
        self.calls.append((method, args))
        queue = self._scripts[method]
        if not queue:
            raise ScriptExhausted(f"no scripted value left for {method}")
        value = queue.popleft()
        if isinstance(value, Exception):
            raise value
        return value

    def assess_complexity(self, question: str) -> ComplexityAssessment:
        return self._next("assess_complexity", question)

    def decompose(self, question: str) -> tuple[str, ParsedPlan]:
        return self._next("decompose", question)

    def decide_retrieval(self, question, context, sub_question) -> RetrievalDecision:
        return self._next("decide_retrieval", question, sub_question)

    def rewrite_query(self, target, failed_queries, context) -> QueryRewrite:
        return self._next("rewrite_query", target, tuple(failed_queries))

    def answer_subquestion(self, sub_question, info, context) -> str:
        return self._next("answer_subquestion", sub_question, info)

    def refine_subquestion(self, question, index, text, context) -> str:
        return self._next("refine_subquestion", question, index, text)

    def revise_plan(self, question, remaining, current_index, context) -> ParsedPlan:
        return self._next("revise_plan", question, tuple(remaining), current_index)

    def final_answer(self, question, context) -> str:
        return self._next("final_answer", question)

    def rewrite_trajectory(self, trajectory_text: str) -> str:
        return self._next("rewrite_trajectory", trajectory_text)


class ScriptedPurifier:
    def __init__(self, verdicts: Iterable[PurifierVerdict]):
        self._verdicts = deque(verdicts)
        self.calls: list[tuple[str, tuple[str, ...]]] = []

    def purify(self, target_question: str, docs: Sequence[RetrievedDoc]) -> PurifierVerdict:
        self.calls.append((target_question, tuple(doc.doc_id for doc in docs)))
        if not self._verdicts:
            raise ScriptExhausted("no scripted verdict left")
        return self._verdicts.popleft()


def irrelevant_summary(docs: Sequence[RetrievedDoc], limit: int = 60) -> str:
    """Summary lines in the canonical '[Doc i]: ...' shape."""
    lines = []
    for i, doc in enumerate(docs, 1):
        snippet = " ".join(doc.contents.split())[:limit].strip() or "no content"
        lines.append(f"[Doc {i}]: {snippet}")
    return "\n".join(lines)


_PLACEHOLDER_TOKEN = re.compile(r"#A_([0-9]+)")
_HOP_WORDS = 12


@dataclass
class RuleReasoner:
    """Heuristic reasoner with no model behind it.

    Complexity is judged by question length alone (long questions count
    as multi-hop); plans are a fixed two-step decomposition. Answers echo
    a prefix of the extracted info, so downstream metrics see realistic
    strings without any randomness.
    """

    plan_size: int = 2
    answer_words: int = 6

    def assess_complexity(self, question: str) -> ComplexityAssessment:
        words = len(question.split())
        kind = "multi_hop" if words >= _HOP_WORDS else "single_hop"
        return ComplexityAssessment(
            f"The question has {words} words; treating it as {kind.replace('_', '-')}.", kind
        )

    def decompose(self, question: str) -> tuple[str, ParsedPlan]:
        base = question.rstrip("?. ")
        texts = [f"Identify the key entity in: {base}?"]
        for step in range(2, self.plan_size + 1):
            texts.append(f"Using #A_{step - 1}, answer: {base}?")
        return "", make_plan(texts)

    def decide_retrieval(self, question, context, sub_question) -> RetrievalDecision:
        return RetrievalDecision(True, "external facts required", sub_question)

    def rewrite_query(self, target, failed_queries, context) -> QueryRewrite:
        return QueryRewrite(
            "broaden the phrasing", f"{target} (attempt {len(failed_queries) + 1})"
        )

    def answer_subquestion(self, sub_question, info, context) -> str:
        source = info if info else sub_question
        return " ".join(source.split()[: self.answer_words])

    def refine_subquestion(self, question, index, text, context) -> str:
        resolved = text
        for ref in find_placeholders(text):
            if ref.kind == "A" and ref.index <= len(context.entries):
                resolved = resolved.replace(
                    f"#A_{ref.index}", context.entries[ref.index - 1].answer
                )
        return resolved

    def revise_plan(self, question, remaining, current_index, context) -> ParsedPlan:
        texts = [f"{text.rstrip('?. ')} (revised)?" for text in remaining]
        return make_plan(texts, source="revision")

    def final_answer(self, question, context) -> str:
        if context.entries:
            return context.entries[-1].answer
        return "unknown"

    def rewrite_trajectory(self, trajectory_text: str) -> str:
        return trajectory_text


@dataclass
class RulePurifier:
    """Lexical-overlap relevance rule: a doc is relevant when it shares at
    least ``min_overlap`` content tokens with the target question."""

    min_overlap: int = 2
    extract_words: int = 30

    def purify(self, target_question: str, docs: Sequence[RetrievedDoc]) -> PurifierVerdict:
        query_tokens = tokenize(target_question)
        best: RetrievedDoc | None = None
        best_overlap = 0
        for doc in docs:
            overlap = len(query_tokens & tokenize(doc.contents))
            if overlap > best_overlap:
                best, best_overlap = doc, overlap
        if best is not None and best_overlap >= self.min_overlap:
            info = " ".join(best.contents.split()[: self.extract_words])
            return PurifierVerdict(True, extracted_info=info)
        return PurifierVerdict(False, summary=irrelevant_summary(docs))


class VerdictListPurifier:
    """Plays a fixed relevance pattern, synthesizing verdict payloads from the docs."""

    def __init__(self, pattern: Iterable[bool], default: bool = False, extract_words: int = 30):
        self._pattern = deque(pattern)
        self._default = default
        self._extract_words = extract_words
        self.calls: list[str] = []

    def purify(self, target_question: str, docs: Sequence[RetrievedDoc]) -> PurifierVerdict:
        self.calls.append(target_question)
        relevant = self._pattern.popleft() if self._pattern else self._default
        if relevant:
            info = " ".join(docs[0].contents.split()[: self._extract_words]) if docs else "fact"
            return PurifierVerdict(True, extracted_info=info)
        return PurifierVerdict(False, summary=irrelevant_summary(docs) or "[Doc 1]: none")


_LLM_ANSWER = re.compile(r"^LLM answer: (.*)$", re.MULTILINE)
_REFERENCE_ANSWER = re.compile(r"^Reference answer: (.*)$", re.MULTILINE)


class EmJudgeBackend:
    """Chat backend that stands in for a judge model.

    Answer-evaluation prompts get Yes/No by normalized exact match of the
    quoted answers; error-classification prompts get a fixed Type 4 JSON.
    """

    model_id = "em-judge"

    def __init__(self):
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        from .textnorm import normalize_answer

        self.requests.append(request)
        text = request.messages[-1].content
        if '"error_type"' in text or "error_type" in text:
            return ChatResponse(
                json.dumps({"analysis": "defaulting to hallucination", "error_type": "Type 4"})
            )
        llm = _LLM_ANSWER.search(text)
        ref = _REFERENCE_ANSWER.search(text)
        if llm is None or ref is None:
            raise ScriptExhausted("judge prompt missing answer lines")
        same = normalize_answer(llm.group(1)) == normalize_answer(ref.group(1))
        return ChatResponse("Yes" if same else "No")


class MockJudgeBackend:
    """Replays scripted judge replies; falls back to EmJudgeBackend when empty."""

    model_id = "mock-judge"

    def __init__(self, replies: Iterable[str] = ()):
        self._replies = deque(replies)
        self._fallback = EmJudgeBackend()

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self._replies:
            return ChatResponse(self._replies.popleft())
        return self._fallback.complete(request)
