"""Agent wire contracts and the prompt-driven operations built on them.

Two layers live here. The bottom layer is the chat wire contract
(ChatRequest/ChatResponse plus scripted and HTTP backends) and the JSON
parsing operations (purify, decide_retrieval, rewrite_query), each of
which retries a malformed reply once with a corrective instruction before
raising. The top layer is the behavioral contracts the episode engine
drives (Reasoner, Purifier) together with chat-backed adapters that
implement them via the bundled prompt templates.
"""

from __future__ import annotations

import json
import os
import re
import time
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, NamedTuple, Protocol, Sequence

import requests

from .grammar import (
    ParsedPlan,
    TagKind,
    parse_plan_body,
    tolerant_scan,
    EmptyPlan,
    PlanParseError,
)
from .prompts import render_prompt
from .retrieval import RetrievedDoc

if TYPE_CHECKING:
    from .planning import GlobalContext

RELEVANT_MARKER = "[TARGET_INFO_EXTRACTED]"
IRRELEVANT_MARKER = "[NO_TARGET_INFO_FOUND]"

_DOC_SUMMARY_LINE = re.compile(r"\[Doc [0-9]+\]: .+")


class BackendError(RuntimeError):
    """An agent backend failed in a way the caller cannot recover from."""

    source = "backend"

    def __init__(self, detail: str, source: str | None = None):
        if source is not None:
            self.source = source
        super().__init__(f"{self.source}: {detail}")
        self.detail = detail


class ScriptExhausted(BackendError):
    source = "scripted_backend"


class ChatEndpointError(BackendError):
    source = "chat_endpoint"


class MalformedVerdict(BackendError):
    source = "purifier"


class MalformedDecision(BackendError):
    source = "retrieval_decision"


class MalformedRewrite(BackendError):
    source = "query_rewrite"


class DuplicateQuery(BackendError):
    source = "query_rewrite"


class MalformedPlan(BackendError):
    source = "reasoner"


class TokenUsage(NamedTuple):
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ValueError("ChatRequest requires at least one message")
        for message in self.messages:
            if message.role not in ("system", "user", "assistant", "tool"):
                raise ValueError(f"invalid message role {message.role!r}")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be a system or user message")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    token_usage: TokenUsage = TokenUsage()


class ChatBackend(Protocol):
    model_id: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


class ScriptedChatBackend:
    """Replays a fixed list of responses and records every request."""

    def __init__(self, script: Iterable[ChatResponse | str], model_id: str = "scripted"):
        self.model_id = model_id
        self._script = deque(
            item if isinstance(item, ChatResponse) else ChatResponse(item) for item in script
        )
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        if not self._script:
            raise ScriptExhausted(f"script exhausted after {len(self.requests) - 1} responses")
        return self._script.popleft()


class HttpChatBackend:
    """OpenAI-style chat-completion client.

    Bearer-token auth comes from an environment variable (never from
    config files); transient failures retry with exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        model_id: str,
        timeout: float = 60.0,
        retries: int = 2,
        backoff: float = 0.5,
        token_env: str = "PLANQA_API_TOKEN",
        path: str = "/v1/chat/completions",
        session: requests.Session | None = None,
    ):
        self.model_id = model_id
        self._url = base_url.rstrip("/") + path
        self._timeout = timeout
        self._retries = retries
        self._backoff = backoff
        self._token_env = token_env
        self._session = session or requests.Session()

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {}
        token = os.environ.get(self._token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self._retries + 1):
            try:
                response = self._session.post(
                    self._url, json=payload, headers=headers, timeout=self._timeout
                )
                response.raise_for_status()
                body = response.json()
                choice = body["choices"][0]
                usage = body.get("usage", {})
                return ChatResponse(
                    content=choice["message"]["content"],
                    finish_reason=choice.get("finish_reason", "stop"),
                    token_usage=TokenUsage(
                        usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)
                    ),
                )
            except (requests.RequestException, KeyError, IndexError, ValueError) as error:
                last_error = error
                if attempt < self._retries:
                    time.sleep(self._backoff * (2**attempt))
        raise ChatEndpointError(f"chat endpoint {self._url} failed: {last_error}")


def first_json_object(text: str) -> dict | None:
    """Parse the first balanced ``{...}`` object in a reply, tolerating prose around it."""
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for pos, char in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"' and depth > 0:
            in_string = True
        elif char == "{":
            if depth == 0:
                start = pos
            depth += 1
        elif char == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                try:
                    obj = json.loads(text[start : pos + 1])
                except json.JSONDecodeError:
                    return None
                return obj if isinstance(obj, dict) else None
    return None


@dataclass(frozen=True)
class PurifierVerdict:
    """The purifier's relevance judgment over one retrieval batch.

    Exactly one of extracted_info / summary is populated: a relevant
    verdict carries facts, an irrelevant one carries per-document
    summaries. ``warning`` flags degraded verdicts synthesized by the
    workflow (unparseable output, empty retrieval).
    """

    relevant: bool
    extracted_info: str = ""
    summary: str = ""
    warning: str | None = None

    def __post_init__(self):
        if self.relevant and (not self.extracted_info or self.summary):
            raise ValueError("relevant verdict requires extracted_info and an empty summary")
        if not self.relevant and self.extracted_info:
            raise ValueError("irrelevant verdict must leave extracted_info empty")

    def to_json_dict(self) -> dict:
        obj: dict = {
            "relevant": self.relevant,
            "extracted_info": self.extracted_info,
            "summary": self.summary,
        }
        if self.warning is not None:
            obj["warning"] = self.warning
        return obj

    @classmethod
    def from_json_dict(cls, obj: dict) -> PurifierVerdict:
        return cls(
            relevant=bool(obj["relevant"]),
            extracted_info=str(obj.get("extracted_info", "")),
            summary=str(obj.get("summary", "")),
            warning=obj.get("warning"),
        )


@dataclass(frozen=True)
class RetrievalDecision:
    need_retrieval: bool
    reason: str = ""
    query: str | None = None

    def __post_init__(self):
        if self.need_retrieval and not self.query:
            raise ValueError("a decision to retrieve must carry a non-empty query")
        if not self.need_retrieval and self.query is not None:
            raise ValueError("a decision not to retrieve must leave the query unset")


@dataclass(frozen=True)
class QueryRewrite:
    reason: str
    new_query: str


class ComplexityAssessment(NamedTuple):
    reasoning: str
    question_type: str  # "single_hop" or "multi_hop"


class Purifier(Protocol):
    def purify(self, target_question: str, docs: Sequence[RetrievedDoc]) -> PurifierVerdict: ...


class Reasoner(Protocol):
    """Everything the episode engine asks of the planning agent."""

    def assess_complexity(self, question: str) -> ComplexityAssessment: ...

    def decompose(self, question: str) -> tuple[str, ParsedPlan]: ...

    def decide_retrieval(
        self, question: str, context: "GlobalContext", sub_question: str
    ) -> RetrievalDecision: ...

    def rewrite_query(
        self, target: str, failed_queries: Sequence[str], context: "GlobalContext"
    ) -> QueryRewrite: ...

    def answer_subquestion(
        self, sub_question: str, info: str | None, context: "GlobalContext"
    ) -> str: ...

    def refine_subquestion(
        self, question: str, index: int, text: str, context: "GlobalContext"
    ) -> str: ...

    def revise_plan(
        self,
        question: str,
        remaining: Sequence[str],
        current_index: int,
        context: "GlobalContext",
    ) -> ParsedPlan: ...

    def final_answer(self, question: str, context: "GlobalContext") -> str: ...

    def rewrite_trajectory(self, trajectory_text: str) -> str: ...


def format_docs(docs: Sequence[RetrievedDoc]) -> str:
    return "\n".join(
        f'Doc {i}(Title: "{doc.title}") {doc.contents}' for i, doc in enumerate(docs, 1)
    )


def render_purifier_prompt(target_question: str, docs: Sequence[RetrievedDoc]) -> str:
    return render_prompt("purifier", query=target_question, docs_text=format_docs(docs))


def render_purifier_result(verdict: PurifierVerdict) -> str:
    """Canonical tool-response text for a verdict."""
    if verdict.relevant:
        return f"{RELEVANT_MARKER} {verdict.extracted_info}"
    return f"{IRRELEVANT_MARKER}\n{verdict.summary}"


def _request(backend: ChatBackend, messages: list[ChatMessage]) -> ChatRequest:
    return ChatRequest(model_id=getattr(backend, "model_id", "default"), messages=tuple(messages))


_JSON_CORRECTION = (
    "Your previous reply was not a single valid JSON object with the required fields. "
    "Output ONLY the JSON object, nothing else."
)


def _json_call(backend: ChatBackend, prompt: str, validate) -> tuple[object | None, str]:
    """One prompt, one corrective retry. Returns (value, last_error)."""
    messages = [ChatMessage("user", prompt)]
    last_error = "no response"
    for _ in range(2):
        response = backend.complete(_request(backend, messages))
        obj = first_json_object(response.content)
        if obj is None:
            last_error = "reply contained no parseable JSON object"
        else:
            value, error = validate(obj)
            if value is not None:
                return value, ""
            last_error = error
        messages = messages + [
            ChatMessage("assistant", response.content),
            ChatMessage("user", _JSON_CORRECTION),
        ]
    return None, last_error


def _validate_verdict(obj: dict) -> tuple[PurifierVerdict | None, str]:
    relevant_raw = obj.get("relevant")
    if not isinstance(relevant_raw, str) or relevant_raw.strip().lower() not in ("yes", "no"):
        return None, f"field 'relevant' must be the string Yes or No, got {relevant_raw!r}"
    relevant = relevant_raw.strip().lower() == "yes"
    info = obj.get("extracted_info", "")
    summary = obj.get("summary", "")
    if not isinstance(info, str) or not isinstance(summary, str):
        return None, "extracted_info and summary must be strings"
    if relevant:
        if not info:
            return None, "relevant verdict with empty extracted_info"
        if summary:
            return None, "relevant verdict must leave summary empty"
    else:
        if info:
            return None, "irrelevant verdict must leave extracted_info empty"
        lines = [line for line in summary.split("\n") if line.strip()]
        if not lines or not all(_DOC_SUMMARY_LINE.fullmatch(line.strip()) for line in lines):
            return None, "irrelevant verdict summary must be '[Doc i]: ...' lines"
    return PurifierVerdict(relevant, info, summary), ""


def purify(
    target_question: str, docs: Sequence[RetrievedDoc], backend: ChatBackend
) -> PurifierVerdict:
    """Run the purifier prompt and parse its JSON verdict.

    Raises MalformedVerdict if the backend cannot produce a contract-
    conforming object within one corrective retry.
    """
    if not docs:
        raise ValueError("purify requires at least one document")
    verdict, error = _json_call(
        backend, render_purifier_prompt(target_question, docs), _validate_verdict
    )
    if verdict is None:
        raise MalformedVerdict(error)
    return verdict


def _parse_bool(value: object) -> bool | None:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    return None


def render_context_qas(entries: Sequence[tuple[str, str]]) -> str:
    if not entries:
        return "(none)"
    return "\n".join(f"#Q: {q}\n#A: {a}" for q, a in entries)


def decide_retrieval(
    original_question: str,
    solved_context: Sequence[tuple[str, str]],
    current_subquestion: str,
    backend: ChatBackend,
) -> RetrievalDecision:
    """Ask whether the current sub-question needs external retrieval."""

    def validate(obj: dict) -> tuple[RetrievalDecision | None, str]:
        need = _parse_bool(obj.get("need_retrieval"))
        if need is None:
            return None, f"field 'need_retrieval' must be true or false, got {obj.get('need_retrieval')!r}"
        reason = obj.get("reason", "")
        if not isinstance(reason, str):
            return None, "field 'reason' must be a string"
        query = obj.get("query")
        if need:
            if not isinstance(query, str) or not query.strip():
                return None, "need_retrieval=true requires a non-empty query"
            return RetrievalDecision(True, reason, query.strip()), ""
        if query not in (None, ""):
            return None, "need_retrieval=false must leave query null"
        return RetrievalDecision(False, reason, None), ""

    prompt = render_prompt(
        "retrieval_necessity",
        original_question=original_question,
        previous_qas=render_context_qas(solved_context),
        current_subquestion=current_subquestion,
    )
    decision, error = _json_call(backend, prompt, validate)
    if decision is None:
        raise MalformedDecision(error)
    return decision


def rewrite_query(
    original_question: str, failed_queries: Sequence[str], backend: ChatBackend
) -> QueryRewrite:
    """Produce a new query after failures; the result must differ from every failed one."""
    if not failed_queries:
        raise ValueError("rewrite_query requires a non-empty failure history")

    def validate(obj: dict) -> tuple[QueryRewrite | None, str]:
        new_query = obj.get("new_query")
        if not isinstance(new_query, str) or not new_query.strip():
            return None, "field 'new_query' must be a non-empty string"
        reason = obj.get("reason", "")
        if not isinstance(reason, str):
            return None, "field 'reason' must be a string"
        return QueryRewrite(reason, new_query.strip()), ""

    history = "\n".join(f"{i}. {query}" for i, query in enumerate(failed_queries, 1))
    prompt = render_prompt("query_rewrite", question=original_question, query_history=history)
    rewrite, error = _json_call(backend, prompt, validate)
    if rewrite is None:
        raise MalformedRewrite(error)
    if rewrite.new_query in failed_queries:
        raise DuplicateQuery(f"rewritten query repeats a failed one: {rewrite.new_query!r}")
    return rewrite


_OUTPUT_WRAPPER = re.compile(r"</?output>", re.IGNORECASE)


def _strip_output_wrapper(text: str) -> str:
    return _OUTPUT_WRAPPER.sub("", text)


def _context_pairs(context: "GlobalContext") -> list[tuple[str, str]]:
    return [(entry.sub_question, entry.answer) for entry in context.entries]


def _render_sub_qa(context: "GlobalContext") -> str:
    if not context.entries:
        return "(none)"
    return "\n".join(
        f"#Q_{i}: {entry.sub_question}\n#A_{i}: {entry.answer}"
        for i, entry in enumerate(context.entries, 1)
    )


class ChatReasoner:
    """Reasoner contract implemented over a chat backend with the bundled prompts.

    There is no dedicated complexity-assessment prompt; one decomposition
    call serves both purposes. Its rationale becomes the assessment text
    and the question counts as multi-hop iff a well-formed plan with at
    least two sub-questions parses out of the reply. The parsed plan is
    cached so decompose() does not pay a second call.
    """

    def __init__(self, backend: ChatBackend):
        self._backend = backend
        self._cached: tuple[str, str, ParsedPlan | None] | None = None  # question, rationale, plan

    def _decompose_call(self, question: str) -> tuple[str, ParsedPlan | None]:
        if self._cached is not None and self._cached[0] == question:
            return self._cached[1], self._cached[2]
        response = self._backend.complete(
            _request(self._backend, [ChatMessage("user", render_prompt("decompose", question=question))])
        )
        content = _strip_output_wrapper(response.content)
        spans, _ = tolerant_scan(content)
        plan: ParsedPlan | None = None
        rationale = content.strip()
        for span in spans:
            if span.kind is TagKind.PLAN:
                try:
                    plan = parse_plan_body(span.body, "initial")
                except PlanParseError:
                    plan = None
                rationale = content[: span.start].strip()
                break
        self._cached = (question, rationale, plan)
        return rationale, plan

    def assess_complexity(self, question: str) -> ComplexityAssessment:
        rationale, plan = self._decompose_call(question)
        question_type = "multi_hop" if plan is not None and len(plan) >= 2 else "single_hop"
        return ComplexityAssessment(rationale, question_type)

    def decompose(self, question: str) -> tuple[str, ParsedPlan]:
        rationale, plan = self._decompose_call(question)
        if plan is None:
            raise MalformedPlan("decomposition reply contained no parseable plan")
        return "", plan  # rationale already surfaced through assess_complexity

    def decide_retrieval(
        self, question: str, context: "GlobalContext", sub_question: str
    ) -> RetrievalDecision:
        return decide_retrieval(question, _context_pairs(context), sub_question, self._backend)

    def rewrite_query(
        self, target: str, failed_queries: Sequence[str], context: "GlobalContext"
    ) -> QueryRewrite:
        return rewrite_query(target, failed_queries, self._backend)

    def answer_subquestion(self, sub_question: str, info: str | None, context: "GlobalContext") -> str:
        document = info if info else "No relevant document found."
        prompt = render_prompt("answer_subquestion", document=document, question=sub_question)
        response = self._backend.complete(_request(self._backend, [ChatMessage("user", prompt)]))
        spans, _ = tolerant_scan(response.content)
        for span in spans:
            if span.kind is TagKind.ANSWER:
                return span.body.strip()
        return response.content.strip()

    def refine_subquestion(self, question: str, index: int, text: str, context: "GlobalContext") -> str:
        prompt = render_prompt(
            "update_subquestion",
            k=len(context.entries),
            j=index,
            question=question,
            sub_qa=_render_sub_qa(context),
        )
        response = self._backend.complete(_request(self._backend, [ChatMessage("user", prompt)]))
        return response.content.strip()

    def revise_plan(
        self, question: str, remaining: Sequence[str], current_index: int, context: "GlobalContext"
    ) -> ParsedPlan:
        prompt = render_prompt("revise_plan", question=question, solved_qas=_render_sub_qa(context))
        last_error = ""
        messages = [ChatMessage("user", prompt)]
        for _ in range(2):
            response = self._backend.complete(_request(self._backend, messages))
            try:
                return parse_plan_body(_strip_output_wrapper(response.content), "revision")
            except PlanParseError as error:
                last_error = str(error)
                messages = messages + [
                    ChatMessage("assistant", response.content),
                    ChatMessage(
                        "user",
                        "The revised plan did not parse. Output only '#Q_i: ...' lines inside <output></output>.",
                    ),
                ]
        raise MalformedPlan(f"revision reply contained no parseable plan: {last_error}")

    def final_answer(self, question: str, context: "GlobalContext") -> str:
        prompt = render_prompt("final_answer", question=question, sub_qa=_render_sub_qa(context))
        response = self._backend.complete(_request(self._backend, [ChatMessage("user", prompt)]))
        return response.content.strip()

    def rewrite_trajectory(self, trajectory_text: str) -> str:
        prompt = render_prompt("trajectory_rewrite", trajectory=trajectory_text)
        response = self._backend.complete(_request(self._backend, [ChatMessage("user", prompt)]))
        return response.content.strip()


class ChatPurifier:
    """Purifier contract over a chat backend.

    A verdict that stays malformed after the corrective retry degrades to
    an irrelevant verdict with a warning flag instead of killing the
    episode; the trajectory records the degradation.
    """

    def __init__(self, backend: ChatBackend):
        self._backend = backend

    def purify(self, target_question: str, docs: Sequence[RetrievedDoc]) -> PurifierVerdict:
        try:
            return purify(target_question, docs, self._backend)
        except MalformedVerdict:
            return PurifierVerdict(
                relevant=False,
                summary="unparseable purifier output",
                warning="malformed_verdict",
            )
