"""Acceptance gate: ten behavioral checks, one printed PASS/FAIL line each.

Run with  pytest tests/test_acceptance.py -s  to see the per-criterion
lines. Tolerances are pinned: binary reward components compare exactly,
floating scores (F1, answer and total rewards) to 1e-12.
"""

import itertools
import random
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import format_cases
import golden_episode
import reward_oracle
import trajectory_gen as tg
from planqa.agents import ComplexityAssessment, PurifierVerdict, QueryRewrite, RetrievalDecision
from planqa.evaluation import RetrievalQuality, first_vr_after_revision, retrieval_quality
from planqa.grammar import validate_format
from planqa.planning import (
    MULTI_HOP,
    SINGLE_HOP,
    Answer,
    EpisodeConfig,
    Refinement,
    Revision,
    SubAnswer,
    ToolCall,
    ToolResponse,
    Trajectory,
    run_episode,
    serialize_trajectory,
)
from planqa.retrieval import InMemoryRetriever
from planqa.rewards import RewardConfig, revise_reward, total_reward
from planqa.scripted import RuleReasoner, make_plan
from planqa.synthesis import (
    SynthesisRecord,
    export_sft,
    filter_trajectories,
    purifier_pairs_from_trajectory,
    synthesize_multi_hop,
)
from planqa.textnorm import token_f1

FLOAT_TOL = 1e-12


def _report(number: int, ok: bool, detail: str) -> None:
    print(f"criterion {number:02d}: {'PASS' if ok else 'FAIL'} - {detail}")


# --- criterion 1: hand-labeled format texts ---------------------------------


def test_criterion_01_format_labels():
    problems = []
    for name, text, expects_plan in format_cases.VALID:
        report = validate_format(text, expects_plan)
        if not report.passed:
            ids = [v.constraint_id for v in report.violations]
            problems.append(f"valid {name} rejected with {ids}")
    for name, text, expects_plan, constraint_id in format_cases.INVALID:
        report = validate_format(text, expects_plan)
        if report.passed:
            problems.append(f"invalid {name} accepted")
        elif constraint_id not in {v.constraint_id for v in report.violations}:
            ids = [v.constraint_id for v in report.violations]
            problems.append(f"invalid {name}: expected c{constraint_id}, got {ids}")
    total = len(format_cases.VALID) + len(format_cases.INVALID)
    _report(1, not problems, f"{total - len(problems)}/{total} labeled texts agree")
    assert total == 40
    assert not problems, problems[:5]


# --- criterion 2: reward kernel vs straight-line oracle ----------------------


def _oracle_kwargs(cfg: RewardConfig) -> dict:
    return {
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "lam": cfg.lambda_,
        "attempts": cfg.max_retrieval_attempts,
        "mode": cfg.correctness,
        "threshold": cfg.f1_threshold,
    }


def _diff_breakdowns(breakdown, expected, label, problems):
    for key in ("r_f", "r_p", "r_refine"):
        got = getattr(breakdown, key)
        if got != expected[key]:
            problems.append(f"{label}: {key} engine={got} oracle={expected[key]}")
    for key in ("r_revise", "r_a", "r_ans", "r_total"):
        got = getattr(breakdown, key)
        if abs(got - expected[key]) > FLOAT_TOL:
            problems.append(f"{label}: {key} engine={got} oracle={expected[key]}")


def test_criterion_02_reward_oracle_agreement():
    problems = []
    for name, trajectory, gold, cfg_kwargs in tg.golden_cases():
        cfg = RewardConfig(**cfg_kwargs)
        breakdown = total_reward(trajectory, gold, cfg)
        expected = reward_oracle.oracle_breakdown(trajectory, gold, **_oracle_kwargs(cfg))
        _diff_breakdowns(breakdown, expected, f"golden:{name}", problems)

    rng = random.Random(20260815)
    for case in range(1000):
        attempts = rng.randint(1, 3)
        trajectory, gold = tg.random_trajectory(rng, max_attempts=attempts)
        cfg = RewardConfig(
            alpha=rng.choice((0.0, 0.1, 0.3)),
            beta=rng.choice((0.0, 0.1, 0.2)),
            lambda_=rng.choice((0.0, 0.25, 0.5)),
            max_retrieval_attempts=attempts,
            correctness=rng.choice(("em", "f1")),
            f1_threshold=rng.choice((0.3, 0.5, 0.8)),
        )
        breakdown = total_reward(trajectory, gold, cfg)
        expected = reward_oracle.oracle_breakdown(trajectory, gold, **_oracle_kwargs(cfg))
        _diff_breakdowns(breakdown, expected, f"random:{case}", problems)

    _report(2, not problems, "50 golden + 1000 randomized breakdowns match field by field")
    assert not problems, problems[:5]


# --- criterion 3: analytic revision-credit points ----------------------------


def test_criterion_03_revision_credit_points():
    cfg = RewardConfig()
    q1, q2 = "Who made it?", "Where was #A_1 born?"
    base = [tg.plan(q1, q2)]
    failed3 = tg.cyc(q1, tg.irr()) + tg.cyc(q1, tg.irr()) + tg.cyc(q1, tg.irr())
    revised = [tg.revision("sharper question?")]
    post_ok = tg.cyc("sharper question?", tg.rel())
    post_bad = tg.cyc("sharper question?", tg.irr())

    full = tg.multi(base + failed3 + revised + post_ok + [Answer("x")], "x")
    cases = [
        ("correct short-circuits", full, True, 1.0),
        ("timely and fruitful at lambda 0.5", full, False, 1.0),
        ("no revision", tg.multi(base + failed3 + [Answer("x")], "x"), False, 0.0),
        ("timely but fruitless", tg.multi(base + failed3 + revised + post_bad + [Answer("x")], "x"), False, 0.5),
        ("early and fruitless", tg.multi(base + tg.cyc(q1, tg.irr()) + revised + post_bad + [Answer("x")], "x"), False, 0.0),
    ]
    problems = []
    for name, trajectory, correct, want in cases:
        got = revise_reward(trajectory, correct, cfg)
        if got != want:
            problems.append(f"{name}: got {got}, want {want}")
    _report(3, not problems, f"{len(cases)} analytic credit points exact")
    assert not problems, problems


# --- criterion 4: token F1 vs brute-force oracle ------------------------------


_PUNCT = set(string.punctuation)
_ARTICLE = re.compile(r"\b(a|an|the)\b")


def _brute_tokens(text: str) -> list[str]:
    stripped = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    return _ARTICLE.sub(" ", stripped).split()


def _brute_f1(pred: str, gold: str) -> float:
    pred_tokens, gold_tokens = _brute_tokens(pred), _brute_tokens(gold)
    if not pred_tokens or not gold_tokens:
        return 0.0
    pool = list(gold_tokens)
    hits = 0
    for token in pred_tokens:
        if token in pool:
            pool.remove(token)
            hits += 1
    if hits == 0:
        return 0.0
    precision = hits / len(pred_tokens)
    recall = hits / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def test_criterion_04_f1_oracle():
    vocab = (
        "the", "a", "an", "Lead", "lead!", "Tin,", "Day", "christmas", "Christmas",
        "25", "December", "eve's", "pb", "PB.", "-", "mont-blanc", "day",
    )
    rng = random.Random(77)
    problems = []
    for case in range(10_000):
        pred = " ".join(rng.choice(vocab) for _ in range(rng.randint(0, 6)))
        gold = " ".join(rng.choice(vocab) for _ in range(rng.randint(0, 6)))
        got, want = token_f1(pred, gold), _brute_f1(pred, gold)
        if abs(got - want) > FLOAT_TOL:
            problems.append(f"case {case}: f1({pred!r}, {gold!r}) engine={got} oracle={want}")
    partial = token_f1("Christmas Day", "Christmas")
    if abs(partial - 2 / 3) > FLOAT_TOL:
        problems.append(f"worked example: got {partial}, want 2/3")
    _report(4, not problems, "10000 randomized pairs + worked example within 1e-12")
    assert not problems, problems[:5]


# --- criterion 5: exhaustive episode enumeration ------------------------------


_REL_V = PurifierVerdict(True, extracted_info="a confirmed fact")
_IRR_V = PurifierVerdict(False, summary="[Doc 1]: nothing relevant")


class _SchedulePurifier:
    """Relevance driven by outcome words baked into the target question.

    "hit" targets succeed on the first attempt, "late" on the last allowed
    one, "miss" never. Revised targets (marked ~r<version>s<slot>) always
    succeed, except the first revised slot when a chained second revision
    is being exercised.
    """

    def __init__(self, budget: int, chain: bool):
        self._budget = budget
        self._chain = chain
        self._seen = Counter()

    def purify(self, target_question, docs):
        self._seen[target_question] += 1
        attempt = self._seen[target_question]
        if "~r2" in target_question:
            return _REL_V
        if "~r1" in target_question:
            if self._chain and "~r1s1" in target_question:
                return _IRR_V
            return _REL_V
        if "hit" in target_question:
            return _REL_V
        if "late" in target_question:
            return _REL_V if attempt >= self._budget else _IRR_V
        return _IRR_V


_DEP_SUFFIX = re.compile(r" using (?:#A_|ans-)\d+")
_REV_MARK = re.compile(r" ~r\d+s\d+")
_REV_VERSION = re.compile(r"~r(\d+)s")
_ANSWER_REF = re.compile(r"#A_(\d+)")


@dataclass
class _AutoReasoner:
    """Deterministic reasoner for the enumeration; also audits that the
    shared context only ever grows.

    Revised plans are rebuilt as a clean local chain: slot j depends on
    #A_{j-1} in the revision's own numbering, as the format demands. The
    version marker baked into each revised text lets refinement map those
    local references back to global context entries.
    """

    outcomes: tuple
    log: list
    version: int = 0
    offsets: dict = field(default_factory=dict)
    _last: tuple = field(default_factory=tuple)

    def _touch(self, context):
        now = tuple(entry.answer for entry in context.entries)
        if now[: len(self._last)] != self._last:
            self.log.append(f"context rewrote history: {self._last} -> {now}")
        self._last = now

    def assess_complexity(self, question):
        kind = MULTI_HOP if len(self.outcomes) >= 2 else SINGLE_HOP
        return ComplexityAssessment("", kind)

    def decompose(self, question):
        texts = []
        for i, word in enumerate(self.outcomes, 1):
            dep = f" using #A_{i - 1}" if i > 1 else ""
            texts.append(f"slot {i} {word} v0{dep}?")
        return "", make_plan(texts)

    def decide_retrieval(self, question, context, sub_question):
        self._touch(context)
        return RetrievalDecision(True, "", sub_question)

    def rewrite_query(self, target, failed_queries, context):
        self._touch(context)
        return QueryRewrite("", f"{target} retry {len(failed_queries) + 1}")

    def answer_subquestion(self, sub_question, info, context):
        self._touch(context)
        return f"ans-{len(context.entries) + 1}"

    def refine_subquestion(self, question, index, text, context):
        self._touch(context)
        marker = _REV_VERSION.search(text)
        offset = self.offsets[int(marker.group(1))] if marker else 0
        return _ANSWER_REF.sub(lambda m: f"ans-{int(m.group(1)) + offset}", text)

    def revise_plan(self, question, remaining, current_index, context):
        self._touch(context)
        self.version += 1
        self.offsets[self.version] = current_index - 1
        texts = []
        for j, text in enumerate(remaining, 1):
            base = _REV_MARK.sub("", _DEP_SUFFIX.sub("", text)).rstrip("?").rstrip()
            dep = f" using #A_{j - 1}" if j > 1 else ""
            texts.append(f"{base}{dep} ~r{self.version}s{j}?")
        return make_plan(texts, source="revision")

    def final_answer(self, question, context):
        self._touch(context)
        return context.entries[-1].answer if context.entries else "ans-none"


def _check_episode(trajectory, n, budget, revisions_allowed, problems, label):
    events = trajectory.events
    revisions = sum(1 for e in events if isinstance(e, Revision))
    if revisions > revisions_allowed:
        problems.append(f"{label}: {revisions} revisions exceed budget {revisions_allowed}")
    calls = [e for e in events if isinstance(e, ToolCall)]
    bound = n * budget * (revisions_allowed + 1)
    if len(calls) > bound:
        problems.append(f"{label}: {len(calls)} tool calls exceed bound {bound}")
    for target, count in Counter(c.target_question for c in calls).items():
        if count > budget:
            problems.append(f"{label}: {count} attempts on one target exceed K={budget}")
    sub_indices = [e.index for e in events if isinstance(e, SubAnswer)]
    if sub_indices != list(range(1, len(sub_indices) + 1)):
        problems.append(f"{label}: sub-answer order {sub_indices}")
    for i, event in enumerate(events):
        if isinstance(event, Refinement):
            prev = events[i - 1] if i else None
            if not isinstance(prev, SubAnswer) or event.index != prev.index + 1:
                problems.append(f"{label}: refinement at {i} not right after its trigger")
    if trajectory.final_answer is None:
        problems.append(f"{label}: episode ended without an answer")
    report = validate_format(serialize_trajectory(trajectory), expects_plan=n >= 2)
    if not report.passed:
        ids = [v.constraint_id for v in report.violations]
        problems.append(f"{label}: serialized form violates {ids}")


def test_criterion_05_exhaustive_episode_invariants():
    problems = []
    episodes = 0
    for budget in (1, 2, 3):
        alphabet = ("hit", "late", "miss") if budget >= 2 else ("hit", "miss")
        for n in (1, 2, 3, 4):
            for pattern in itertools.product(alphabet, repeat=n):
                for revisions_allowed in (0, 1, 2):
                    chains = (False, True) if (revisions_allowed == 2 and "miss" in pattern) else (False,)
                    for chain in chains:
                        label = f"K{budget} M{revisions_allowed} {'-'.join(pattern)} chain{int(chain)}"
                        reasoner = _AutoReasoner(pattern, problems)
                        cfg = EpisodeConfig(
                            max_retrieval_attempts=budget,
                            max_revisions=revisions_allowed,
                            top_k=2,
                        )
                        trajectory = run_episode(
                            f"slot probe {pattern[0]} case?",
                            reasoner,
                            _SchedulePurifier(budget, chain),
                            InMemoryRetriever([("d1", "Slot", "slot reference sheet")]),
                            cfg,
                        )
                        episodes += 1
                        _check_episode(trajectory, n, budget, revisions_allowed, problems, label)
    _report(5, not problems, f"{episodes} enumerated episodes hold every invariant")
    assert not problems, problems[:5]


# --- criterion 6: replanning control flow on the bundled corpus ---------------


def test_criterion_06_replan_control_flow():
    problems = []
    first = golden_episode.run_golden_episode()
    second = golden_episode.run_golden_episode()

    kinds = [type(e).__name__ for e in first.events]
    expected = [
        "Think", "InitialPlan", "Think", "ToolCall", "ToolResponse", "Think",
        "ToolCall", "ToolResponse", "Revision", "Think", "ToolCall", "ToolResponse",
        "SubAnswer", "Refinement", "Think", "SubAnswer", "Answer",
    ]
    if kinds != expected:
        problems.append(f"event sequence {kinds}")
    if kinds.count("Revision") != 1:
        problems.append("expected exactly one revision")

    budget = golden_episode.CONFIG.max_retrieval_attempts
    if budget != 2:
        problems.append(f"scripted budget is {budget}, expected 2")
    calls = [e for e in first.events if isinstance(e, ToolCall)]
    responses = [e for e in first.events if isinstance(e, ToolResponse)]
    if [r.verdict.relevant for r in responses] != [False, False, True]:
        problems.append("retrieval outcomes are not miss, miss, hit")
    if len({c.target_question for c in calls[:2]}) != 1:
        problems.append("the two failed attempts did not share a target")
    revision_at = kinds.index("Revision")
    if kinds[:revision_at].count("ToolCall") != budget:
        problems.append("revision did not come right after the exhausted budget")
    if first.final_answer != "Lead":
        problems.append(f"final answer {first.final_answer!r}")
    if serialize_trajectory(first) != serialize_trajectory(second):
        problems.append("two runs differ byte for byte")
    _report(6, not problems, "replan flow reproduced, reruns byte-identical")
    assert not problems, problems


# --- criterion 7: synthesis filter on a labeled batch -------------------------


def _labeled_record(record_id, final, gold, tool_calls):
    events = []
    for i in range(tool_calls):
        events += [ToolCall(f"query {i}", "step?"), ToolResponse(tg.rel())]
    if final is not None:
        events.append(Answer(final))
    trajectory = Trajectory(
        "What peak is this?", SINGLE_HOP, tuple(events), final, trajectory_id=record_id
    )
    return SynthesisRecord(
        "What peak is this?", (gold,), 1, trajectory,
        purifier_pairs_from_trajectory(trajectory),
        "success" if final is not None else "failure",
    )


def test_criterion_07_filter_semantics():
    gold = "Mont Blanc"
    keepers = ["The Mont Blanc!", "mont blanc", "Mont, Blanc", "MONT BLANC", " mont   blanc "]
    batch = []
    expected_keep = []
    for i in range(10):
        record = _labeled_record(f"keep{i}", keepers[i % len(keepers)], gold, 1 + i % 3)
        batch.append(record)
        expected_keep.append(record)
    for i in range(8):
        batch.append(_labeled_record(f"wrong{i}", "Matterhorn", gold, 2))
    for i in range(5):
        batch.append(_labeled_record(f"nocall{i}", gold, gold, 0))
    for i in range(4):
        batch.append(_labeled_record(f"fail{i}", None, gold, 2))
    for i in range(3):
        batch.append(_labeled_record(f"fuzzy{i}", "Mont", gold, 1))
    assert len(batch) == 30

    kept = filter_trajectories(batch)
    problems = []
    got_ids = [r.trajectory.trajectory_id for r in kept]
    want_ids = [r.trajectory.trajectory_id for r in expected_keep]
    if got_ids != want_ids:
        problems.append(f"kept {got_ids}, wanted {want_ids}")
    pair_count = sum(len(r.purifier_pairs) for r in kept)
    call_count = sum(r.tool_call_count() for r in kept)
    if pair_count != call_count:
        problems.append(f"{pair_count} purifier pairs vs {call_count} tool calls")
    if call_count != 19:
        problems.append(f"kept batch has {call_count} tool calls, expected 19")
    _report(7, not problems, "30-record batch filtered to exactly the labeled keepers")
    assert not problems, problems


# --- criterion 8: SFT targets and loss-mask byte audit -------------------------


_RESPONSE_BODY = re.compile(r"<tool_response>(.*?)</tool_response>", re.IGNORECASE | re.DOTALL)


class _WrapTeacher(RuleReasoner):
    def rewrite_trajectory(self, trajectory_text):
        return "Let me work through the steps carefully.\n" + trajectory_text


def _golden_synthesis_record():
    return synthesize_multi_hop(
        golden_episode.QUESTION,
        ["Lead"],
        3,
        golden_episode.build_reasoner(),
        golden_episode.build_purifier(),
        golden_episode.build_retriever(),
        golden_episode.CONFIG,
        trajectory_id="golden",
    )


def test_criterion_08_sft_mask_audit():
    records = [
        _golden_synthesis_record(),
        _labeled_record("easy0", "Mont Blanc", "Mont Blanc", 1),
        _labeled_record("easy1", "the Mont Blanc", "Mont Blanc", 2),
    ]
    problems = []
    audited = 0
    for teacher in (RuleReasoner(), _WrapTeacher()):
        reasoner_records, purifier_records, diagnostics = export_sft(records, teacher)
        if len(reasoner_records) != 3:
            problems.append(f"{type(teacher).__name__}: exported {len(reasoner_records)} of 3")
        if diagnostics:
            problems.append(f"{type(teacher).__name__}: diagnostics {diagnostics}")
        if len(purifier_records) != sum(r.tool_call_count() for r in records):
            problems.append(f"{type(teacher).__name__}: purifier pair count off")
        for sft in reasoner_records:
            audited += 1
            report = validate_format(sft.target, expects_plan="<plan>" in sft.target.lower())
            if not report.passed:
                problems.append(f"target for {sft.prompt[:30]!r} fails format re-check")
            expected = set()
            for match in _RESPONSE_BODY.finditer(sft.target):
                expected.update(range(match.start(1), match.end(1)))
            masked = set()
            for start, end in sft.loss_mask_spans:
                masked.update(range(start, end))
            if masked != expected:
                extra = len(masked - expected)
                missing = len(expected - masked)
                problems.append(
                    f"mask audit for {sft.prompt[:30]!r}: {extra} stray, {missing} uncovered bytes"
                )
            if not expected:
                problems.append(f"target for {sft.prompt[:30]!r} has no retrieval bytes to mask")
    _report(8, not problems, f"{audited} exported targets re-validate; masks cover retrieval bytes exactly")
    assert not problems, problems[:5]


# --- criterion 9: retrieval-quality metrics vs substring oracle ----------------


def _brute_quality(trajectory, sub_answers):
    def norm(text):
        return " ".join(_brute_tokens(text))

    pairs = []
    pending = None
    for event in trajectory.events:
        if isinstance(event, ToolCall):
            pending = event
        elif isinstance(event, ToolResponse) and pending is not None:
            pairs.append(event)
            pending = None

    def contains(doc, needle):
        needle_norm = norm(needle)
        return bool(needle_norm) and needle_norm in norm(doc.contents)

    vrc = sum(
        1 for response in pairs if any(contains(d, s) for d in response.docs for s in sub_answers)
    )
    pool = [d for response in pairs for d in response.docs]
    covered = {norm(s) for s in sub_answers if any(contains(d, s) for d in pool)}
    return RetrievalQuality(vrc, len(pairs) - vrc, len(pairs), len(covered))


def test_criterion_09_retrieval_quality_oracle():
    rng = random.Random(5150)
    problems = []
    for case in range(500):
        trajectory, _ = tg.random_trajectory(rng)
        subs = [tg.rand_text(rng, 1, 2) for _ in range(rng.randint(1, 3))]
        got = retrieval_quality(trajectory, subs)
        want = _brute_quality(trajectory, subs)
        if got != want:
            problems.append(f"case {case}: engine={got} oracle={want}")
        if got.trc != got.vrc + got.irc:
            problems.append(f"case {case}: trc != vrc + irc")
    golden = golden_episode.run_golden_episode()
    subs = golden_episode.ANNOTATION.sub_answers
    if retrieval_quality(golden, subs) != RetrievalQuality(1, 2, 3, 1):
        problems.append("bundled episode counts drifted")
    if first_vr_after_revision(golden, subs) is not True:
        problems.append("first post-revision retrieval should be valid")
    _report(9, not problems, "500 randomized trajectories match the substring oracle")
    assert not problems, problems[:5]


# --- criterion 10: in-memory retriever vs brute force --------------------------


def test_criterion_10_retriever_oracle():
    rng = random.Random(31415)
    pool = list(tg.WORDS) + ["quartz", "ember", "prairie", "falcon"]
    triples = []
    for i in range(40):
        body = " ".join(rng.choice(pool) for _ in range(rng.randint(3, 9)))
        triples.append((f"doc{i:02d}", f"T{i}", body))
    retriever = InMemoryRetriever(triples)
    word = re.compile(r"\w+")

    def brute(query, limit):
        query_tokens = set(word.findall(query.casefold()))
        scored = []
        for doc_id, _, body in triples:
            overlap = len(query_tokens & set(word.findall(body.casefold())))
            if overlap > 0:
                scored.append((-overlap, doc_id))
        scored.sort()
        return [doc_id for _, doc_id in scored[:limit]]

    problems = []
    for case in range(1000):
        query = " ".join(rng.choice(pool) for _ in range(rng.randint(1, 4)))
        limit = rng.randint(1, 8)
        got = [d.doc_id for d in retriever.retrieve(query, limit)]
        if got != brute(query, limit):
            problems.append(f"case {case}: ranking mismatch for {query!r} k={limit}")
        wider = [d.doc_id for d in retriever.retrieve(query, limit + 3)]
        if wider[: len(got)] != got:
            problems.append(f"case {case}: widening k changed the prefix for {query!r}")
    _report(10, not problems, "1000 (query, k) pairs match brute force, prefix-stable")
    assert not problems, problems[:5]
