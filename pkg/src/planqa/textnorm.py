"""Answer-string normalization and token-overlap scoring.

Follows the open-domain QA convention: lowercase, strip punctuation, drop
English articles, collapse whitespace. Both the reward kernel and the
evaluation harness import from here so predictions and references are
always normalized the same way.
"""

from __future__ import annotations

import re
import string
from collections import Counter

_ARTICLE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Return the canonical form of an answer string."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE.sub(" ", text)
    return " ".join(text.split())


def answer_tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def token_f1(pred: str, gold: str) -> float:
    """Bag-of-tokens F1 between a prediction and one reference.

    Returns 0.0 when either side normalizes to an empty token list.
    """
    pred_tokens = answer_tokens(pred)
    gold_tokens = answer_tokens(gold)
    if not pred_tokens or not gold_tokens:
        return 0.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def best_f1(pred: str, golds: list[str]) -> float:
    """Max token F1 over a list of acceptable references."""
    return max((token_f1(pred, gold) for gold in golds), default=0.0)


def matches_any(pred: str, golds: list[str]) -> bool:
    """Normalized exact match against any reference."""
    normalized = normalize_answer(pred)
    return any(normalized == normalize_answer(gold) for gold in golds)


def normalized_contains(haystack: str, needle: str) -> bool:
    """Substring containment after normalizing both sides.

    An empty normalized needle never matches; a metric built on "contains
    the answer" should not count content-free references.
    """
    needle_norm = normalize_answer(needle)
    if not needle_norm:
        return False
    return needle_norm in normalize_answer(haystack)
