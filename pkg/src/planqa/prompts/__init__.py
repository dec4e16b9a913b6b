"""Versioned prompt assets and a brace-safe renderer.

Templates live as ``.txt`` files next to this module and use ``{field}``
placeholders. Rendering substitutes only the fields the caller supplies,
so literal braces inside templates (JSON examples) survive untouched.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

PROMPT_VERSION = "1"

PROMPT_NAMES = (
    "decompose",
    "query_rewrite",
    "purifier",
    "answer_subquestion",
    "update_subquestion",
    "retrieval_necessity",
    "revise_plan",
    "final_answer",
    "judge_answer",
    "reasoner_direct",
    "trajectory_rewrite",
    "error_classification",
    "redundancy_check",
)


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    if name not in PROMPT_NAMES:
        raise KeyError(f"unknown prompt {name!r}")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(name: str, **fields: object) -> str:
    template = load_prompt(name)
    if not fields:
        return template
    pattern = re.compile(r"\{(" + "|".join(re.escape(key) for key in fields) + r")\}")
    return pattern.sub(lambda match: str(fields[match.group(1)]), template)
