"""Turning a trial protocol into its Q/A-pair representation.

Eligibility criteria go through the LLM (json-formatted pairs, parsed
tolerantly); the five short sections use fixed questions with the flattened
section text as the answer.
"""

from __future__ import annotations

import ast
import json
import logging
import re

from .errors import InvalidInput, ParseFailure
from .llm import LlmClient, PromptTemplate
from .records import QAPair, SHORT_SECTIONS, TrialProtocol, TrialQASet

logger = logging.getLogger(__name__)

PREDEFINED_QUESTIONS = {
    "title": "What is the title of the trial?",
    "disease": "What is the disease treated in this trial?",
    "intervention": "What are the drugs used?",
    "keywords": "What are the keywords?",
    "outcome": "What are the outcome measurements?",
}

# Flat {...} objects anywhere in the completion, prose and newlines tolerated.
_OBJECT_RE = re.compile(r"\{[^{}]*\}", re.DOTALL)
_PAIR_RE = re.compile(
    r"['\"]question['\"]\s*:\s*(['\"])(?P<q>.*?)\1\s*,\s*"
    r"['\"]answer['\"]\s*:\s*(['\"])(?P<a>.*?)\3",
    re.IGNORECASE | re.DOTALL,
)

ANSWER_WORD_LIMIT = 5


def _coerce_pair(obj: dict) -> tuple[str, str] | None:
    question = answer = None
    for key, value in obj.items():
        lowered = str(key).strip().lower()
        if lowered == "question":
            question = str(value).strip()
        elif lowered == "answer":
            answer = str(value).strip()
    if question and answer:
        return question, answer
    return None


def parse_llm_output(raw: str) -> list[tuple[str, str]]:
    """Extract every {'Question': q, 'Answer': a} object from a completion.

    Tolerates single or double quotes, surrounding prose, and objects split
    across lines. Order is preserved; pairs with an empty question or answer
    are dropped. Returns [] when nothing parses.
    """
    pairs: list[tuple[str, str]] = []
    for match in _OBJECT_RE.finditer(raw or ""):
        block = match.group(0)
        obj = None
        try:
            obj = json.loads(block)
        except (json.JSONDecodeError, ValueError):
            try:
                obj = ast.literal_eval(block)
            except (ValueError, SyntaxError):
                obj = None
        if isinstance(obj, dict):
            pair = _coerce_pair(obj)
            if pair:
                pairs.append(pair)
                continue
        # last resort for blocks with unbalanced quoting
        loose = _PAIR_RE.search(block)
        if loose:
            question = loose.group("q").strip()
            answer = loose.group("a").strip()
            if question and answer:
                pairs.append((question, answer))
    return pairs


def format_qa_pairs(pairs: list[tuple[str, str]]) -> str:
    """Render pairs back into the one-object-per-line completion format."""
    return "\n".join(
        json.dumps({"Question": q, "Answer": a}) for q, a in pairs
    )


def generate_eligibility_qa(
    criteria_text: str,
    client: LlmClient,
    template: PromptTemplate | None = None,
) -> list[QAPair]:
    """Ask the model for Q/A pairs covering the eligibility criteria.

    Everything the model produced is returned (the cap is applied later by
    truncate_qa). Raises ParseFailure when no valid pair could be extracted.
    """
    if not criteria_text.strip():
        raise InvalidInput("criteria text is empty")
    template = template or PromptTemplate()
    template.validate()
    raw = client.complete(criteria_text, template)
    parsed = parse_llm_output(raw)
    if not parsed:
        raise ParseFailure(
            f"no Q/A pairs could be extracted from completion: {raw[:120]!r}"
        )
    pairs = []
    for ordinal, (question, answer) in enumerate(parsed):
        if len(answer.split()) > ANSWER_WORD_LIMIT:
            logger.warning(
                "answer longer than %d words kept as-is: %r",
                ANSWER_WORD_LIMIT,
                answer,
            )
        pairs.append(
            QAPair(
                question=question,
                answer=answer,
                section="eligibility_criteria",
                origin="llm",
                ordinal=ordinal,
            )
        )
    return pairs


def predefined_qa(protocol: TrialProtocol) -> list[QAPair]:
    """One fixed-question pair per non-empty short section."""
    pairs = []
    for section in SHORT_SECTIONS:
        answer = protocol.section_text(section)
        if not answer:
            continue
        pairs.append(
            QAPair(
                question=PREDEFINED_QUESTIONS[section],
                answer=answer,
                section=section,
                origin="predefined",
                ordinal=0,
            )
        )
    return pairs


def truncate_qa(pairs: list[QAPair], cap: int) -> list[QAPair]:
    """Keep the first cap llm-origin pairs; predefined pairs always stay."""
    if cap < 1:
        raise InvalidInput(f"cap must be at least 1, got {cap}")
    kept = []
    llm_seen = 0
    for pair in pairs:
        if pair.origin == "llm":
            llm_seen += 1
            if llm_seen > cap:
                continue
        kept.append(pair)
    return kept


def assemble_qa_set(
    protocol: TrialProtocol,
    client: LlmClient | None = None,
    cap: int = 10,
    template: PromptTemplate | None = None,
    skip_llm: bool = False,
) -> TrialQASet:
    """Build the full Q/A-pair representation of one trial.

    Predefined pairs cover the short sections; eligibility criteria pairs come
    from the model (capped at cap). skip_llm=True (or an empty criteria
    section) leaves the eligibility pairs out.
    """
    pairs = predefined_qa(protocol)
    criteria = protocol.section_text("eligibility_criteria")
    if criteria and not skip_llm:
        if client is None:
            raise InvalidInput(
                f"trial {protocol.trial_id} has eligibility criteria but no "
                "LLM client was given (use skip_llm to omit them)"
            )
        generated = generate_eligibility_qa(criteria, client, template)
        pairs.extend(truncate_qa(generated, cap))
    elif criteria and skip_llm:
        logger.info(
            "trial %s: skipping eligibility Q/A generation", protocol.trial_id
        )
    qa_set = TrialQASet(
        trial_id=protocol.trial_id,
        pairs=sorted(pairs, key=QAPair.sort_key),
    )
    qa_set.validate(qa_cap=cap)
    return qa_set
