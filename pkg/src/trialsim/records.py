"""Domain types and the line-delimited record format every stage shares.

A trial protocol is stored as six fixed sections. All multi-item sections are
flattened with ", " and pair/section ordering is fixed here once so that every
module that assembles text does it identically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Any, Iterable, Iterator

from .errors import EmptyProtocol, MissingId, SchemaViolation

logger = logging.getLogger(__name__)

# Canonical section order; used everywhere text or Q/A pairs are assembled.
SECTIONS = (
    "title",
    "disease",
    "intervention",
    "keywords",
    "outcome",
    "eligibility_criteria",
)
# Sections answered with predefined questions (everything but eligibility).
SHORT_SECTIONS = SECTIONS[:-1]
LIST_SECTIONS = ("disease", "intervention", "keywords")

ORIGINS = ("llm", "predefined")
SUBJECT_KINDS = ("trial", "qa_pair", "patient")
QUERY_KINDS = ("full_trial", "partial", "patient")
LABEL_SOURCES = ("review", "same_disease_negative", "random_negative")

SECTION_INDEX = {name: i for i, name in enumerate(SECTIONS)}

LIST_JOINER = ", "
NORM_TOLERANCE = 1e-6


def flatten_section(value: str | list[str]) -> str:
    """Render a section value as one string; lists are joined with ", "."""
    if isinstance(value, str):
        return value.strip()
    return LIST_JOINER.join(v.strip() for v in value if v.strip())


def _dedup(items: Iterable[str]) -> list[str]:
    seen = set()
    out = []
    for item in items:
        item = item.strip()
        if item and item not in seen:
            seen.add(item)
            out.append(item)
    return out


@dataclass
class TrialProtocol:
    """One source document: registry id plus the six protocol sections."""

    trial_id: str
    title: str = ""
    disease: list[str] = field(default_factory=list)
    intervention: list[str] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)
    outcome: str = ""
    eligibility_criteria: str = ""

    def section_text(self, section: str) -> str:
        """Flattened text of one section ('' when empty)."""
        if section not in SECTIONS:
            raise SchemaViolation(f"unknown section {section!r}")
        return flatten_section(getattr(self, section))

    def full_text(self) -> str:
        """All non-empty sections concatenated in canonical order."""
        parts = [self.section_text(s) for s in SECTIONS]
        return " ".join(p for p in parts if p)

    def validate(self) -> None:
        if not isinstance(self.trial_id, str) or not self.trial_id.strip():
            raise MissingId("trial_id is missing or empty")
        if all(not self.section_text(s) for s in SECTIONS):
            raise EmptyProtocol(f"trial {self.trial_id}: all sections empty")
        for name in LIST_SECTIONS:
            value = getattr(self, name)
            if not isinstance(value, list):
                raise SchemaViolation(f"trial {self.trial_id}: {name} must be a list")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "TrialProtocol":
        return validate_protocol(record)


def validate_protocol(record: dict[str, Any]) -> TrialProtocol:
    """Build a TrialProtocol from a raw key-value record.

    List-valued sections are deduplicated preserving order; string values for
    them are accepted and wrapped. Unknown keys are logged and dropped.

    Raises MissingId / EmptyProtocol when the record is unusable.
    """
    trial_id = str(record.get("trial_id") or "").strip()
    if not trial_id:
        raise MissingId("record has no trial_id")

    kwargs: dict[str, Any] = {"trial_id": trial_id}
    for key, value in record.items():
        if key == "trial_id":
            continue
        if key not in SECTIONS:
            logger.warning("trial %s: dropping unknown section %r", trial_id, key)
            continue
        if key in LIST_SECTIONS:
            if isinstance(value, str):
                value = [value] if value.strip() else []
            kwargs[key] = _dedup(str(v) for v in value)
        else:
            kwargs[key] = str(value or "").strip()

    protocol = TrialProtocol(**kwargs)
    protocol.validate()
    return protocol


@dataclass
class QAPair:
    """A question and short answer summarizing one fact of a section."""

    question: str
    answer: str
    section: str
    origin: str
    ordinal: int

    def text(self) -> str:
        """Encoding text: question + single space + answer."""
        return f"{self.question} {self.answer}"

    def validate(self) -> None:
        if not self.question.strip() or not self.answer.strip():
            raise SchemaViolation("Q/A pair has an empty question or answer")
        if self.section not in SECTIONS:
            raise SchemaViolation(f"unknown section {self.section!r}")
        if self.origin not in ORIGINS:
            raise SchemaViolation(f"unknown origin {self.origin!r}")
        if self.origin == "llm" and self.section != "eligibility_criteria":
            raise SchemaViolation(
                f"llm-origin pair in section {self.section!r}; only "
                "eligibility_criteria pairs come from the model"
            )
        if self.ordinal < 0:
            raise SchemaViolation("ordinal must be non-negative")

    def sort_key(self) -> tuple[int, int]:
        return (SECTION_INDEX[self.section], self.ordinal)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "QAPair":
        pair = cls(
            question=str(record["question"]),
            answer=str(record["answer"]),
            section=str(record["section"]),
            origin=str(record["origin"]),
            ordinal=int(record["ordinal"]),
        )
        pair.validate()
        return pair


@dataclass
class TrialQASet:
    """A trial represented as an ordered set of Q/A pairs."""

    trial_id: str
    pairs: list[QAPair]

    def canonical_pairs(self) -> list[QAPair]:
        """Pairs sorted by fixed section order, then ordinal."""
        return sorted(self.pairs, key=QAPair.sort_key)

    def text(self, delimiter: str = "; ") -> str:
        """All pair texts joined in canonical order."""
        return delimiter.join(p.text() for p in self.canonical_pairs())

    def validate(self, qa_cap: int = 10) -> None:
        if not self.trial_id.strip():
            raise MissingId("qa set has no trial_id")
        for pair in self.pairs:
            pair.validate()
        ordered = self.canonical_pairs()
        if [p.sort_key() for p in self.pairs] != [p.sort_key() for p in ordered]:
            raise SchemaViolation(
                f"trial {self.trial_id}: pairs are not in canonical order"
            )
        by_section: dict[str, list[int]] = {}
        for pair in self.pairs:
            by_section.setdefault(pair.section, []).append(pair.ordinal)
        for section, ordinals in by_section.items():
            if sorted(ordinals) != list(range(len(ordinals))):
                raise SchemaViolation(
                    f"trial {self.trial_id}: {section} ordinals are not "
                    f"consecutive from 0: {sorted(ordinals)}"
                )
        llm_count = sum(1 for p in self.pairs if p.origin == "llm")
        if llm_count > qa_cap:
            raise SchemaViolation(
                f"trial {self.trial_id}: {llm_count} llm pairs exceed cap {qa_cap}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {"trial_id": self.trial_id, "pairs": [p.to_dict() for p in self.pairs]}

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "TrialQASet":
        qa_set = cls(
            trial_id=str(record["trial_id"]),
            pairs=[QAPair.from_dict(p) for p in record["pairs"]],
        )
        qa_set.validate()
        return qa_set


@dataclass
class SimilarityLabel:
    """Ground-truth relevance between a query trial and a candidate trial."""

    query_trial_id: str
    candidate_trial_id: str
    relevant: bool
    source: str = "review"

    def validate(self) -> None:
        if self.query_trial_id == self.candidate_trial_id:
            raise SchemaViolation(
                f"label pairs trial {self.query_trial_id} with itself"
            )
        if self.source not in LABEL_SOURCES:
            raise SchemaViolation(f"unknown label source {self.source!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "SimilarityLabel":
        label = cls(
            query_trial_id=str(record["query_trial_id"]),
            candidate_trial_id=str(record["candidate_trial_id"]),
            relevant=bool(record["relevant"]),
            source=str(record.get("source", "review")),
        )
        label.validate()
        return label


@dataclass
class EvalQuery:
    """One evaluation query with its fixed candidate list."""

    query_id: str
    query_kind: str
    candidates: list[tuple[str, bool]]

    def relevant_ids(self) -> set[str]:
        return {tid for tid, rel in self.candidates if rel}

    def candidate_ids(self) -> list[str]:
        return [tid for tid, _ in self.candidates]

    def validate(self, per_query: int | None = None) -> None:
        if not self.query_id.strip():
            raise MissingId("eval query has no query_id")
        if self.query_kind not in QUERY_KINDS:
            raise SchemaViolation(f"unknown query_kind {self.query_kind!r}")
        ids = self.candidate_ids()
        if len(set(ids)) != len(ids):
            raise SchemaViolation(f"query {self.query_id}: duplicate candidates")
        if per_query is not None and len(ids) != per_query:
            raise SchemaViolation(
                f"query {self.query_id}: {len(ids)} candidates, expected {per_query}"
            )
        if not any(rel for _, rel in self.candidates):
            raise SchemaViolation(f"query {self.query_id}: no relevant candidate")

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "query_kind": self.query_kind,
            "candidates": [
                {"trial_id": tid, "relevant": rel} for tid, rel in self.candidates
            ],
        }

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "EvalQuery":
        query = cls(
            query_id=str(record["query_id"]),
            query_kind=str(record["query_kind"]),
            candidates=[
                (str(c["trial_id"]), bool(c["relevant"]))
                for c in record["candidates"]
            ],
        )
        query.validate()
        return query


@dataclass
class EmbeddingRecord:
    """An L2-normalized vector tied to a trial, Q/A pair, or patient note."""

    subject_id: str
    subject_kind: str
    vector: list[float]
    dim: int

    def validate(self) -> None:
        if self.subject_kind not in SUBJECT_KINDS:
            raise SchemaViolation(f"unknown subject_kind {self.subject_kind!r}")
        if len(self.vector) != self.dim:
            raise SchemaViolation(
                f"{self.subject_id}: vector has {len(self.vector)} components, "
                f"dim says {self.dim}"
            )
        if not all(math.isfinite(v) for v in self.vector):
            raise SchemaViolation(f"{self.subject_id}: non-finite component")
        norm = math.sqrt(sum(v * v for v in self.vector))
        if abs(norm - 1.0) >= NORM_TOLERANCE:
            raise SchemaViolation(
                f"{self.subject_id}: vector norm {norm:.8f} is not 1"
            )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "EmbeddingRecord":
        rec = cls(
            subject_id=str(record["subject_id"]),
            subject_kind=str(record["subject_kind"]),
            vector=[float(v) for v in record["vector"]],
            dim=int(record["dim"]),
        )
        rec.validate()
        return rec


@dataclass
class TrainingConfig:
    """Every training hyperparameter in one auditable place."""

    tau: float = 0.1
    lr_local: float = 2e-5
    lr_global: float = 1e-6
    epochs_local: int = 10
    epochs_global: int = 10
    batch_local: int = 32
    batch_global: int = 16
    qa_cap: int = 10
    seed: int = 0
    labeled_fraction: float | None = None  # None: use the labeled corpus share
    weight_decay: float = 0.01

    def validate(self) -> None:
        if self.tau <= 0:
            raise SchemaViolation("tau must be positive")
        if self.lr_local <= 0 or self.lr_global <= 0:
            raise SchemaViolation("learning rates must be positive")
        # epochs may be 0 (training becomes a no-op); batch sizes and the
        # Q/A cap must be at least 1.
        if self.epochs_local < 0 or self.epochs_global < 0:
            raise SchemaViolation("epoch counts must be non-negative")
        if self.batch_local < 1 or self.batch_global < 1:
            raise SchemaViolation("batch sizes must be at least 1")
        if self.qa_cap < 1:
            raise SchemaViolation("qa_cap must be at least 1")
        if self.labeled_fraction is not None and not (
            0.0 <= self.labeled_fraction <= 1.0
        ):
            raise SchemaViolation("labeled_fraction must be in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "TrainingConfig":
        known = {f for f in cls.__dataclass_fields__}
        config = cls(**{k: v for k, v in record.items() if k in known})
        config.validate()
        return config


# --- line-delimited record files ---

RECORD_TYPES = {
    "trials": TrialProtocol,
    "qa_sets": TrialQASet,
    "labels": SimilarityLabel,
    "eval_queries": EvalQuery,
    "embeddings": EmbeddingRecord,
}


def write_jsonl(path, records: Iterable[Any]) -> int:
    """Write records (anything with to_dict) one JSON object per line."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            count += 1
    return count


def read_jsonl(path, cls) -> list[Any]:
    """Read and validate records of one type; raises SchemaViolation.

    Validation failures carry the offending line number.
    """
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"{path}:{lineno}: bad JSON: {exc}") from exc
            try:
                out.append(cls.from_dict(record))
            except SchemaViolation as exc:
                raise SchemaViolation(f"{path}:{lineno}: {exc}") from exc
    return out


def iter_jsonl(path) -> Iterator[dict[str, Any]]:
    """Yield raw JSON objects from a line-delimited file."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
