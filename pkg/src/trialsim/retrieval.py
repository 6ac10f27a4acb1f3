"""Cosine-similarity retrieval over an immutable trial embedding index.

Three query modes share one ranking core: a whole trial's Q/A set, a partial
protocol built from a title plus optional extra sections, and a raw patient
note. Scores are exact exhaustive cosine; ties break lexicographically by
trial_id so results are reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import (
    EncoderBackbone,
    encode_text,
    encode_texts,
    encode_trial,
    trial_input_text,
)
from .errors import (
    ConfigError,
    DuplicateTrial,
    EmptyCorpus,
    InvalidInput,
    SchemaViolation,
    UnknownCandidate,
    ZeroVector,
)
from .qa import assemble_qa_set
from .records import (
    SECTIONS,
    EmbeddingRecord,
    TrialProtocol,
    TrialQASet,
    read_jsonl,
    write_jsonl,
)

logger = logging.getLogger(__name__)


@dataclass
class TrialIndex:
    """Normalized trial embeddings, fixed once built."""

    dim: int
    built_from: str
    trial_ids: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        self._row = {t: i for i, t in enumerate(self.trial_ids)}

    def __len__(self) -> int:
        return len(self.trial_ids)

    def __contains__(self, trial_id: str) -> bool:
        return trial_id in self._row

    def vector(self, trial_id: str) -> np.ndarray:
        if trial_id not in self._row:
            raise UnknownCandidate(f"trial {trial_id} is not in the index")
        return self.matrix[self._row[trial_id]]

    @property
    def entries(self) -> list[tuple[str, np.ndarray]]:
        return [(t, self.matrix[i]) for i, t in enumerate(self.trial_ids)]

    def validate(self) -> None:
        if len(self._row) != len(self.trial_ids):
            raise SchemaViolation("index holds duplicate trial_ids")
        if self.matrix.shape != (len(self.trial_ids), self.dim):
            raise SchemaViolation(
                f"index matrix shape {self.matrix.shape} does not match "
                f"{len(self.trial_ids)} ids x dim {self.dim}"
            )
        norms = np.linalg.norm(self.matrix, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise SchemaViolation("index vectors are not normalized")


@dataclass
class RankedResult:
    """Scored candidates for one query, best first."""

    query_id: str
    ranking: list[tuple[str, float]] = field(default_factory=list)

    def trial_ids(self) -> list[str]:
        return [t for t, _ in self.ranking]

    def validate(self) -> None:
        for (ta, sa), (tb, sb) in zip(self.ranking, self.ranking[1:]):
            if sb > sa or (sb == sa and tb < ta):
                raise SchemaViolation(
                    f"query {self.query_id}: ranking out of order at {tb}"
                )
        for _, score in self.ranking:
            if not -1.0 <= score <= 1.0:
                raise SchemaViolation(
                    f"query {self.query_id}: score {score} outside [-1, 1]"
                )


def build_index(
    qa_sets: list[TrialQASet],
    backbone: EncoderBackbone,
    built_from: str | None = None,
    mode: str = "concat",
) -> TrialIndex:
    """Embed every trial once and freeze the result."""
    if not qa_sets:
        raise EmptyCorpus("cannot build an index over zero trials")
    ordered = sorted(qa_sets, key=lambda s: s.trial_id)
    seen: set[str] = set()
    for qa_set in ordered:
        if qa_set.trial_id in seen:
            raise DuplicateTrial(f"trial {qa_set.trial_id} appears twice")
        seen.add(qa_set.trial_id)

    if mode == "concat":
        matrix = encode_texts([trial_input_text(s) for s in ordered], backbone)
    else:
        rows = [encode_trial(s, backbone, mode=mode).vector for s in ordered]
        matrix = np.asarray(rows, dtype=np.float64)
    index = TrialIndex(
        dim=backbone.dim,
        built_from=built_from or backbone.name,
        trial_ids=[s.trial_id for s in ordered],
        matrix=matrix,
    )
    index.validate()
    return index


def _rank(
    query_id: str,
    query_vec: np.ndarray,
    index: TrialIndex,
    candidates: list[str] | None,
    k: int,
    exclude: str | None = None,
) -> RankedResult:
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    query_norm = float(np.linalg.norm(query_vec))
    if query_norm < 1e-12:
        raise ZeroVector("query embedding has zero norm")
    if candidates is None:
        pool = index.trial_ids
    else:
        for trial_id in candidates:
            if trial_id not in index:
                raise UnknownCandidate(f"trial {trial_id} is not in the index")
        pool = candidates
    scored = []
    for trial_id in pool:
        if trial_id == exclude:
            continue
        vec = index.vector(trial_id)
        # score by true cosine, not raw dot: rescaling the stored vectors
        # (or the query) can then never reorder a result
        denom = query_norm * float(np.linalg.norm(vec))
        if denom < 1e-12:
            raise ZeroVector(f"trial {trial_id}: stored vector has zero norm")
        score = float(np.dot(query_vec, vec)) / denom
        scored.append((trial_id, min(1.0, max(-1.0, score))))
    scored.sort(key=lambda item: (-item[1], item[0]))
    result = RankedResult(query_id=query_id, ranking=scored[:k])
    result.validate()
    return result


def search_full(
    query: TrialQASet,
    index: TrialIndex,
    backbone: EncoderBackbone,
    candidates: list[str] | None = None,
    k: int = 10,
) -> RankedResult:
    """Rank trials by cosine to the whole query trial; the query itself,
    if indexed, never appears in its own result."""
    record = encode_trial(query, backbone)
    vec = np.asarray(record.vector, dtype=np.float64)
    return _rank(query.trial_id, vec, index, candidates, k, exclude=query.trial_id)


def search_partial(
    title: str,
    index: TrialIndex,
    backbone: EncoderBackbone,
    extra_sections: dict[str, str | list[str]] | None = None,
    k: int = 10,
    candidates: list[str] | None = None,
    client=None,
    qa_cap: int = 10,
    query_id: str = "partial_query",
) -> RankedResult:
    """Rank against a query built from a title and optional extra sections."""
    if not title or not title.strip():
        raise InvalidInput("partial search needs a non-empty title")
    extra_sections = extra_sections or {}
    unknown = set(extra_sections) - set(SECTIONS[1:])
    if unknown:
        raise ConfigError(f"unknown sections for partial search: {sorted(unknown)}")

    raw: dict = {"trial_id": query_id, "title": title.strip()}
    raw.update(extra_sections)
    protocol = TrialProtocol.from_dict(raw)
    use_llm = bool(protocol.eligibility_criteria.strip())
    if use_llm and client is None:
        raise ConfigError(
            "eligibility_criteria in a partial query needs an LLM client "
            "(or a warmed cache) to derive its Q/A pairs"
        )
    qa_set = assemble_qa_set(
        protocol, client=client, cap=qa_cap, skip_llm=not use_llm
    )
    record = encode_trial(qa_set, backbone)
    vec = np.asarray(record.vector, dtype=np.float64)
    return _rank(query_id, vec, index, candidates, k, exclude=query_id)


def search_patient(
    note: str,
    index: TrialIndex,
    backbone: EncoderBackbone,
    k: int = 10,
    candidates: list[str] | None = None,
    query_id: str = "patient_query",
) -> RankedResult:
    """Zero-shot ranking of trials against a raw patient note."""
    record = encode_text(note, backbone, subject_id=query_id)
    vec = np.asarray(record.vector, dtype=np.float64)
    return _rank(query_id, vec, index, candidates, k)


def save_index(index: TrialIndex, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = [
        EmbeddingRecord(
            subject_id=trial_id,
            subject_kind="trial",
            vector=[float(v) for v in index.matrix[i]],
            dim=index.dim,
        )
        for i, trial_id in enumerate(index.trial_ids)
    ]
    write_jsonl(directory / "embeddings.jsonl", records)
    meta = {"dim": index.dim, "built_from": index.built_from, "count": len(index)}
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_index(directory) -> TrialIndex:
    directory = Path(directory)
    with open(directory / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    records = read_jsonl(directory / "embeddings.jsonl", EmbeddingRecord)
    matrix = np.asarray([r.vector for r in records], dtype=np.float64)
    index = TrialIndex(
        dim=int(meta["dim"]),
        built_from=str(meta["built_from"]),
        trial_ids=[r.subject_id for r in records],
        matrix=matrix,
    )
    index.validate()
    return index
