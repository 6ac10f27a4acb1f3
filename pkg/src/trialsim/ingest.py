"""Registry export parsing, similarity labels, and evaluation queries.

Two input layouts are recognized: line-delimited TrialProtocol records
(*.jsonl) and the pipe-delimited table dump used by the public AACT export
(studies/conditions/interventions/keywords/design_outcomes/eligibilities).
Review groups supply the positive labels; negatives for evaluation come from
same-disease trials, with uniform random sampling as the fallback.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InsufficientCorpus,
    SchemaViolation,
    UnknownTrial,
)
from .records import (
    EvalQuery,
    SimilarityLabel,
    TrialProtocol,
    validate_protocol,
)

logger = logging.getLogger(__name__)

# AACT table name -> (column holding the value, protocol section it feeds)
_TABLES = {
    "studies": ("brief_title", "title"),
    "conditions": ("name", "disease"),
    "interventions": ("name", "intervention"),
    "keywords": ("name", "keywords"),
    "design_outcomes": ("measure", "outcome"),
    "eligibilities": ("criteria", "eligibility_criteria"),
}
_LIST_TARGETS = {"disease", "intervention", "keywords"}


@dataclass
class ReviewGroup:
    """Trials a systematic review analyzed together; all pairwise similar."""

    review_id: str
    member_trial_ids: list[str]

    def validate(self) -> None:
        if not self.review_id:
            raise SchemaViolation("review group without review_id")
        if len(self.member_trial_ids) < 2:
            raise SchemaViolation(
                f"review group {self.review_id}: needs at least 2 members"
            )
        if len(set(self.member_trial_ids)) != len(self.member_trial_ids):
            raise SchemaViolation(
                f"review group {self.review_id}: duplicate member ids"
            )

    def to_dict(self) -> dict:
        return {
            "review_id": self.review_id,
            "member_trial_ids": list(self.member_trial_ids),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ReviewGroup":
        group = cls(
            review_id=str(raw.get("review_id", "")),
            member_trial_ids=[str(t) for t in raw.get("member_trial_ids", [])],
        )
        group.validate()
        return group


def _iter_export_files(path: Path):
    """Yield (stem, text stream) for every export file under path."""
    if path.is_file() and path.suffix == ".zip":
        with zipfile.ZipFile(path) as archive:
            for name in sorted(archive.namelist()):
                inner = Path(name)
                if inner.suffix in (".txt", ".jsonl"):
                    data = archive.read(name).decode("utf-8", errors="replace")
                    yield inner.stem, inner.suffix, io.StringIO(data)
        return
    if path.is_file():
        with open(path, "r", encoding="utf-8") as fh:
            yield path.stem, path.suffix, fh
        return
    if not path.is_dir():
        raise OSError(f"not a readable file or directory: {path}")
    for child in sorted(path.iterdir()):
        if child.suffix in (".txt", ".jsonl") and child.is_file():
            with open(child, "r", encoding="utf-8") as fh:
                yield child.stem, child.suffix, fh


class _CorpusBuilder:
    def __init__(self):
        self.records: dict[str, dict] = {}
        self.order: list[str] = []
        # section rows seen before their trial's studies row (exports list
        # files alphabetically, so studies comes last)
        self.pending: dict[str, list[tuple[str, str]]] = {}
        self.malformed = 0
        self.duplicates = 0
        self.orphans = 0

    def add_study(self, trial_id: str, title: str) -> None:
        if trial_id in self.records:
            self.duplicates += 1
            return
        record = {"trial_id": trial_id, "title": title}
        self.records[trial_id] = record
        self.order.append(trial_id)
        for section, value in self.pending.pop(trial_id, []):
            self._attach(record, section, value)

    def add_value(self, trial_id: str, section: str, value: str) -> None:
        record = self.records.get(trial_id)
        if record is None:
            self.pending.setdefault(trial_id, []).append((section, value))
            return
        self._attach(record, section, value)

    @staticmethod
    def _attach(record: dict, section: str, value: str) -> None:
        if section in _LIST_TARGETS:
            record.setdefault(section, []).append(value)
        elif record.get(section):
            record[section] = record[section] + "; " + value
        else:
            record[section] = value

    def finish(self) -> None:
        self.orphans += sum(len(rows) for rows in self.pending.values())
        self.pending.clear()

    def add_full(self, raw: dict) -> None:
        trial_id = str(raw.get("trial_id", "")).strip()
        if not trial_id:
            self.malformed += 1
            return
        if trial_id in self.records:
            self.duplicates += 1
            return
        self.records[trial_id] = raw
        self.order.append(trial_id)


def _parse_table(stem: str, stream, builder: _CorpusBuilder) -> None:
    value_col, section = _TABLES[stem]
    reader = csv.reader(stream, delimiter="|")
    try:
        header = next(reader)
    except StopIteration:
        return
    columns = {name.strip().lower(): i for i, name in enumerate(header)}
    if "nct_id" not in columns:
        logger.warning("%s: no nct_id column; file skipped", stem)
        return
    id_idx = columns["nct_id"]
    val_idx = columns.get(value_col)
    if val_idx is None and stem == "studies":
        val_idx = columns.get("official_title")
    for row in reader:
        if len(row) <= id_idx or (val_idx is not None and len(row) <= val_idx):
            builder.malformed += 1
            continue
        trial_id = row[id_idx].strip()
        if not trial_id:
            builder.malformed += 1
            continue
        value = row[val_idx].strip() if val_idx is not None else ""
        if stem == "studies":
            builder.add_study(trial_id, value)
        elif value:
            builder.add_value(trial_id, section, value)


def _parse_jsonl(stream, builder: _CorpusBuilder) -> None:
    for line in stream:
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError:
            builder.malformed += 1
            continue
        if isinstance(raw, dict):
            builder.add_full(raw)
        else:
            builder.malformed += 1


def ingest_corpus(path) -> list[TrialProtocol]:
    """Parse an export directory, archive, or single record file.

    Returns one protocol per distinct trial_id, sorted by trial_id; the first
    occurrence of a duplicated id wins. Malformed rows are counted and logged
    rather than aborting the parse.
    """
    path = Path(path)
    builder = _CorpusBuilder()
    saw_file = False
    for stem, suffix, stream in _iter_export_files(path):
        saw_file = True
        if suffix == ".jsonl":
            _parse_jsonl(stream, builder)
        elif stem in _TABLES:
            _parse_table(stem, stream, builder)
        else:
            logger.info("ignoring unrecognized export file %s%s", stem, suffix)
    builder.finish()
    if not saw_file or not builder.records:
        raise FormatError(f"no recognizable trial records under {path}")

    protocols = []
    for trial_id in builder.order:
        try:
            protocols.append(validate_protocol(builder.records[trial_id]))
        except SchemaViolation as exc:
            builder.malformed += 1
            logger.warning("dropping trial %s: %s", trial_id, exc)
    if not protocols:
        raise FormatError(f"all trial records under {path} were malformed")
    if builder.malformed or builder.duplicates or builder.orphans:
        logger.warning(
            "ingest: %d trials kept, %d malformed rows, %d duplicate ids, "
            "%d rows for unknown trials",
            len(protocols), builder.malformed, builder.duplicates, builder.orphans,
        )
    else:
        logger.info("ingest: %d trials kept", len(protocols))
    return sorted(protocols, key=lambda p: p.trial_id)


def read_review_groups(path) -> list[ReviewGroup]:
    groups = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                groups.append(ReviewGroup.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"{path}:{lineno}: bad JSON: {exc}") from exc
    return groups


def write_review_groups(path, groups: list[ReviewGroup]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for group in groups:
            fh.write(json.dumps(group.to_dict(), sort_keys=True) + "\n")


def build_labels(
    groups: list[ReviewGroup], corpus_ids: set[str]
) -> list[SimilarityLabel]:
    """Relevant labels for every ordered pair inside each review group."""
    labels: list[SimilarityLabel] = []
    seen: set[tuple[str, str]] = set()
    for group in groups:
        group.validate()
        for member in group.member_trial_ids:
            if member not in corpus_ids:
                raise UnknownTrial(
                    f"review group {group.review_id}: trial {member} "
                    "is not in the corpus"
                )
        for a in group.member_trial_ids:
            for b in group.member_trial_ids:
                if a == b or (a, b) in seen:
                    continue
                seen.add((a, b))
                labels.append(SimilarityLabel(a, b, True, source="review"))
    return labels


def split_groups(
    groups: list[ReviewGroup],
    seed: int,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
) -> dict[str, list[ReviewGroup]]:
    """Shuffle review groups and split them group-wise, never trial-wise."""
    if not 0 <= val_fraction + test_fraction < 1:
        raise SchemaViolation("val_fraction + test_fraction must stay below 1")
    ordered = sorted(groups, key=lambda g: g.review_id)
    rng = np.random.default_rng(seed)
    rng.shuffle(ordered)
    n = len(ordered)
    n_test = min(int(round(n * test_fraction)), max(n - 1, 0))
    n_val = min(int(round(n * val_fraction)), max(n - 1 - n_test, 0))
    test = ordered[:n_test]
    val = ordered[n_test : n_test + n_val]
    train = ordered[n_test + n_val :]
    return {"train": train, "val": val, "test": test}


def group_trial_ids(groups: list[ReviewGroup]) -> set[str]:
    ids: set[str] = set()
    for group in groups:
        ids.update(group.member_trial_ids)
    return ids


def _disease_tokens(protocol: TrialProtocol) -> set[str]:
    return {d.strip().lower() for d in protocol.disease if d.strip()}


def build_eval_queries(
    labels: list[SimilarityLabel],
    corpus: list[TrialProtocol],
    per_query: int = 10,
    seed: int = 0,
    exclude_ids: set[str] | None = None,
) -> list[EvalQuery]:
    """One fixed candidate set per query trial appearing in a relevant label.

    Candidates are the query's relevant trials (capped at per_query - 1,
    keeping the lexicographically smallest ids) topped up with same-disease
    negatives outside exclude_ids and the relevant set; when the disease pool
    runs dry, the remainder is drawn uniformly from the rest of the corpus.
    """
    if per_query < 2:
        raise SchemaViolation(f"per_query must be at least 2, got {per_query}")
    exclude_ids = exclude_ids or set()
    by_id = {p.trial_id: p for p in corpus}
    if len(by_id) < per_query:
        raise InsufficientCorpus(
            f"corpus has {len(by_id)} trials, need at least {per_query}"
        )

    relevant_map: dict[str, set[str]] = {}
    for label in labels:
        if label.relevant:
            relevant_map.setdefault(label.query_trial_id, set()).add(
                label.candidate_trial_id
            )

    rng = np.random.default_rng(seed)
    queries: list[EvalQuery] = []
    for query_id in sorted(relevant_map):
        if query_id not in by_id:
            raise UnknownTrial(f"query trial {query_id} is not in the corpus")
        all_relevant = relevant_map[query_id]
        for trial_id in sorted(all_relevant):
            if trial_id not in by_id:
                raise UnknownTrial(
                    f"relevant trial {trial_id} for query {query_id} "
                    "is not in the corpus"
                )
        kept = sorted(all_relevant)[: per_query - 1]
        needed = per_query - len(kept)

        diseases = _disease_tokens(by_id[query_id])
        blocked = all_relevant | {query_id}
        pool = sorted(
            t for t, p in by_id.items()
            if t not in blocked
            and t not in exclude_ids
            and diseases & _disease_tokens(p)
        )
        if len(pool) >= needed:
            negatives = list(rng.choice(pool, size=needed, replace=False))
        else:
            negatives = list(pool)
            fallback = sorted(
                t for t in by_id
                if t not in blocked
                and t not in exclude_ids
                and t not in set(negatives)
            )
            remaining = needed - len(negatives)
            if len(fallback) < remaining:
                raise InsufficientCorpus(
                    f"query {query_id}: only {len(negatives) + len(fallback)} "
                    f"possible negatives, need {needed}"
                )
            logger.info(
                "query %s: %d same-disease negatives, %d random",
                query_id, len(negatives), remaining,
            )
            negatives.extend(rng.choice(fallback, size=remaining, replace=False))

        candidates = [(t, True) for t in kept]
        candidates += [(str(t), False) for t in negatives]
        query = EvalQuery(
            query_id=query_id, query_kind="full_trial", candidates=candidates
        )
        query.validate(per_query=per_query)
        queries.append(query)
    return queries
