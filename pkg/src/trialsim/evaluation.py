"""Evaluation harness: run a retriever over eval queries and report metrics.

Each query is ranked only over its own fixed candidate list, mirroring how
the labeled evaluation sets are constructed (a query trial plus a small pool
of relevant and same-disease candidates).
"""

from __future__ import annotations

import json
import logging

from .baselines import SparseCorpus, bm25_rank, tfidf_rank
from .encoder import EncoderBackbone, trial_input_text
from .errors import ConfigError, UnknownCandidate
from .metrics import MetricReport, bootstrap_report, per_query_scores
from .records import EvalQuery, TrialQASet
from .retrieval import RankedResult, TrialIndex, search_full
from .qa import predefined_qa
from .records import TrialProtocol

logger = logging.getLogger(__name__)


class DenseRetriever:
    """Ranks with the embedding index; query text comes from the Q/A sets."""

    def __init__(
        self,
        index: TrialIndex,
        backbone: EncoderBackbone,
        qa_sets: dict[str, TrialQASet],
        name: str = "dense",
    ):
        self.index = index
        self.backbone = backbone
        self.qa_sets = qa_sets
        self.name = name

    def rank(self, query: EvalQuery) -> RankedResult:
        qa_set = self.qa_sets.get(query.query_id)
        if qa_set is None:
            raise UnknownCandidate(f"query trial {query.query_id} has no Q/A set")
        pool = query.candidate_ids()
        return search_full(
            qa_set, self.index, self.backbone, candidates=pool, k=len(pool)
        )


class PartialTitleRetriever:
    """Dense ranking from the query trial's title alone."""

    def __init__(
        self,
        index: TrialIndex,
        backbone: EncoderBackbone,
        protocols: dict[str, TrialProtocol],
        name: str = "dense_title",
    ):
        self.index = index
        self.backbone = backbone
        self.protocols = protocols
        self.name = name

    def rank(self, query: EvalQuery) -> RankedResult:
        protocol = self.protocols.get(query.query_id)
        if protocol is None or not protocol.title.strip():
            raise UnknownCandidate(
                f"query trial {query.query_id} has no titled protocol"
            )
        title_only = TrialProtocol(trial_id=query.query_id, title=protocol.title)
        qa_set = TrialQASet(
            trial_id=query.query_id, pairs=predefined_qa(title_only)
        )
        pool = query.candidate_ids()
        return search_full(
            qa_set, self.index, self.backbone, candidates=pool, k=len(pool)
        )


class SparseRetriever:
    """BM25 or TF-IDF over the same trial texts the encoder sees."""

    def __init__(self, texts: dict[str, str], kind: str = "bm25"):
        if kind not in ("bm25", "tfidf"):
            raise ConfigError(f"unknown sparse baseline {kind!r}")
        self.kind = kind
        self.name = kind
        self.texts = texts
        self.corpus = SparseCorpus(texts)

    def rank(self, query: EvalQuery) -> RankedResult:
        text = self.texts.get(query.query_id)
        if text is None:
            raise UnknownCandidate(f"query trial {query.query_id} has no text")
        pool = query.candidate_ids()
        rank_fn = bm25_rank if self.kind == "bm25" else tfidf_rank
        return rank_fn(
            text, self.corpus, k=len(pool), query_id=query.query_id, candidates=pool
        )


def trial_texts(qa_sets: dict[str, TrialQASet]) -> dict[str, str]:
    return {t: trial_input_text(s) for t, s in qa_sets.items()}


def evaluate(
    retriever,
    eval_queries: list[EvalQuery],
    sample_size: int = 50,
    iterations: int = 100,
    seed: int = 0,
) -> tuple[MetricReport, dict[str, list[float]]]:
    """Rank every query, score all eight metrics, bootstrap the summary."""
    if not eval_queries:
        raise ConfigError("evaluate needs at least one query")
    rankings = []
    relevants = []
    for query in eval_queries:
        query.validate()
        rankings.append(retriever.rank(query))
        relevants.append(query.relevant_ids())
    scores = per_query_scores(rankings, relevants)
    report = bootstrap_report(scores, sample_size, iterations, seed)
    return report, scores


def write_per_query_scores(
    path, eval_queries: list[EvalQuery], scores: dict[str, list[float]]
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, query in enumerate(eval_queries):
            row = {"query_id": query.query_id}
            row.update({key: values[i] for key, values in scores.items()})
            fh.write(json.dumps(row, sort_keys=True) + "\n")
