"""Sparse lexical baselines: TF-IDF cosine and Okapi BM25.

Both share the encoder's tokenizer (lowercase, split on non-alphanumerics)
and break score ties lexicographically by trial_id, like the dense retriever.
Query terms missing from the corpus vocabulary contribute zero weight.
"""

from __future__ import annotations

import math
from collections import Counter

from .encoder import tokenize
from .errors import EmptyCorpus, UnknownCandidate
from .retrieval import RankedResult

BM25_K1 = 1.2
BM25_B = 0.75


def _as_pairs(corpus_texts) -> list[tuple[str, str]]:
    if hasattr(corpus_texts, "items"):
        pairs = list(corpus_texts.items())
    else:
        pairs = list(corpus_texts)
    if not pairs:
        raise EmptyCorpus("baseline ranking needs a non-empty corpus")
    return sorted(pairs, key=lambda item: item[0])


class SparseCorpus:
    """Shared document statistics for the lexical baselines."""

    def __init__(self, corpus_texts):
        pairs = _as_pairs(corpus_texts)
        self.doc_ids = [doc_id for doc_id, _ in pairs]
        self.doc_tokens = {doc_id: tokenize(text) for doc_id, text in pairs}
        self.doc_counts = {
            doc_id: Counter(tokens) for doc_id, tokens in self.doc_tokens.items()
        }
        self.n_docs = len(self.doc_ids)
        self.df: Counter = Counter()
        for counts in self.doc_counts.values():
            self.df.update(counts.keys())
        total_len = sum(len(t) for t in self.doc_tokens.values())
        self.avgdl = total_len / self.n_docs
        self.vocab = sorted(self.df)

    def _pool(self, candidates: list[str] | None) -> list[str]:
        if candidates is None:
            return self.doc_ids
        for doc_id in candidates:
            if doc_id not in self.doc_counts:
                raise UnknownCandidate(f"document {doc_id} is not in the corpus")
        return list(candidates)

    def bm25_scores(self, query_text: str, candidates=None) -> list[tuple[str, float]]:
        query_tokens = tokenize(query_text)
        idf = {}
        for term in query_tokens:
            if term not in idf:
                df = self.df.get(term, 0)
                idf[term] = math.log(
                    1.0 + (self.n_docs - df + 0.5) / (df + 0.5)
                )
        scored = []
        for doc_id in self._pool(candidates):
            counts = self.doc_counts[doc_id]
            dl = len(self.doc_tokens[doc_id])
            score = 0.0
            for term in query_tokens:
                tf = counts.get(term, 0)
                if tf == 0:
                    continue
                norm = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avgdl)
                score += idf[term] * (tf * (BM25_K1 + 1.0)) / norm
            scored.append((doc_id, score))
        return scored

    def _tfidf_vector(self, counts: Counter) -> dict[str, float]:
        vector = {}
        for term, tf in counts.items():
            df = self.df.get(term, 0)
            if df == 0:
                continue
            idf = math.log((1.0 + self.n_docs) / (1.0 + df)) + 1.0
            vector[term] = tf * idf
        return vector

    def tfidf_scores(self, query_text: str, candidates=None) -> list[tuple[str, float]]:
        query_vec = self._tfidf_vector(Counter(tokenize(query_text)))
        query_norm = _norm(query_vec)
        scored = []
        for doc_id in self._pool(candidates):
            doc_vec = self._tfidf_vector(self.doc_counts[doc_id])
            doc_norm = _norm(doc_vec)
            if query_norm == 0.0 or doc_norm == 0.0:
                scored.append((doc_id, 0.0))
                continue
            dot = 0.0
            for term in sorted(query_vec):
                if term in doc_vec:
                    dot += query_vec[term] * doc_vec[term]
            scored.append((doc_id, dot / (query_norm * doc_norm)))
        return scored


def _norm(vector: dict[str, float]) -> float:
    # accumulate in sorted-term order so the value is order-independent
    total = 0.0
    for term in sorted(vector):
        total += vector[term] * vector[term]
    return math.sqrt(total)


def _to_result(query_id: str, scored: list[tuple[str, float]], k: int) -> RankedResult:
    scored = sorted(scored, key=lambda item: (-item[1], item[0]))
    return RankedResult(query_id=query_id, ranking=scored[:k])


def tfidf_rank(
    query_text: str,
    corpus_texts,
    k: int = 10,
    query_id: str = "tfidf_query",
    candidates: list[str] | None = None,
) -> RankedResult:
    """Cosine over raw-count TF with smoothed log idf."""
    corpus = corpus_texts if isinstance(corpus_texts, SparseCorpus) else SparseCorpus(corpus_texts)
    return _to_result(query_id, corpus.tfidf_scores(query_text, candidates), k)


def bm25_rank(
    query_text: str,
    corpus_texts,
    k: int = 10,
    query_id: str = "bm25_query",
    candidates: list[str] | None = None,
) -> RankedResult:
    """Okapi BM25 with k1=1.2, b=0.75 and a non-negative idf."""
    corpus = corpus_texts if isinstance(corpus_texts, SparseCorpus) else SparseCorpus(corpus_texts)
    return _to_result(query_id, corpus.bm25_scores(query_text, candidates), k)
