"""Synthetic planted-cluster corpus for end-to-end checks and demos.

Trials come in clusters of mutually similar protocols. Cluster identity is
carried by a signature: a fixed subset of a shared signal vocabulary, spread
over title, intervention, keywords, outcome and eligibility answers. The
answers mix signature tokens with high-frequency filler tokens that are
deliberately shared across clusters, so bag-of-words similarity is noisy
before fine-tuning; training has to learn to weight signal tokens over
filler, and because both vocabularies are shared corpus-wide, what it learns
carries over to clusters held out from training.
Clusters are paired into disease families: trials in paired clusters share
one disease string, which is what makes same-disease hard negatives and
evaluation negatives available.

Every trial's eligibility Q/A completion is written to the LLM cache up
front, so the whole pipeline runs offline. A few completions are wrapped in
chat prose and one trial per cluster over-generates pairs, exercising the
tolerant parser and the per-trial cap.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import tokenize
from .ingest import ReviewGroup, write_review_groups
from .llm import LlmClient, LlmClientConfig
from .qa import PREDEFINED_QUESTIONS, format_qa_pairs
from .records import EvalQuery, TrainingConfig, TrialProtocol, write_jsonl

logger = logging.getLogger(__name__)

_QUESTION_TEMPLATES = [
    "What is the minimum age required?",
    "Which prior treatments are allowed?",
    "What laboratory values are required?",
    "Which comorbidities are excluded?",
    "What performance status is required?",
    "Which medications must be stopped?",
    "What consent conditions apply?",
    "Which imaging findings are required?",
    "What pregnancy restrictions apply?",
    "Which organ functions are assessed?",
    "What prior surgeries are excluded?",
    "Which infections are disqualifying?",
]

# Every fixed word the generated trials can contain. Signal and filler tokens
# must not share an encoder row with these or with each other: a collision
# would let filler mass masquerade as a cluster signature.
_SCAFFOLD_TEXT = " ".join(
    _QUESTION_TEMPLATES
    + list(PREDEFINED_QUESTIONS.values())
    + ["trial for disease syndrome agent change in score"]
    + [f"family{f}" for f in range(16)]
    + [f"cluster{c:02d}" for c in range(32)]
)

# default vocabulary of the trainable hashed encoder
_VOCAB_ROWS = 4096


def _hash_distinct(prefix: str, count: int, used: set[int]) -> list[str]:
    tokens = []
    i = 0
    while len(tokens) < count:
        name = f"{prefix}{i:02d}"
        i += 1
        row = zlib.crc32(name.encode("utf-8")) % _VOCAB_ROWS
        if row in used:
            continue
        used.add(row)
        tokens.append(name)
    return tokens


_USED_ROWS = {
    zlib.crc32(t.encode("utf-8")) % _VOCAB_ROWS for t in tokenize(_SCAFFOLD_TEXT)
}
SIGNAL_TOKENS = _hash_distinct("sig", 48, _USED_ROWS)
SIGNATURE_SIZE = 12
FILLER_TOKENS = _hash_distinct("filler", 24, _USED_ROWS)
FILLERS_PER_ANSWER = 4


def _trial_id(cluster: int, member: int) -> str:
    return f"NCT{cluster * 100 + member:08d}"


@dataclass
class SynthCorpus:
    """Corpus plus the bookkeeping the tests and the demo pipeline need."""

    protocols: list[TrialProtocol]
    cluster_of: dict[str, int] = field(default_factory=dict)
    fixtures: dict[str, str] = field(default_factory=dict)
    n_clusters: int = 0
    per_cluster: int = 0
    seed: int = 0

    def cluster_members(self, cluster: int) -> list[str]:
        return sorted(t for t, c in self.cluster_of.items() if c == cluster)

    def trial_ids(self, clusters: list[int]) -> list[str]:
        wanted = set(clusters)
        return sorted(t for t, c in self.cluster_of.items() if c in wanted)

    def review_groups(self, clusters: list[int]) -> list[ReviewGroup]:
        return [
            ReviewGroup(
                review_id=f"review{c:02d}",
                member_trial_ids=self.cluster_members(c),
            )
            for c in sorted(clusters)
        ]


def _eligibility_pairs(
    rng: np.random.Generator, n_pairs: int, kept: list[str]
) -> list[tuple[str, str]]:
    pairs = []
    for i in range(n_pairs):
        question = _QUESTION_TEMPLATES[i % len(_QUESTION_TEMPLATES)]
        fillers = rng.choice(FILLER_TOKENS, size=FILLERS_PER_ANSWER, replace=True)
        signals = rng.choice(kept, size=1, replace=False)
        tokens = rng.permutation(np.concatenate([fillers, signals]))
        pairs.append((question, " ".join(tokens.tolist())))
    return pairs


def _criteria_text(pairs: list[tuple[str, str]]) -> str:
    lines = ["Inclusion Criteria:"]
    lines += [f"- {question} {answer}." for question, answer in pairs]
    lines.append("Exclusion Criteria:")
    lines.append("- Participation in a conflicting study.")
    return "\n".join(lines)


def _completion(pairs: list[tuple[str, str]], prose: bool) -> str:
    body = format_qa_pairs(pairs)
    if not prose:
        return body
    return (
        "Sure, here are the question and answer pairs extracted from the "
        "eligibility criteria:\n\n" + body + "\n\nLet me know if you need "
        "anything else."
    )


def build_corpus(
    n_clusters: int = 8, per_cluster: int = 5, seed: int = 11
) -> SynthCorpus:
    """Deterministically generate the planted-cluster corpus."""
    rng = np.random.default_rng(seed)
    corpus = SynthCorpus(
        protocols=[],
        n_clusters=n_clusters,
        per_cluster=per_cluster,
        seed=seed,
    )
    for cluster in range(n_clusters):
        family = cluster // 2
        chosen = rng.choice(len(SIGNAL_TOKENS), size=SIGNATURE_SIZE, replace=False)
        signature = [SIGNAL_TOKENS[i] for i in sorted(chosen.tolist())]
        for member in range(per_cluster):
            trial_id = _trial_id(cluster, member)
            drop = set(rng.choice(len(signature), size=2, replace=False).tolist())
            kept = [s for i, s in enumerate(signature) if i not in drop]
            # member 2 over-generates past the per-trial cap; after
            # truncation every trial carries the same ten questions, so the
            # question scaffold is identical corpus-wide and similarity
            # differences come only from the planted tokens
            n_pairs = 12 if member == 2 else 10
            qa_pairs = _eligibility_pairs(rng, n_pairs, kept)

            protocol = TrialProtocol(
                trial_id=trial_id,
                title=f"{kept[0]} {kept[1]} {kept[2]} trial for family{family} disease",
                disease=[f"family{family} disease", f"cluster{cluster:02d} syndrome"],
                intervention=[f"{kept[3]} {kept[4]} agent"],
                keywords=[kept[5], kept[6], kept[7]],
                outcome=f"change in {kept[8]} {kept[9]} score",
                eligibility_criteria=_criteria_text(qa_pairs),
            )
            protocol.validate()
            corpus.protocols.append(protocol)
            corpus.cluster_of[trial_id] = cluster
            corpus.fixtures[trial_id] = _completion(qa_pairs, prose=(member == 1))
    return corpus


def demo_training_config(seed: int = 7) -> TrainingConfig:
    """Training recipe tuned for the planted corpus and the dim-64 encoder.

    Sharp temperature and full-corpus trial batches: with near-duplicate
    texts the similarity spread is small, so the softmax needs sharpening
    before positives separate from hard negatives.
    """
    return TrainingConfig(
        tau=0.015,
        lr_local=5e-3,
        lr_global=7e-3,
        epochs_local=12,
        epochs_global=60,
        batch_local=32,
        batch_global=40,
        weight_decay=0.01,
        seed=seed,
    )


def write_fixture_cache(
    corpus: SynthCorpus, cache_dir, model_name: str = "fixture"
) -> Path:
    """Seed the completion cache so the pipeline runs fully offline."""
    client = LlmClient(
        LlmClientConfig(model_name=model_name, cache_dir=str(cache_dir), offline=True)
    )
    for protocol in corpus.protocols:
        client.store_completion(
            protocol.eligibility_criteria, corpus.fixtures[protocol.trial_id]
        )
    logger.info(
        "wrote %d fixture completions under %s", len(corpus.protocols), cache_dir
    )
    return Path(cache_dir)


def write_corpus_files(corpus: SynthCorpus, out_dir, labeled_clusters: list[int]) -> None:
    """Write trials.jsonl and review_groups.jsonl for the CLI pipeline."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(out_dir / "trials.jsonl", corpus.protocols)
    write_review_groups(
        out_dir / "review_groups.jsonl", corpus.review_groups(labeled_clusters)
    )


def heldout_queries(
    corpus: SynthCorpus,
    query_clusters: list[int],
    per_query: int = 10,
    seed: int = 0,
    negative_clusters: list[int] | None = None,
) -> list[EvalQuery]:
    """One query per trial in the given clusters, each with one relevant.

    The relevant candidate is the next trial in the same cluster; the other
    cluster mates are left out of the candidate list entirely. Negatives
    prefer the paired same-family cluster and are topped up at random,
    restricted to negative_clusters when given (the usual split hygiene:
    candidates come from the same held-out region as the queries).
    """
    rng = np.random.default_rng(seed)
    queries = []
    for cluster in sorted(query_clusters):
        members = corpus.cluster_members(cluster)
        partner = corpus.cluster_members(cluster ^ 1)
        for i, query_id in enumerate(members):
            sibling = members[(i + 1) % len(members)]
            negatives = list(partner)
            allowed = negative_clusters
            others = sorted(
                t for t, c in corpus.cluster_of.items()
                if c != cluster and t not in negatives
                and (allowed is None or c in allowed)
            )
            needed = per_query - 1 - len(negatives)
            if needed > 0:
                negatives += list(rng.choice(others, size=needed, replace=False))
            else:
                negatives = negatives[: per_query - 1]
            candidates = [(sibling, True)]
            candidates += [(str(t), False) for t in negatives]
            query = EvalQuery(
                query_id=query_id, query_kind="full_trial", candidates=candidates
            )
            query.validate(per_query=per_query)
            queries.append(query)
    return queries
