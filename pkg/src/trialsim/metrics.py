"""Ranking metrics and the bootstrap report.

All metrics use binary relevance and plain sequential float arithmetic, so
results are reproducible to the last bit across runs and platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import NoRelevant, SchemaViolation

METRIC_KEYS = (
    "precision@1",
    "recall@1",
    "precision@2",
    "recall@2",
    "precision@5",
    "recall@5",
    "nDCG@5",
    "MAP",
)


def _ids(ranking) -> list[str]:
    if hasattr(ranking, "ranking"):
        return [t for t, _ in ranking.ranking]
    return list(ranking)


def precision_at_k(ranking, relevant: set[str], k: int) -> float:
    """Fraction of the top k that is relevant."""
    if k < 1:
        raise SchemaViolation(f"k must be at least 1, got {k}")
    ids = _ids(ranking)
    hits = 0
    for trial_id in ids[:k]:
        if trial_id in relevant:
            hits += 1
    return hits / k


def recall_at_k(ranking, relevant: set[str], k: int) -> float:
    """Fraction of all relevant items found in the top k."""
    if k < 1:
        raise SchemaViolation(f"k must be at least 1, got {k}")
    if not relevant:
        raise NoRelevant("recall needs a non-empty relevant set")
    ids = _ids(ranking)
    hits = 0
    for trial_id in ids[:k]:
        if trial_id in relevant:
            hits += 1
    return hits / len(relevant)


def ndcg_at_k(ranking, relevant: set[str], k: int = 5) -> float:
    """Binary-gain nDCG with a log2(rank + 1) discount."""
    if k < 1:
        raise SchemaViolation(f"k must be at least 1, got {k}")
    if not relevant:
        raise NoRelevant("nDCG needs a non-empty relevant set")
    ids = _ids(ranking)
    dcg = 0.0
    for i, trial_id in enumerate(ids[:k]):
        if trial_id in relevant:
            dcg += 1.0 / math.log2(i + 2)
    ideal = 0.0
    for i in range(min(k, len(relevant))):
        ideal += 1.0 / math.log2(i + 2)
    return dcg / ideal


def average_precision(ranking, relevant: set[str]) -> float:
    """Mean of precision at each relevant rank; misses contribute zero."""
    if not relevant:
        raise NoRelevant("average precision needs a non-empty relevant set")
    ids = _ids(ranking)
    hits = 0
    total = 0.0
    for i, trial_id in enumerate(ids):
        if trial_id in relevant:
            hits += 1
            total += hits / (i + 1)
    return total / len(relevant)


def mean_average_precision(rankings: list, relevants: list[set[str]]) -> float:
    if len(rankings) != len(relevants):
        raise SchemaViolation(
            f"{len(rankings)} rankings but {len(relevants)} relevant sets"
        )
    if not rankings:
        raise NoRelevant("MAP needs at least one query")
    total = 0.0
    for ranking, relevant in zip(rankings, relevants):
        total += average_precision(ranking, relevant)
    return total / len(rankings)


def per_query_scores(rankings: list, relevants: list[set[str]]) -> dict[str, list[float]]:
    """All eight metric values for each query, keyed by metric name."""
    scores: dict[str, list[float]] = {key: [] for key in METRIC_KEYS}
    for ranking, relevant in zip(rankings, relevants):
        for k in (1, 2, 5):
            scores[f"precision@{k}"].append(precision_at_k(ranking, relevant, k))
            scores[f"recall@{k}"].append(recall_at_k(ranking, relevant, k))
        scores["nDCG@5"].append(ndcg_at_k(ranking, relevant, 5))
        scores["MAP"].append(average_precision(ranking, relevant))
    return scores


@dataclass
class MetricReport:
    """Bootstrap mean and standard deviation per metric."""

    metrics: dict[str, tuple[float, float]]
    n_queries: int
    sample_size: int
    iterations: int
    seed: int

    def validate(self) -> None:
        for key, (mean, std) in self.metrics.items():
            if not 0.0 <= mean <= 1.0:
                raise SchemaViolation(f"{key}: mean {mean} outside [0, 1]")
            if std < 0.0:
                raise SchemaViolation(f"{key}: negative std {std}")

    def to_dict(self) -> dict:
        return {
            "metrics": {
                key: {"mean": mean, "std": std}
                for key, (mean, std) in self.metrics.items()
            },
            "n_queries": self.n_queries,
            "bootstrap": {
                "sample_size": self.sample_size,
                "iterations": self.iterations,
                "seed": self.seed,
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricReport":
        return cls(
            metrics={
                key: (float(v["mean"]), float(v["std"]))
                for key, v in raw["metrics"].items()
            },
            n_queries=int(raw["n_queries"]),
            sample_size=int(raw["bootstrap"]["sample_size"]),
            iterations=int(raw["bootstrap"]["iterations"]),
            seed=int(raw["bootstrap"]["seed"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def bootstrap_report(
    scores: dict[str, list[float]],
    sample_size: int = 50,
    iterations: int = 100,
    seed: int = 0,
) -> MetricReport:
    """Resample queries with replacement and summarize each metric.

    Every iteration draws one shared index sample, averages each metric over
    it, and the report carries the mean and population std of those
    iteration averages.
    """
    lengths = {len(v) for v in scores.values()}
    if len(lengths) != 1:
        raise SchemaViolation("per-query score lists have differing lengths")
    n = lengths.pop()
    if n < 1:
        raise SchemaViolation("bootstrap needs at least one query")

    rng = np.random.default_rng(seed)
    arrays = {key: np.asarray(values, dtype=np.float64) for key, values in scores.items()}
    means: dict[str, list[float]] = {key: [] for key in scores}
    for _ in range(iterations):
        idx = rng.integers(0, n, size=sample_size)
        for key, arr in arrays.items():
            means[key].append(float(arr[idx].mean()))

    report = MetricReport(
        metrics={
            key: (float(np.mean(vals)), float(np.std(vals)))
            for key, vals in means.items()
        },
        n_queries=n,
        sample_size=sample_size,
        iterations=iterations,
        seed=seed,
    )
    report.validate()
    return report


def format_table(reports: dict[str, MetricReport]) -> str:
    """Fixed-width table: one row per retriever, one column per metric."""
    name_width = max([len(n) for n in reports] + [len("retriever")])
    header = ["retriever".ljust(name_width)]
    header += [key.center(17) for key in METRIC_KEYS]
    lines = ["  ".join(header).rstrip()]
    for name, report in reports.items():
        row = [name.ljust(name_width)]
        for key in METRIC_KEYS:
            mean, std = report.metrics[key]
            row.append(f"{mean:.4f} +/- {std:.4f}".center(17))
        lines.append("  ".join(row).rstrip())
    return "\n".join(lines)
