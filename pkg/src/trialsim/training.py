"""Two-stage contrastive fine-tuning of a trainable backbone.

Stage one trains on Q/A pairs against positives mined once from the
pre-finetune weights. Stage two trains on whole-trial texts: unlabeled trials
pair with a drop-one view of themselves, labeled trials pair with a trial
their review group marked similar, plus one same-disease hard negative when
the corpus offers one. Validation precision@1 picks the checkpoint to keep.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import HashedBowEncoder, trial_input_text
from .errors import ConfigError, DegenerateBatch, NonFiniteLoss
from .losses import global_loss_grad, local_infonce_grad
from .mining import MinedPositive, build_mining_pools, mine_local_positives
from .records import (
    EvalQuery,
    SimilarityLabel,
    TrainingConfig,
    TrialProtocol,
    TrialQASet,
)

logger = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay, for a single dense parameter."""

    def __init__(
        self,
        shape: tuple[int, ...],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * (
            m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params
        )


@dataclass
class TrialExample:
    """One trial-level training instance for the global stage."""

    trial_id: str
    anchor_text: str
    positive_text: str
    negative_text: str | None
    labeled: bool


def _disease_tokens(protocol: TrialProtocol) -> set[str]:
    return {d.strip().lower() for d in protocol.disease if d.strip()}


def _similar_neighbors(labels: list[SimilarityLabel]) -> dict[str, set[str]]:
    neighbors: dict[str, set[str]] = {}
    for label in labels:
        if not label.relevant:
            continue
        neighbors.setdefault(label.query_trial_id, set()).add(label.candidate_trial_id)
        neighbors.setdefault(label.candidate_trial_id, set()).add(label.query_trial_id)
    return neighbors


def _drop_one_text(qa_set: TrialQASet, rng: np.random.Generator) -> str:
    pairs = qa_set.canonical_pairs()
    if len(pairs) < 2:
        return qa_set.text()
    drop = int(rng.integers(len(pairs)))
    kept = [p for i, p in enumerate(pairs) if i != drop]
    return "; ".join(p.text() for p in kept)


def build_trial_examples(
    qa_sets: dict[str, TrialQASet],
    protocols: dict[str, TrialProtocol],
    labels: list[SimilarityLabel],
    train_ids: list[str],
    labeled_ids: set[str],
    rng: np.random.Generator,
) -> list[TrialExample]:
    """Sample one anchor/positive(/negative) instance per training trial.

    Positives and hard negatives are re-drawn on every call, so each epoch
    sees a fresh sample.
    """
    usable = [t for t in sorted(train_ids) if t in qa_sets]
    for missing in sorted(set(train_ids) - set(usable)):
        logger.warning("trial %s has no Q/A set; skipping example", missing)
    usable_set = set(usable)
    neighbors = _similar_neighbors(labels)

    examples: list[TrialExample] = []
    for trial_id in usable:
        anchor_text = qa_sets[trial_id].text()
        similar = sorted(neighbors.get(trial_id, set()) & usable_set - {trial_id})
        if trial_id in labeled_ids and similar:
            pick = similar[int(rng.integers(len(similar)))]
            positive_text = qa_sets[pick].text()
            negative_text = None
            anchor_proto = protocols.get(trial_id)
            if anchor_proto is not None:
                diseases = _disease_tokens(anchor_proto)
                candidates = []
                for other in usable:
                    if other == trial_id or other in neighbors.get(trial_id, set()):
                        continue
                    proto = protocols.get(other)
                    if proto is not None and diseases & _disease_tokens(proto):
                        candidates.append(other)
                if candidates:
                    neg = candidates[int(rng.integers(len(candidates)))]
                    negative_text = qa_sets[neg].text()
            examples.append(
                TrialExample(trial_id, anchor_text, positive_text, negative_text, True)
            )
        else:
            positive_text = _drop_one_text(qa_sets[trial_id], rng)
            examples.append(
                TrialExample(trial_id, anchor_text, positive_text, None, False)
            )
    return examples


def _mixed_batches(
    examples: list[TrialExample],
    batch_size: int,
    labeled_fraction: float | None,
    rng: np.random.Generator,
) -> list[list[TrialExample]]:
    labeled = [e for e in examples if e.labeled]
    unlabeled = [e for e in examples if not e.labeled]
    rng.shuffle(labeled)
    rng.shuffle(unlabeled)
    if labeled_fraction is None:
        fraction = len(labeled) / len(examples) if examples else 0.0
    else:
        fraction = labeled_fraction

    batches: list[list[TrialExample]] = []
    li = ui = 0
    while li < len(labeled) or ui < len(unlabeled):
        want_labeled = round(batch_size * fraction)
        batch: list[TrialExample] = []
        take = min(want_labeled, len(labeled) - li)
        batch.extend(labeled[li : li + take])
        li += take
        take = min(batch_size - len(batch), len(unlabeled) - ui)
        batch.extend(unlabeled[ui : ui + take])
        ui += take
        take = min(batch_size - len(batch), len(labeled) - li)
        batch.extend(labeled[li : li + take])
        li += take
        if len(batch) >= 2:
            batches.append(batch)
        else:
            logger.debug("dropping undersized batch of %d", len(batch))
    return batches


@dataclass
class TrainingReport:
    """Per-epoch record of both stages, written next to the checkpoints."""

    config: dict
    mined_pairs: int = 0
    local_epoch_losses: list[float] = field(default_factory=list)
    global_epoch_losses: list[float] = field(default_factory=list)
    val_precision_at_1: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    example_counts: list[int] = field(default_factory=list)
    skipped_batches: int = 0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "mined_pairs": self.mined_pairs,
            "local_epoch_losses": self.local_epoch_losses,
            "global_epoch_losses": self.global_epoch_losses,
            "val_precision_at_1": self.val_precision_at_1,
            "best_epoch": self.best_epoch,
            "example_counts": self.example_counts,
            "skipped_batches": self.skipped_batches,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainingReport":
        return cls(**raw)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def _require_trainable(backbone) -> HashedBowEncoder:
    if not getattr(backbone, "trainable", False):
        raise ConfigError(
            f"backbone {backbone.name!r} is not trainable; use the hashed "
            "bag-of-words backbone for fine-tuning"
        )
    return backbone


def _check_finite(loss: float, stage: str) -> None:
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"{stage} loss became {loss}")


def precision_at_1(
    backbone, qa_sets: dict[str, TrialQASet], queries: list[EvalQuery]
) -> float:
    """Share of queries whose top-1 cosine candidate is relevant."""
    needed: set[str] = set()
    usable: list[EvalQuery] = []
    for query in queries:
        ids = [query.query_id] + query.candidate_ids()
        if all(t in qa_sets for t in ids):
            usable.append(query)
            needed.update(ids)
        else:
            logger.warning("query %s: missing Q/A sets; skipped", query.query_id)
    if not usable:
        return 0.0

    ordered = sorted(needed)
    matrix = backbone.encode_batch([trial_input_text(qa_sets[t]) for t in ordered])
    matrix = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
    vec = {t: matrix[i] for i, t in enumerate(ordered)}

    hits = 0
    for query in usable:
        scored = sorted(
            query.candidates,
            key=lambda c: (-float(np.dot(vec[query.query_id], vec[c[0]])), c[0]),
        )
        hits += int(scored[0][1])
    return hits / len(usable)


def train_local(
    qa_sets: dict[str, TrialQASet],
    train_ids: list[str],
    config: TrainingConfig,
    backbone,
    mined: list[MinedPositive] | None = None,
) -> tuple[list[float], list[MinedPositive]]:
    """Q/A-level stage. Returns per-epoch mean losses and the mined pairs."""
    backbone = _require_trainable(backbone)
    config.validate()
    if mined is None:
        frozen = backbone.clone()
        pools = build_mining_pools(
            [qa_sets[t] for t in sorted(train_ids) if t in qa_sets], frozen
        )
        mined = mine_local_positives(pools)
    logger.info("local stage: %d mined anchor/positive pairs", len(mined))

    rng = np.random.default_rng(config.seed)
    optimizer = AdamW(
        backbone.weights.shape, config.lr_local, weight_decay=config.weight_decay
    )
    epoch_losses: list[float] = []
    order = list(range(len(mined)))
    for epoch in range(config.epochs_local):
        rng.shuffle(order)
        losses: list[float] = []
        for start in range(0, len(order), config.batch_local):
            chunk = [mined[i] for i in order[start : start + config.batch_local]]
            if len(chunk) < 2:
                continue
            anchors, cache_a = backbone.forward([m.anchor_text for m in chunk])
            positives, cache_p = backbone.forward([m.positive_text for m in chunk])
            try:
                loss, grad_a, grad_p = local_infonce_grad(
                    anchors, positives, config.tau
                )
            except DegenerateBatch as exc:
                logger.warning("skipping local batch: %s", exc)
                continue
            _check_finite(loss, "local")
            grad = backbone.backward(cache_a, grad_a)
            grad += backbone.backward(cache_p, grad_p)
            optimizer.step(backbone.weights, grad)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        epoch_losses.append(mean_loss)
        logger.info("local epoch %d/%d loss %.6f", epoch + 1, config.epochs_local, mean_loss)
    return epoch_losses, mined


def train_global(
    qa_sets: dict[str, TrialQASet],
    protocols: dict[str, TrialProtocol],
    labels: list[SimilarityLabel],
    train_ids: list[str],
    labeled_ids: set[str],
    config: TrainingConfig,
    backbone,
    val_queries: list[EvalQuery] | None = None,
) -> TrainingReport:
    """Trial-level stage with per-epoch validation checkpointing."""
    backbone = _require_trainable(backbone)
    config.validate()
    rng = np.random.default_rng(config.seed + 1)
    optimizer = AdamW(
        backbone.weights.shape, config.lr_global, weight_decay=config.weight_decay
    )
    report = TrainingReport(config=config.to_dict())

    best_weights = backbone.weights.copy()
    best_score = -1.0
    dim = backbone.dim
    for epoch in range(config.epochs_global):
        examples = build_trial_examples(
            qa_sets, protocols, labels, train_ids, labeled_ids, rng
        )
        report.example_counts.append(len(examples))
        batches = _mixed_batches(
            examples, config.batch_global, config.labeled_fraction, rng
        )
        losses: list[float] = []
        for batch in batches:
            anchors, cache_a = backbone.forward([e.anchor_text for e in batch])
            positives, cache_p = backbone.forward([e.positive_text for e in batch])
            mask = np.array([e.negative_text is not None for e in batch])
            negatives = np.ones((len(batch), dim))
            cache_n = None
            if mask.any():
                neg_rows, cache_n = backbone.forward(
                    [e.negative_text for e in batch if e.negative_text is not None]
                )
                negatives[mask] = neg_rows
            try:
                loss, grad_a, grad_p, grad_n = global_loss_grad(
                    anchors, positives, config.tau, negatives, mask
                )
            except DegenerateBatch as exc:
                logger.warning("skipping global batch: %s", exc)
                report.skipped_batches += 1
                continue
            _check_finite(loss, "global")
            grad = backbone.backward(cache_a, grad_a)
            grad += backbone.backward(cache_p, grad_p)
            if cache_n is not None:
                grad += backbone.backward(cache_n, grad_n[mask])
            optimizer.step(backbone.weights, grad)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        report.global_epoch_losses.append(mean_loss)

        if val_queries:
            score = precision_at_1(backbone, qa_sets, val_queries)
            report.val_precision_at_1.append(score)
            # ties keep the earlier epoch: no extra training without a
            # measured gain
            if score > best_score:
                best_score = score
                best_weights = backbone.weights.copy()
                report.best_epoch = epoch
            logger.info(
                "global epoch %d/%d loss %.6f val p@1 %.3f",
                epoch + 1, config.epochs_global, mean_loss, score,
            )
        else:
            best_weights = backbone.weights.copy()
            report.best_epoch = epoch
            logger.info(
                "global epoch %d/%d loss %.6f", epoch + 1, config.epochs_global, mean_loss
            )

    backbone.weights = best_weights
    return report


def train(
    qa_sets: dict[str, TrialQASet],
    protocols: dict[str, TrialProtocol],
    labels: list[SimilarityLabel],
    train_ids: list[str],
    labeled_ids: set[str],
    config: TrainingConfig,
    backbone,
    val_queries: list[EvalQuery] | None = None,
    checkpoint_dir=None,
) -> TrainingReport:
    """Run both stages in order and optionally save checkpoints."""
    local_losses, mined = train_local(qa_sets, train_ids, config, backbone)
    if checkpoint_dir is not None:
        backbone.save(Path(checkpoint_dir) / "local")

    report = train_global(
        qa_sets, protocols, labels, train_ids, labeled_ids, config, backbone,
        val_queries,
    )
    report.mined_pairs = len(mined)
    report.local_epoch_losses = local_losses
    if checkpoint_dir is not None:
        backbone.save(Path(checkpoint_dir) / "global")
        report.save(Path(checkpoint_dir) / "report.json")
    return report
