"""Positive mining for Q/A-level contrastive training.

Anchors draw their positive from the pool of same-section Q/A pairs that
belong to other trials. Similarity comes from the backbone as it stands
before any fine-tuning, and mining runs once up front; the mined pairs stay
fixed for the whole local training stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderBackbone
from .errors import PoolTooSmall
from .records import SECTIONS, TrialQASet

logger = logging.getLogger(__name__)


@dataclass
class PoolEntry:
    trial_id: str
    section: str
    ordinal: int
    text: str
    vector: np.ndarray
    unit: np.ndarray


@dataclass
class MiningPool:
    section: str
    entries: list[PoolEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class MinedPositive:
    anchor_trial: str
    section: str
    anchor_ordinal: int
    anchor_text: str
    positive_trial: str
    positive_ordinal: int
    positive_text: str

    def to_dict(self) -> dict:
        return {
            "anchor_trial": self.anchor_trial,
            "section": self.section,
            "anchor_ordinal": self.anchor_ordinal,
            "anchor_text": self.anchor_text,
            "positive_trial": self.positive_trial,
            "positive_ordinal": self.positive_ordinal,
            "positive_text": self.positive_text,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MinedPositive":
        return cls(
            anchor_trial=raw["anchor_trial"],
            section=raw["section"],
            anchor_ordinal=int(raw["anchor_ordinal"]),
            anchor_text=raw["anchor_text"],
            positive_trial=raw["positive_trial"],
            positive_ordinal=int(raw["positive_ordinal"]),
            positive_text=raw["positive_text"],
        )


def build_mining_pools(
    qa_sets: list[TrialQASet], backbone: EncoderBackbone
) -> dict[str, MiningPool]:
    """Group every Q/A pair by section and embed it with the given backbone."""
    keyed: list[tuple[str, str, int, str]] = []
    for qa_set in sorted(qa_sets, key=lambda s: s.trial_id):
        for pair in qa_set.canonical_pairs():
            keyed.append((qa_set.trial_id, pair.section, pair.ordinal, pair.text()))

    pools: dict[str, MiningPool] = {}
    if not keyed:
        return pools

    vectors = backbone.encode_batch([text for _, _, _, text in keyed])
    for (trial_id, section, ordinal, text), vector in zip(keyed, vectors):
        vector = np.asarray(vector, dtype=np.float64)
        norm = float(np.linalg.norm(vector))
        if norm < 1e-12:
            logger.warning(
                "skipping zero-norm pool entry %s %s#%d", trial_id, section, ordinal
            )
            continue
        pool = pools.setdefault(section, MiningPool(section=section))
        pool.entries.append(
            PoolEntry(trial_id, section, ordinal, text, vector, vector / norm)
        )
    return pools


def _best_candidate(anchor: PoolEntry, candidates: list[PoolEntry]) -> PoolEntry:
    best_sim = -np.inf
    best: list[PoolEntry] = []
    for cand in candidates:
        sim = float(np.dot(anchor.unit, cand.unit))
        if sim > best_sim:
            best_sim = sim
            best = [cand]
        elif sim == best_sim:
            best.append(cand)
    return min(best, key=lambda e: (e.trial_id, e.ordinal))


def mine_local_positives(pools: dict[str, MiningPool]) -> list[MinedPositive]:
    """Pick each anchor's most similar same-section pair from another trial.

    Exact similarity ties resolve to the candidate with the smallest
    (trial_id, ordinal). Anchors whose pool holds no other trial are skipped.
    """
    mined: list[MinedPositive] = []
    ordered_sections = [s for s in SECTIONS if s in pools]
    ordered_sections += sorted(set(pools) - set(SECTIONS))
    for section in ordered_sections:
        pool = pools[section]
        entries = sorted(pool.entries, key=lambda e: (e.trial_id, e.ordinal))
        skipped = 0
        for anchor in entries:
            candidates = [e for e in entries if e.trial_id != anchor.trial_id]
            if not candidates:
                skipped += 1
                continue
            pos = _best_candidate(anchor, candidates)
            mined.append(
                MinedPositive(
                    anchor_trial=anchor.trial_id,
                    section=section,
                    anchor_ordinal=anchor.ordinal,
                    anchor_text=anchor.text,
                    positive_trial=pos.trial_id,
                    positive_ordinal=pos.ordinal,
                    positive_text=pos.text,
                )
            )
        if skipped:
            logger.warning(
                "section %r: %d anchors had no cross-trial candidates", section, skipped
            )
    if not mined:
        raise PoolTooSmall("no section pool produced any mineable anchor")
    return mined
