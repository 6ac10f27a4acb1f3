import numpy as np
import pytest

from trialsim.encoder import HashedBowEncoder
from trialsim.errors import PoolTooSmall
from trialsim.mining import (
    MinedPositive,
    MiningPool,
    PoolEntry,
    build_mining_pools,
    mine_local_positives,
)
from trialsim.records import QAPair, TrialQASet

import oracles


def _entry(trial_id, ordinal, vector, section="eligibility_criteria"):
    vector = np.asarray(vector, dtype=np.float64)
    return PoolEntry(
        trial_id=trial_id,
        section=section,
        ordinal=ordinal,
        text=f"{trial_id}#{ordinal}",
        vector=vector,
        unit=vector / np.linalg.norm(vector),
    )


def _llm_set(trial_id, answers):
    pairs = [
        QAPair(f"question {i}", answer, "eligibility_criteria", "llm", i)
        for i, answer in enumerate(answers)
    ]
    return TrialQASet(trial_id, pairs)


class TestBuildMiningPools:
    def test_groups_by_section(self):
        backbone = HashedBowEncoder(dim=8, seed=0)
        sets = [
            TrialQASet("NCT1", [
                QAPair("What is the title of the trial?", "alpha", "title", "predefined", 0),
                QAPair("q", "beta", "eligibility_criteria", "llm", 0),
            ]),
            TrialQASet("NCT2", [
                QAPair("What is the title of the trial?", "gamma", "title", "predefined", 0),
            ]),
        ]
        pools = build_mining_pools(sets, backbone)
        assert sorted(pools) == ["eligibility_criteria", "title"]
        assert len(pools["title"]) == 2
        assert len(pools["eligibility_criteria"]) == 1

    def test_vectors_come_from_the_given_backbone(self):
        backbone = HashedBowEncoder(dim=8, seed=0)
        sets = [_llm_set("NCT1", ["alpha beta"])]
        pools = build_mining_pools(sets, backbone)
        entry = pools["eligibility_criteria"].entries[0]
        expected = backbone.encode_batch([entry.text])[0]
        assert np.allclose(entry.vector, expected)
        assert np.isclose(np.linalg.norm(entry.unit), 1.0)

    def test_zero_norm_entries_skipped(self, caplog):
        backbone = HashedBowEncoder(dim=8, seed=0)
        backbone.weights[:] = 0.0
        sets = [_llm_set("NCT1", ["alpha"]), _llm_set("NCT2", ["beta"])]
        with caplog.at_level("WARNING"):
            pools = build_mining_pools(sets, backbone)
        assert not pools
        assert "zero-norm" in caplog.text

    def test_empty_input(self):
        assert build_mining_pools([], HashedBowEncoder(dim=4)) == {}


class TestMineLocalPositives:
    def test_picks_most_similar_other_trial(self):
        pools = {
            "title": MiningPool("title", [
                _entry("NCT1", 0, [1.0, 0.0], "title"),
                _entry("NCT2", 0, [0.9, 0.1], "title"),
                _entry("NCT3", 0, [0.0, 1.0], "title"),
            ])
        }
        mined = {m.anchor_trial: m.positive_trial for m in mine_local_positives(pools)}
        assert mined == {"NCT1": "NCT2", "NCT2": "NCT1", "NCT3": "NCT2"}

    def test_exact_ties_break_to_smallest_trial_and_ordinal(self):
        v = [0.6, 0.8]
        pools = {
            "title": MiningPool("title", [
                _entry("NCT1", 0, [1.0, 0.0], "title"),
                _entry("NCT3", 1, v, "title"),
                _entry("NCT2", 5, v, "title"),
                _entry("NCT2", 2, v, "title"),
            ])
        }
        mined = [m for m in mine_local_positives(pools) if m.anchor_trial == "NCT1"]
        assert (mined[0].positive_trial, mined[0].positive_ordinal) == ("NCT2", 2)

    def test_single_trial_sections_are_skipped(self, caplog):
        pools = {
            "title": MiningPool("title", [_entry("NCT1", 0, [1.0, 0.0], "title")]),
            "outcome": MiningPool("outcome", [
                _entry("NCT1", 0, [1.0, 0.0], "outcome"),
                _entry("NCT2", 0, [0.5, 0.5], "outcome"),
            ]),
        }
        with caplog.at_level("WARNING"):
            mined = mine_local_positives(pools)
        assert {m.section for m in mined} == {"outcome"}
        assert "no cross-trial candidates" in caplog.text

    def test_no_mineable_anchor_raises(self):
        pools = {
            "title": MiningPool("title", [_entry("NCT1", 0, [1.0, 0.0], "title")]),
        }
        with pytest.raises(PoolTooSmall):
            mine_local_positives(pools)

    def test_matches_brute_force_on_random_pool(self):
        rng = np.random.default_rng(13)
        entries = []
        for t in range(8):
            for ordinal in range(6):
                vec = rng.standard_normal(12)
                entries.append(_entry(f"NCT{t:02d}", ordinal, vec))
        # exact duplicates across trials force similarity ties
        entries[7].vector = entries[30].vector.copy()
        entries[7].unit = entries[30].unit.copy()

        pools = {"eligibility_criteria": MiningPool("eligibility_criteria", entries)}
        mined = mine_local_positives(pools)

        raw = [(e.trial_id, e.ordinal, e.unit) for e in entries]
        expected = oracles.mine_brute_force(raw)
        got = [
            (m.anchor_trial, m.anchor_ordinal, m.positive_trial, m.positive_ordinal)
            for m in mined
        ]
        want = [
            (raw[i][0], raw[i][1], raw[j][0], raw[j][1]) for i, j in expected
        ]
        assert got == want


def test_mined_positive_round_trip():
    mined = MinedPositive("NCT1", "title", 0, "q a", "NCT2", 1, "q b")
    assert MinedPositive.from_dict(mined.to_dict()) == mined
