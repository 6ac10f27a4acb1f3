import zlib

import pytest

from trialsim.encoder import tokenize
from trialsim.llm import LlmClient, LlmClientConfig, PromptTemplate
from trialsim.qa import parse_llm_output
from trialsim.records import read_jsonl, TrialProtocol
from trialsim.ingest import read_review_groups
from trialsim.synth import (
    FILLER_TOKENS,
    SIGNAL_TOKENS,
    SIGNATURE_SIZE,
    build_corpus,
    demo_training_config,
    heldout_queries,
    write_corpus_files,
    write_fixture_cache,
)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(n_clusters=4, per_cluster=3, seed=11)


class TestVocabulary:
    def test_signal_and_filler_rows_never_collide(self):
        rows = [
            zlib.crc32(t.encode("utf-8")) % 4096
            for t in SIGNAL_TOKENS + FILLER_TOKENS
        ]
        assert len(set(rows)) == len(rows)

    def test_token_counts(self):
        assert len(SIGNAL_TOKENS) == 48
        assert len(FILLER_TOKENS) == 24
        assert SIGNATURE_SIZE == 12


class TestBuildCorpus:
    def test_shape_and_ids(self, corpus):
        assert len(corpus.protocols) == 12
        assert corpus.n_clusters == 4 and corpus.per_cluster == 3
        assert corpus.cluster_members(0) == ["NCT00000000", "NCT00000001", "NCT00000002"]
        assert corpus.trial_ids([1, 2]) == corpus.cluster_members(1) + corpus.cluster_members(2)

    def test_deterministic_for_a_seed(self):
        a = build_corpus(n_clusters=2, per_cluster=2, seed=5)
        b = build_corpus(n_clusters=2, per_cluster=2, seed=5)
        assert [p.to_dict() for p in a.protocols] == [p.to_dict() for p in b.protocols]
        assert a.fixtures == b.fixtures

    def test_different_seeds_differ(self):
        a = build_corpus(n_clusters=2, per_cluster=2, seed=5)
        b = build_corpus(n_clusters=2, per_cluster=2, seed=6)
        assert [p.to_dict() for p in a.protocols] != [p.to_dict() for p in b.protocols]

    def test_protocols_validate_and_share_family_disease(self, corpus):
        by_id = {p.trial_id: p for p in corpus.protocols}
        for protocol in corpus.protocols:
            protocol.validate()
        # clusters 0 and 1 form family 0 and share its disease string
        d0 = by_id[corpus.cluster_members(0)[0]].disease
        d1 = by_id[corpus.cluster_members(1)[0]].disease
        assert d0[0] == d1[0] == "family0 disease"
        assert d0[1] != d1[1]

    def test_cluster_signatures_overlap_within_not_across(self, corpus):
        signal = set(SIGNAL_TOKENS)

        def signature(trial_id):
            by_id = {p.trial_id: p for p in corpus.protocols}
            return {t for t in tokenize(by_id[trial_id].full_text()) if t in signal}

        a, b = corpus.cluster_members(0)[:2]
        other = corpus.cluster_members(2)[0]
        within = signature(a) & signature(b)
        across = signature(a) & signature(other)
        assert len(within) >= 6
        assert len(within) > len(across)

    def test_member_one_completion_is_prose_wrapped(self, corpus):
        members = corpus.cluster_members(0)
        prose = corpus.fixtures[members[1]]
        plain = corpus.fixtures[members[0]]
        assert prose.startswith("Sure, here are")
        assert not plain.startswith("Sure")
        # the tolerant parser sees identical structure in both
        assert len(parse_llm_output(prose)) == 10
        assert len(parse_llm_output(plain)) == 10

    def test_member_two_overgenerates_twelve_pairs(self, corpus):
        members = corpus.cluster_members(0)
        assert len(parse_llm_output(corpus.fixtures[members[2]])) == 12


class TestDemoTrainingConfig:
    def test_recipe_values(self):
        config = demo_training_config(seed=7)
        config.validate()
        assert config.tau == 0.015
        assert config.epochs_local == 12
        assert config.epochs_global == 60
        assert config.batch_global == 40
        assert config.seed == 7


class TestWriteFixtureCache:
    def test_offline_client_replays_completions(self, corpus, tmp_path):
        cache_dir = write_fixture_cache(corpus, tmp_path / "cache")
        client = LlmClient(
            LlmClientConfig(model_name="fixture", cache_dir=str(cache_dir), offline=True)
        )
        protocol = corpus.protocols[0]
        completion = client.complete(protocol.eligibility_criteria, PromptTemplate())
        assert completion == corpus.fixtures[protocol.trial_id]


class TestWriteCorpusFiles:
    def test_trials_and_groups_round_trip(self, corpus, tmp_path):
        write_corpus_files(corpus, tmp_path, labeled_clusters=[0, 2])
        protocols = read_jsonl(tmp_path / "trials.jsonl", TrialProtocol)
        assert len(protocols) == 12
        groups = read_review_groups(tmp_path / "review_groups.jsonl")
        assert [g.review_id for g in groups] == ["review00", "review02"]
        assert groups[0].member_trial_ids == corpus.cluster_members(0)


class TestHeldoutQueries:
    def test_one_query_per_member_with_sibling_relevant(self, corpus):
        queries = heldout_queries(corpus, [2], per_query=6, seed=0)
        members = corpus.cluster_members(2)
        assert [q.query_id for q in queries] == members
        for i, query in enumerate(queries):
            relevant = [t for t, rel in query.candidates if rel]
            assert relevant == [members[(i + 1) % len(members)]]
            assert len(query.candidates) == 6
            assert query.query_id not in query.candidate_ids()

    def test_partner_cluster_fills_negative_slots(self, corpus):
        queries = heldout_queries(corpus, [2], per_query=4, seed=0)
        partner = set(corpus.cluster_members(3))
        for query in queries:
            negatives = {t for t, rel in query.candidates if not rel}
            assert negatives <= partner

    def test_negative_clusters_restrict_the_pool(self, corpus):
        queries = heldout_queries(
            corpus, [2], per_query=7, seed=0, negative_clusters=[1, 3]
        )
        allowed = set(corpus.trial_ids([1, 3]))
        for query in queries:
            negatives = {t for t, rel in query.candidates if not rel}
            assert negatives <= allowed

    def test_deterministic_for_a_seed(self, corpus):
        a = heldout_queries(corpus, [0, 2], per_query=6, seed=3)
        b = heldout_queries(corpus, [0, 2], per_query=6, seed=3)
        assert [q.to_dict() for q in a] == [q.to_dict() for q in b]
