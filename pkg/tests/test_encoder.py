import numpy as np
import pytest

from trialsim.encoder import (
    HashedBowEncoder,
    PAIR_DELIMITER,
    cosine,
    encode_qa,
    encode_text,
    encode_texts,
    encode_trial,
    make_backbone,
    normalize_rows,
    tokenize,
    trial_input_text,
)
from trialsim.errors import (
    ConfigError,
    InvalidInput,
    TokenizationFailure,
    ZeroVector,
)
from trialsim.records import QAPair, TrialQASet


class TestTokenize:
    def test_lowercase_and_split(self):
        assert tokenize("Heart-Failure, NYHA class II!") == [
            "heart", "failure", "nyha", "class", "ii",
        ]

    def test_digits_kept(self):
        assert tokenize("age >= 18 years") == ["age", "18", "years"]

    def test_empty(self):
        assert tokenize("--- !!! ---") == []


class TestHashedBowEncoder:
    def test_same_seed_same_weights(self):
        a = HashedBowEncoder(dim=8, seed=3)
        b = HashedBowEncoder(dim=8, seed=3)
        assert np.array_equal(a.weights, b.weights)
        assert not np.array_equal(a.weights, HashedBowEncoder(dim=8, seed=4).weights)

    def test_weight_scale(self):
        enc = HashedBowEncoder(dim=64, vocab_size=2048, seed=0)
        assert enc.weights.shape == (2048, 64)
        # rows are standard normal scaled by 1/sqrt(dim)
        assert abs(float(enc.weights.std()) - 1.0 / 8.0) < 0.01

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            HashedBowEncoder(dim=0)

    def test_truncation_counted(self):
        enc = HashedBowEncoder(dim=4, max_tokens=3)
        ids = enc.token_ids("one two three four five")
        assert len(ids) == 3
        assert enc.truncation_count == 1

    def test_no_tokens_raises(self):
        with pytest.raises(TokenizationFailure):
            HashedBowEncoder(dim=4).token_ids("!!!")

    def test_forward_is_mean_of_rows(self):
        enc = HashedBowEncoder(dim=6, seed=1)
        pooled, cache = enc.forward(["alpha beta gamma"])
        expected = enc.weights[cache[0]].mean(axis=0)
        assert np.allclose(pooled[0], expected)

    def test_backward_matches_manual_accumulation(self):
        enc = HashedBowEncoder(dim=5, seed=2)
        texts = ["alpha beta", "alpha alpha gamma"]
        _, cache = enc.forward(texts)
        rng = np.random.default_rng(0)
        grad_pooled = rng.standard_normal((2, 5))
        grad = enc.backward(cache, grad_pooled)

        manual = np.zeros_like(enc.weights)
        for ids, g in zip(cache, grad_pooled):
            for token_id in ids:
                manual[token_id] += g / len(ids)
        assert np.allclose(grad, manual)

    def test_encode_batch_equals_forward(self):
        enc = HashedBowEncoder(dim=4, seed=5)
        pooled, _ = enc.forward(["some text"])
        assert np.array_equal(enc.encode_batch(["some text"]), pooled)

    def test_clone_is_independent(self):
        enc = HashedBowEncoder(dim=4, seed=5)
        copy = enc.clone()
        copy.weights[:] = 0.0
        assert not np.array_equal(enc.weights, copy.weights)

    def test_save_load_round_trip(self, tmp_path):
        enc = HashedBowEncoder(dim=7, vocab_size=128, max_tokens=20, seed=9, name="tiny")
        enc.weights[3, 4] = 42.0
        enc.save(tmp_path / "ckpt")
        loaded = HashedBowEncoder.load(tmp_path / "ckpt")
        assert np.array_equal(loaded.weights, enc.weights)
        assert (loaded.dim, loaded.vocab_size, loaded.max_tokens, loaded.seed) == (
            7, 128, 20, 9,
        )


class TestMakeBackbone:
    def test_tiny(self):
        enc = make_backbone("tiny", dim=16, seed=2)
        assert enc.trainable and enc.dim == 16

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            make_backbone("bert-base")


class TestVectorHelpers:
    def test_normalize_rows(self):
        rows = normalize_rows(np.array([[3.0, 4.0], [1.0, 0.0]]))
        assert np.allclose(np.linalg.norm(rows, axis=1), 1.0)
        assert np.allclose(rows[0], [0.6, 0.8])

    def test_normalize_rejects_zero_rows(self):
        with pytest.raises(ZeroVector):
            normalize_rows(np.zeros((2, 3)))

    def test_cosine_basics(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
        assert cosine([2.0, 0.0], [5.0, 0.0]) == 1.0

    def test_cosine_is_clipped(self):
        v = [1.0, 1.0, 1.0]
        assert cosine(v, v) <= 1.0

    def test_cosine_errors(self):
        with pytest.raises(InvalidInput):
            cosine([1.0, 0.0], [1.0, 0.0, 0.0])
        with pytest.raises(ZeroVector):
            cosine([0.0, 0.0], [1.0, 0.0])
        with pytest.raises(InvalidInput):
            cosine([np.nan, 0.0], [1.0, 0.0])


def _qa_set():
    pairs = [
        QAPair("What is the title of the trial?", "aspirin study", "title", "predefined", 0),
        QAPair("What are the keywords?", "cardiology", "keywords", "predefined", 0),
    ]
    return TrialQASet("NCT1", pairs)


class TestEncodeHelpers:
    def test_encode_texts_rows_are_normalized(self):
        enc = HashedBowEncoder(dim=8, seed=0)
        rows = encode_texts(["alpha beta", "gamma"], enc)
        assert np.allclose(np.linalg.norm(rows, axis=1), 1.0)

    def test_trial_input_text_uses_delimiter(self):
        text = trial_input_text(_qa_set())
        assert text == (
            "What is the title of the trial? aspirin study"
            + PAIR_DELIMITER
            + "What are the keywords? cardiology"
        )

    def test_encode_trial_concat(self):
        enc = HashedBowEncoder(dim=8, seed=0)
        record = encode_trial(_qa_set(), enc)
        assert record.subject_id == "NCT1"
        assert record.subject_kind == "trial"
        record.validate()

    def test_encode_trial_mean_pairs_differs_from_concat(self):
        enc = HashedBowEncoder(dim=8, seed=0)
        concat = encode_trial(_qa_set(), enc, mode="concat")
        mean = encode_trial(_qa_set(), enc, mode="mean_pairs")
        assert concat.vector != mean.vector

    def test_encode_trial_rejects_empty_set(self):
        enc = HashedBowEncoder(dim=8, seed=0)
        with pytest.raises(InvalidInput):
            encode_trial(TrialQASet("NCT1", []), enc)

    def test_encode_trial_unknown_mode(self):
        enc = HashedBowEncoder(dim=8, seed=0)
        with pytest.raises(ConfigError):
            encode_trial(_qa_set(), enc, mode="max_pool")

    def test_encode_qa_default_subject(self):
        enc = HashedBowEncoder(dim=8, seed=0)
        record = encode_qa(_qa_set().pairs[0], enc)
        assert record.subject_id == "title:0"
        assert record.subject_kind == "qa_pair"

    def test_encode_text_for_notes(self):
        enc = HashedBowEncoder(dim=8, seed=0)
        record = encode_text("65 year old with chest pain", enc, subject_id="note1")
        assert record.subject_kind == "patient"
        record.validate()

    def test_encode_text_rejects_empty(self):
        enc = HashedBowEncoder(dim=8, seed=0)
        with pytest.raises(InvalidInput):
            encode_text("   ", enc)
