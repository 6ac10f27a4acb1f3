import pytest

from trialsim.errors import InvalidInput, ParseFailure
from trialsim.llm import LlmClient, LlmClientConfig
from trialsim.qa import (
    PREDEFINED_QUESTIONS,
    assemble_qa_set,
    format_qa_pairs,
    generate_eligibility_qa,
    parse_llm_output,
    predefined_qa,
    truncate_qa,
)
from trialsim.records import QAPair, TrialProtocol


class TestParseLlmOutput:
    def test_double_quoted_json_lines(self):
        raw = (
            '{"Question": "What is the minimum age?", "Answer": "18 years"}\n'
            '{"Question": "Is pregnancy excluded?", "Answer": "yes"}'
        )
        assert parse_llm_output(raw) == [
            ("What is the minimum age?", "18 years"),
            ("Is pregnancy excluded?", "yes"),
        ]

    def test_single_quoted_objects(self):
        raw = "{'Question': 'Which stage?', 'Answer': 'stage II'}"
        assert parse_llm_output(raw) == [("Which stage?", "stage II")]

    def test_prose_wrapping_is_ignored(self):
        raw = (
            "Sure, here are the pairs you asked for:\n\n"
            '{"Question": "q1", "Answer": "a1"}\n'
            "Hope this helps!"
        )
        assert parse_llm_output(raw) == [("q1", "a1")]

    def test_objects_split_across_lines(self):
        raw = '{"Question": "q1",\n "Answer": "a1"}'
        assert parse_llm_output(raw) == [("q1", "a1")]

    def test_key_case_is_tolerated(self):
        raw = '{"question": "q1", "ANSWER": "a1"}'
        assert parse_llm_output(raw) == [("q1", "a1")]

    def test_apostrophe_inside_single_quotes(self):
        raw = "{'Question': 'what's required', 'Answer': 'age 18'}"
        assert parse_llm_output(raw) == [("what's required", "age 18")]

    def test_empty_fields_dropped(self):
        raw = '{"Question": "q1", "Answer": ""}\n{"Question": "q2", "Answer": "a2"}'
        assert parse_llm_output(raw) == [("q2", "a2")]

    def test_garbage_returns_empty(self):
        assert parse_llm_output("no pairs here") == []
        assert parse_llm_output("") == []
        assert parse_llm_output(None) == []

    def test_order_preserved(self):
        pairs = [(f"q{i}", f"a{i}") for i in range(12)]
        assert parse_llm_output(format_qa_pairs(pairs)) == pairs


def test_format_round_trip():
    pairs = [("What lab values?", 'ANC >= 1.5 x10"9/L'), ("q2", "a2")]
    formatted = format_qa_pairs(pairs)
    assert parse_llm_output(formatted) == pairs


class _StubClient:
    def __init__(self, completion):
        self.completion = completion
        self.calls = []

    def complete(self, text, template):
        self.calls.append(text)
        return self.completion


class TestGenerateEligibilityQa:
    def test_pairs_carry_section_origin_and_ordinals(self):
        client = _StubClient('{"Question": "q1", "Answer": "a1"}\n{"Question": "q2", "Answer": "a2"}')
        pairs = generate_eligibility_qa("Adults over 18.", client)
        assert [p.ordinal for p in pairs] == [0, 1]
        assert all(p.section == "eligibility_criteria" for p in pairs)
        assert all(p.origin == "llm" for p in pairs)

    def test_empty_criteria_rejected(self):
        with pytest.raises(InvalidInput):
            generate_eligibility_qa("  ", _StubClient("x"))

    def test_unparseable_completion_raises(self):
        with pytest.raises(ParseFailure):
            generate_eligibility_qa("Adults.", _StubClient("I cannot help with that."))

    def test_long_answers_warn_but_stay(self, caplog):
        client = _StubClient(
            '{"Question": "q1", "Answer": "one two three four five six"}'
        )
        with caplog.at_level("WARNING"):
            pairs = generate_eligibility_qa("Adults.", client)
        assert pairs[0].answer == "one two three four five six"
        assert "longer than" in caplog.text


class TestPredefinedQa:
    def test_one_pair_per_nonempty_short_section(self, toy_protocols):
        pairs = predefined_qa(toy_protocols[0])
        assert [p.section for p in pairs] == [
            "title", "disease", "intervention", "keywords", "outcome",
        ]
        assert all(p.question == PREDEFINED_QUESTIONS[p.section] for p in pairs)
        assert all(p.origin == "predefined" and p.ordinal == 0 for p in pairs)

    def test_empty_sections_skipped(self):
        protocol = TrialProtocol(trial_id="NCT1", title="only a title")
        pairs = predefined_qa(protocol)
        assert [p.section for p in pairs] == ["title"]

    def test_list_sections_flattened(self, toy_protocols):
        pairs = {p.section: p for p in predefined_qa(toy_protocols[0])}
        assert pairs["keywords"].answer == "cardiology, secondary prevention"


class TestTruncateQa:
    def _llm(self, n):
        return [
            QAPair(f"q{i}", "a", "eligibility_criteria", "llm", i) for i in range(n)
        ]

    def test_cap_applies_to_llm_pairs_only(self):
        predefined = predefined_qa(
            TrialProtocol(trial_id="NCT1", title="t", outcome="o")
        )
        kept = truncate_qa(predefined + self._llm(12), cap=10)
        assert sum(1 for p in kept if p.origin == "llm") == 10
        assert sum(1 for p in kept if p.origin == "predefined") == 2

    def test_first_pairs_kept(self):
        kept = truncate_qa(self._llm(5), cap=3)
        assert [p.ordinal for p in kept] == [0, 1, 2]

    def test_cap_must_be_positive(self):
        with pytest.raises(InvalidInput):
            truncate_qa([], cap=0)


class TestAssembleQaSet:
    def test_skip_llm_leaves_only_predefined(self, toy_protocols):
        qa_set = assemble_qa_set(toy_protocols[0], skip_llm=True)
        assert all(p.origin == "predefined" for p in qa_set.pairs)

    def test_criteria_without_client_rejected(self, toy_protocols):
        with pytest.raises(InvalidInput, match="no\\s+LLM client"):
            assemble_qa_set(toy_protocols[0])

    def test_cached_client_builds_full_set(self, tmp_path, toy_protocols):
        protocol = toy_protocols[0]
        client = LlmClient(LlmClientConfig(cache_dir=str(tmp_path), offline=True))
        completion = format_qa_pairs([(f"q{i}", f"a{i}") for i in range(12)])
        client.store_completion(protocol.eligibility_criteria, completion)
        qa_set = assemble_qa_set(protocol, client=client, cap=10)
        llm_pairs = [p for p in qa_set.pairs if p.origin == "llm"]
        assert len(llm_pairs) == 10
        assert qa_set.pairs == qa_set.canonical_pairs()
        qa_set.validate()

    def test_no_criteria_needs_no_client(self, toy_protocols):
        qa_set = assemble_qa_set(toy_protocols[1])
        assert {p.section for p in qa_set.pairs} == {
            "title", "disease", "intervention", "keywords", "outcome",
        }
