"""Shared fixtures: tiny hand-built corpora plus the heavyweight session
fixtures (the trained planted corpus and the two CLI pipeline runs) that
several test modules examine from different angles."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from trialsim.encoder import make_backbone
from trialsim.ingest import build_labels
from trialsim.llm import LlmClient, LlmClientConfig
from trialsim.qa import assemble_qa_set
from trialsim.records import QAPair, TrialProtocol, TrialQASet
from trialsim.synth import (
    build_corpus,
    demo_training_config,
    heldout_queries,
    write_corpus_files,
    write_fixture_cache,
)
from trialsim.training import train, train_global
from trialsim import cli


@pytest.fixture
def toy_protocols() -> list[TrialProtocol]:
    return [
        TrialProtocol(
            trial_id="NCT00000001",
            title="Aspirin after myocardial infarction",
            disease=["myocardial infarction"],
            intervention=["aspirin"],
            keywords=["cardiology", "secondary prevention"],
            outcome="all-cause mortality at one year",
            eligibility_criteria="Inclusion: adults over 18 with confirmed MI.",
        ),
        TrialProtocol(
            trial_id="NCT00000002",
            title="Statins after myocardial infarction",
            disease=["myocardial infarction"],
            intervention=["atorvastatin"],
            keywords=["cardiology"],
            outcome="LDL cholesterol change",
        ),
        TrialProtocol(
            trial_id="NCT00000003",
            title="Chemotherapy for advanced melanoma",
            disease=["melanoma"],
            intervention=["dacarbazine"],
            keywords=["oncology"],
            outcome="progression-free survival",
        ),
    ]


def make_qa_set(trial_id: str, answers: dict[str, str]) -> TrialQASet:
    """Predefined-question Q/A set from a section -> answer mapping."""
    from trialsim.qa import PREDEFINED_QUESTIONS

    pairs = [
        QAPair(
            question=PREDEFINED_QUESTIONS[section],
            answer=answer,
            section=section,
            origin="predefined",
            ordinal=0,
        )
        for section, answer in answers.items()
    ]
    return TrialQASet(trial_id=trial_id, pairs=sorted(pairs, key=QAPair.sort_key))


@pytest.fixture
def toy_qa_sets(toy_protocols) -> dict[str, TrialQASet]:
    return {
        p.trial_id: assemble_qa_set(p, skip_llm=True) for p in toy_protocols
    }


@dataclass
class PlantedState:
    """Everything criterion-style tests need about the planted corpus run."""

    corpus: object
    protocols: dict
    qa_sets: dict
    labels: list
    queries: list
    config: object
    untrained: object
    trained: object
    global_only: object
    report: object
    elapsed: float = 0.0


@pytest.fixture(scope="session")
def planted(tmp_path_factory) -> PlantedState:
    """Build the planted corpus, run the full training pipeline once."""
    start = time.perf_counter()
    corpus = build_corpus()
    cache = tmp_path_factory.mktemp("fixture_cache")
    write_fixture_cache(corpus, cache)
    client = LlmClient(
        LlmClientConfig(model_name="fixture", cache_dir=str(cache), offline=True)
    )
    qa_sets = {p.trial_id: assemble_qa_set(p, client=client) for p in corpus.protocols}
    protocols = {p.trial_id: p for p in corpus.protocols}
    labels = build_labels(corpus.review_groups([0, 1, 2]), set(protocols))
    train_ids = sorted(protocols)
    labeled_ids = set(corpus.trial_ids([0, 1, 2]))
    queries = heldout_queries(corpus, [6, 7], seed=4, negative_clusters=[4, 5, 6, 7])

    config = demo_training_config(seed=7)
    trained = make_backbone("tiny", dim=64, seed=7)
    untrained = trained.clone()
    report = train(
        qa_sets, protocols, labels, train_ids, labeled_ids, config, trained,
        val_queries=None,
    )
    global_only = untrained.clone()
    train_global(
        qa_sets, protocols, labels, train_ids, labeled_ids, config, global_only,
        val_queries=None,
    )
    elapsed = time.perf_counter() - start
    return PlantedState(
        corpus=corpus,
        protocols=protocols,
        qa_sets=qa_sets,
        labels=labels,
        queries=queries,
        config=config,
        untrained=untrained,
        trained=trained,
        global_only=global_only,
        report=report,
        elapsed=elapsed,
    )


# per-query 8 = 4 relevant + 4 negatives; the eval splits of the 20-trial
# corpus cannot fill the default 10-candidate pools
RUN_ALL_ARGS = ["--seed", "7", "--per-query", "8"]


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory) -> dict[str, Path]:
    """Run the complete CLI pipeline twice on a 20-trial fixture corpus."""
    root = tmp_path_factory.mktemp("cli_runs")
    corpus = build_corpus(n_clusters=4, per_cluster=5, seed=11)
    input_dir = root / "input"
    write_corpus_files(corpus, input_dir, labeled_clusters=[0, 1, 2, 3])
    write_fixture_cache(corpus, input_dir / "llm_cache")

    runs = {}
    for name in ("run1", "run2"):
        workdir = root / name
        code = cli.main([
            "run-all",
            "--input", str(input_dir / "trials.jsonl"),
            "--groups", str(input_dir / "review_groups.jsonl"),
            "--cache-dir", str(input_dir / "llm_cache"),
            "--workdir", str(workdir),
            *RUN_ALL_ARGS,
        ])
        assert code == 0, f"run-all failed for {name}"
        runs[name] = workdir
    runs["input"] = input_dir
    return runs
