"""Command-line pipeline: ingest -> build-eval -> generate-qa -> train ->
index -> search/evaluate.

Every stage reads and writes plain record files inside one working
directory, is skipped when its outputs already exist (use --force to redo),
and takes the shared --seed so a full run is reproducible byte for byte.
Module errors exit with code 1, configuration errors with code 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .encoder import HashedBowEncoder, make_backbone
from .errors import ConfigError, TrialSimError
from .evaluation import (
    DenseRetriever,
    SparseRetriever,
    evaluate,
    trial_texts,
    write_per_query_scores,
)
from .ingest import (
    build_eval_queries,
    build_labels,
    group_trial_ids,
    ingest_corpus,
    read_review_groups,
    split_groups,
)
from .llm import LlmClient, LlmClientConfig
from .metrics import MetricReport, format_table
from .qa import assemble_qa_set
from .records import (
    EvalQuery,
    SimilarityLabel,
    TrainingConfig,
    TrialProtocol,
    TrialQASet,
    read_jsonl,
    write_jsonl,
)
from .retrieval import (
    build_index,
    load_index,
    save_index,
    search_full,
    search_partial,
    search_patient,
)
from .training import train_global, train_local

logger = logging.getLogger(__name__)

TRIALS = "trials.jsonl"
LABELS = "labels.jsonl"
EVAL_QUERIES = "eval_queries.jsonl"
VAL_QUERIES = "val_queries.jsonl"
SPLITS = "splits.json"
QA_SETS = "qa_sets.jsonl"
CHECKPOINTS = "checkpoints"
INDEX_DIR = "index"
RESULTS = "results"


def _workdir(args) -> Path:
    path = Path(args.workdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path}; run `trialsim {producer}` first")
    return path


def _skip(args, *outputs: Path) -> bool:
    if args.force or not all(p.exists() for p in outputs):
        return False
    logger.warning(
        "outputs exist, skipping (use --force to redo): %s",
        ", ".join(str(p) for p in outputs),
    )
    return True


def _load_protocols(workdir: Path) -> dict[str, TrialProtocol]:
    path = _require(workdir / TRIALS, "ingest")
    return {p.trial_id: p for p in read_jsonl(path, TrialProtocol)}


def _load_qa_sets(workdir: Path) -> dict[str, TrialQASet]:
    path = _require(workdir / QA_SETS, "generate-qa")
    return {s.trial_id: s for s in read_jsonl(path, TrialQASet)}


def _load_splits(workdir: Path) -> dict:
    path = _require(workdir / SPLITS, "build-eval")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _training_config(args) -> TrainingConfig:
    config = TrainingConfig(
        tau=args.tau,
        lr_local=args.lr_local,
        lr_global=args.lr_global,
        epochs_local=args.epochs_local,
        epochs_global=args.epochs_global,
        batch_local=args.batch_local,
        batch_global=args.batch_global,
        qa_cap=args.qa_cap,
        seed=args.seed,
        labeled_fraction=args.labeled_fraction,
        weight_decay=args.weight_decay,
    )
    config.validate()
    return config


def _fresh_backbone(args):
    if args.backbone == "tiny":
        return make_backbone(
            "tiny",
            dim=args.dim,
            vocab_size=args.vocab_size,
            max_tokens=args.max_tokens,
            seed=args.seed,
        )
    return make_backbone(args.backbone, max_tokens=args.max_tokens)


def _load_backbone(args, stage_dir: Path):
    if (stage_dir / "meta.json").exists():
        logger.info("loading backbone checkpoint %s", stage_dir)
        return HashedBowEncoder.load(stage_dir)
    return None


def _train_ids(splits: dict) -> tuple[list[str], set[str]]:
    labeled = list(splits["train_trials"])
    train_ids = sorted(set(labeled) | set(splits["unlabeled_trials"]))
    return train_ids, set(labeled)


def _train_labels(workdir: Path, splits: dict) -> list[SimilarityLabel]:
    labels = read_jsonl(_require(workdir / LABELS, "build-eval"), SimilarityLabel)
    keep = set(splits["train_trials"])
    return [
        lbl for lbl in labels
        if lbl.query_trial_id in keep and lbl.candidate_trial_id in keep
    ]


def cmd_ingest(args) -> int:
    workdir = _workdir(args)
    out = workdir / TRIALS
    if _skip(args, out):
        return 0
    protocols = ingest_corpus(args.input)
    write_jsonl(out, protocols)
    logger.warning("wrote %d trials to %s", len(protocols), out)
    return 0


def cmd_build_eval(args) -> int:
    workdir = _workdir(args)
    outputs = [workdir / LABELS, workdir / EVAL_QUERIES,
               workdir / VAL_QUERIES, workdir / SPLITS]
    if _skip(args, *outputs):
        return 0
    protocols = _load_protocols(workdir)
    groups_path = Path(args.groups) if args.groups else workdir / "review_groups.jsonl"
    _require(groups_path, "ingest (and provide --groups)")
    groups = read_review_groups(groups_path)
    labels = build_labels(groups, set(protocols))
    write_jsonl(workdir / LABELS, labels)

    splits = split_groups(groups, args.seed, args.val_fraction, args.test_fraction)
    split_ids = {name: sorted(g.review_id for g in part)
                 for name, part in splits.items()}
    trial_ids = {name: sorted(group_trial_ids(part))
                 for name, part in splits.items()}
    unlabeled = sorted(set(protocols) - group_trial_ids(groups))
    payload = {
        "seed": args.seed,
        "val_fraction": args.val_fraction,
        "test_fraction": args.test_fraction,
        "train_groups": split_ids["train"],
        "val_groups": split_ids["val"],
        "test_groups": split_ids["test"],
        "train_trials": trial_ids["train"],
        "val_trials": trial_ids["val"],
        "test_trials": trial_ids["test"],
        "unlabeled_trials": unlabeled,
    }
    _write_json(workdir / SPLITS, payload)

    corpus = sorted(protocols.values(), key=lambda p: p.trial_id)
    exclude = set(trial_ids["train"]) | set(unlabeled)
    by_split = {}
    for name in ("val", "test"):
        part_ids = set(trial_ids[name])
        part_labels = [
            lbl for lbl in labels
            if lbl.query_trial_id in part_ids and lbl.candidate_trial_id in part_ids
        ]
        if part_labels:
            by_split[name] = build_eval_queries(
                part_labels, corpus, per_query=args.per_query,
                seed=args.seed, exclude_ids=exclude,
            )
        else:
            logger.warning("no %s-split labels; writing empty query file", name)
            by_split[name] = []
    write_jsonl(workdir / VAL_QUERIES, by_split["val"])
    write_jsonl(workdir / EVAL_QUERIES, by_split["test"])
    logger.warning(
        "wrote %d labels, %d val queries, %d eval queries",
        len(labels), len(by_split["val"]), len(by_split["test"]),
    )
    return 0


def cmd_generate_qa(args) -> int:
    workdir = _workdir(args)
    out = workdir / QA_SETS
    if _skip(args, out):
        return 0
    protocols = _load_protocols(workdir)
    cache_dir = args.cache_dir or str(workdir / "llm_cache")
    client = LlmClient(LlmClientConfig(
        endpoint=args.endpoint,
        model_name=args.model,
        cache_dir=cache_dir,
        offline=not args.endpoint,
    ))
    qa_sets = []
    for trial_id in sorted(protocols):
        qa_sets.append(assemble_qa_set(
            protocols[trial_id], client=client, cap=args.qa_cap,
            skip_llm=args.skip_llm,
        ))
    write_jsonl(out, qa_sets)
    logger.warning("wrote %d Q/A sets to %s", len(qa_sets), out)
    return 0


def cmd_train_local(args) -> int:
    workdir = _workdir(args)
    stage_dir = workdir / CHECKPOINTS / "local"
    if _skip(args, stage_dir / "meta.json"):
        return 0
    qa_sets = _load_qa_sets(workdir)
    splits = _load_splits(workdir)
    train_ids, _ = _train_ids(splits)
    config = _training_config(args)
    backbone = _fresh_backbone(args)
    losses, mined = train_local(qa_sets, train_ids, config, backbone)
    backbone.save(stage_dir)
    _write_json(workdir / CHECKPOINTS / "local_losses.json",
                {"local_epoch_losses": losses, "mined_pairs": len(mined)})
    return 0


def cmd_train_global(args) -> int:
    workdir = _workdir(args)
    stage_dir = workdir / CHECKPOINTS / "global"
    if _skip(args, stage_dir / "meta.json"):
        return 0
    qa_sets = _load_qa_sets(workdir)
    protocols = _load_protocols(workdir)
    splits = _load_splits(workdir)
    train_ids, labeled_ids = _train_ids(splits)
    labels = _train_labels(workdir, splits)
    config = _training_config(args)
    backbone = _load_backbone(args, workdir / CHECKPOINTS / "local")
    if backbone is None:
        logger.warning("no local checkpoint; training the global stage "
                       "from freshly initialized weights")
        backbone = _fresh_backbone(args)
    val_queries = read_jsonl(workdir / VAL_QUERIES, EvalQuery) \
        if (workdir / VAL_QUERIES).exists() else []
    report = train_global(
        qa_sets, protocols, labels, train_ids, labeled_ids, config, backbone,
        val_queries or None,
    )
    local_path = workdir / CHECKPOINTS / "local_losses.json"
    if local_path.exists():
        with open(local_path, "r", encoding="utf-8") as fh:
            local = json.load(fh)
        report.local_epoch_losses = local["local_epoch_losses"]
        report.mined_pairs = local["mined_pairs"]
    backbone.save(stage_dir)
    report.save(workdir / CHECKPOINTS / "report.json")
    return 0


def cmd_train_all(args) -> int:
    code = cmd_train_local(args)
    if code:
        return code
    return cmd_train_global(args)


def cmd_index(args) -> int:
    workdir = _workdir(args)
    out = workdir / INDEX_DIR
    if _skip(args, out / "meta.json"):
        return 0
    qa_sets = _load_qa_sets(workdir)
    backbone = _load_backbone(args, workdir / CHECKPOINTS / "global")
    built_from = f"{args.backbone}:global"
    if backbone is None:
        if not args.allow_untrained:
            raise ConfigError(
                "no trained checkpoint found; run `trialsim train-all` or "
                "pass --allow-untrained"
            )
        backbone = _fresh_backbone(args)
        built_from = f"{args.backbone}:untrained"
    index = build_index(sorted(qa_sets.values(), key=lambda s: s.trial_id),
                        backbone, built_from=built_from)
    save_index(index, out)
    logger.warning("indexed %d trials into %s", len(index), out)
    return 0


def _search_backbone(args, workdir: Path):
    backbone = _load_backbone(args, workdir / CHECKPOINTS / "global")
    if backbone is None:
        backbone = _fresh_backbone(args)
        logger.warning("no trained checkpoint; encoding queries with "
                       "untrained weights")
    return backbone


def cmd_search(args) -> int:
    workdir = _workdir(args)
    index = load_index(_require(workdir / INDEX_DIR, "index"))
    backbone = _search_backbone(args, workdir)
    candidates = None
    if args.candidates_file:
        text = Path(args.candidates_file).read_text(encoding="utf-8")
        candidates = [line.strip() for line in text.splitlines() if line.strip()]

    if args.mode == "full":
        if not args.query_trial:
            raise ConfigError("--mode full needs --query-trial")
        qa_sets = _load_qa_sets(workdir)
        if args.query_trial not in qa_sets:
            raise ConfigError(f"trial {args.query_trial} has no Q/A set")
        result = search_full(qa_sets[args.query_trial], index, backbone,
                             candidates=candidates, k=args.k)
    elif args.mode == "partial":
        sections = {}
        for item in args.section or []:
            name, _, value = item.partition("=")
            if not value:
                raise ConfigError(f"--section needs name=text, got {item!r}")
            sections[name] = value
        cache_dir = args.cache_dir or str(workdir / "llm_cache")
        client = LlmClient(LlmClientConfig(
            endpoint=args.endpoint, model_name=args.model,
            cache_dir=cache_dir, offline=not args.endpoint,
        )) if sections.get("eligibility_criteria") else None
        result = search_partial(
            args.title or "", index, backbone, extra_sections=sections,
            k=args.k, candidates=candidates, client=client, qa_cap=args.qa_cap,
        )
    else:
        if args.note_file:
            note = Path(args.note_file).read_text(encoding="utf-8")
        else:
            note = args.note or ""
        result = search_patient(note, index, backbone, k=args.k,
                                candidates=candidates)

    lines = [
        f"{result.query_id}\t{rank}\t{trial_id}\t{score:.6f}"
        for rank, (trial_id, score) in enumerate(result.ranking, start=1)
    ]
    output = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
    else:
        sys.stdout.write(output)
    return 0


def cmd_evaluate(args) -> int:
    workdir = _workdir(args)
    results_dir = workdir / RESULTS
    outputs = [results_dir / "report.json", results_dir / "report.txt"]
    if _skip(args, *outputs):
        return 0
    queries_path = Path(args.queries) if args.queries else workdir / EVAL_QUERIES
    queries = read_jsonl(_require(queries_path, "build-eval"), EvalQuery)
    if not queries:
        raise ConfigError(f"no evaluation queries in {queries_path}")
    qa_sets = _load_qa_sets(workdir)
    texts = trial_texts(qa_sets)

    retrievers = []
    wanted = args.retriever
    if wanted in ("tfidf", "all"):
        retrievers.append(SparseRetriever(texts, kind="tfidf"))
    if wanted in ("bm25", "all"):
        retrievers.append(SparseRetriever(texts, kind="bm25"))
    if wanted in ("untrained", "all"):
        fresh = _fresh_backbone(args)
        untrained_index = build_index(
            sorted(qa_sets.values(), key=lambda s: s.trial_id), fresh,
            built_from=f"{args.backbone}:untrained",
        )
        retrievers.append(
            DenseRetriever(untrained_index, fresh, qa_sets, name="dense_untrained")
        )
    if wanted in ("dense", "all"):
        index = load_index(_require(workdir / INDEX_DIR, "index"))
        backbone = _search_backbone(args, workdir)
        retrievers.append(DenseRetriever(index, backbone, qa_sets, name="dense"))

    results_dir.mkdir(parents=True, exist_ok=True)
    reports: dict[str, MetricReport] = {}
    for retriever in retrievers:
        report, scores = evaluate(
            retriever, queries, sample_size=args.sample_size,
            iterations=args.iterations, seed=args.seed,
        )
        reports[retriever.name] = report
        write_per_query_scores(
            results_dir / f"per_query_{retriever.name}.jsonl", queries, scores
        )
    _write_json(results_dir / "report.json",
                {name: r.to_dict() for name, r in reports.items()})
    table = format_table(reports)
    (results_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    sys.stdout.write(table + "\n")
    return 0


def cmd_run_all(args) -> int:
    for stage in (cmd_ingest, cmd_build_eval, cmd_generate_qa, cmd_train_all,
                  cmd_index, cmd_evaluate):
        code = stage(args)
        if code:
            return code
    return 0


def _add_common(parser) -> None:
    parser.add_argument("--workdir", default="pipeline",
                        help="directory holding all pipeline artifacts")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed threaded through every stochastic stage")
    parser.add_argument("--force", action="store_true",
                        help="redo the stage even if its outputs exist")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="info-level logging")


def _add_backbone(parser) -> None:
    parser.add_argument("--backbone", default="tiny",
                        help='"tiny" or "hf:<model-name>"')
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--vocab-size", type=int, default=4096)
    parser.add_argument("--max-tokens", type=int, default=256)


def _add_training(parser) -> None:
    defaults = TrainingConfig()
    parser.add_argument("--tau", type=float, default=defaults.tau)
    parser.add_argument("--lr-local", type=float, default=defaults.lr_local)
    parser.add_argument("--lr-global", type=float, default=defaults.lr_global)
    parser.add_argument("--epochs-local", type=int, default=defaults.epochs_local)
    parser.add_argument("--epochs-global", type=int, default=defaults.epochs_global)
    parser.add_argument("--batch-local", type=int, default=defaults.batch_local)
    parser.add_argument("--batch-global", type=int, default=defaults.batch_global)
    parser.add_argument("--labeled-fraction", type=float, default=None)
    parser.add_argument("--weight-decay", type=float, default=defaults.weight_decay)


def _add_llm(parser) -> None:
    parser.add_argument("--model", default="fixture",
                        help="completion model name (cache namespace)")
    parser.add_argument("--endpoint", default=None,
                        help="chat-completion URL; omit for offline cache-only")
    parser.add_argument("--cache-dir", default=None,
                        help="completion cache (default <workdir>/llm_cache)")
    parser.add_argument("--qa-cap", type=int, default=10,
                        help="max eligibility Q/A pairs kept per trial")
    parser.add_argument("--skip-llm", action="store_true",
                        help="build predefined-question pairs only")


def _add_eval(parser) -> None:
    parser.add_argument("--sample-size", type=int, default=50)
    parser.add_argument("--iterations", type=int, default=100)
    parser.add_argument("--retriever", default="all",
                        choices=["dense", "bm25", "tfidf", "untrained", "all"])
    parser.add_argument("--queries", default=None,
                        help="query file (default <workdir>/eval_queries.jsonl)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialsim",
        description="similarity search over clinical-trial protocols",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a registry export into trials.jsonl")
    p.add_argument("--input", required=True,
                   help="export directory, zip archive, or trials jsonl file")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-eval",
                       help="labels, splits, and evaluation queries")
    p.add_argument("--groups", default=None,
                   help="review-group jsonl (default <workdir>/review_groups.jsonl)")
    p.add_argument("--per-query", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--test-fraction", type=float, default=0.2)
    _add_common(p)
    p.set_defaults(func=cmd_build_eval)

    p = sub.add_parser("generate-qa", help="build each trial's Q/A set")
    _add_common(p)
    _add_llm(p)
    p.set_defaults(func=cmd_generate_qa)

    for name, func, help_text in (
        ("train-local", cmd_train_local, "Q/A-level contrastive stage"),
        ("train-global", cmd_train_global, "trial-level contrastive stage"),
        ("train-all", cmd_train_all, "both training stages in order"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_backbone(p)
        _add_training(p)
        p.add_argument("--qa-cap", type=int, default=10)
        p.set_defaults(func=func)

    p = sub.add_parser("index", help="embed every trial into the search index")
    _add_common(p)
    _add_backbone(p)
    p.add_argument("--allow-untrained", action="store_true",
                   help="index with freshly initialized weights")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="rank trials for one query")
    _add_common(p)
    _add_backbone(p)
    _add_llm(p)
    p.add_argument("--mode", default="full", choices=["full", "partial", "patient"])
    p.add_argument("--query-trial", default=None, help="trial_id for --mode full")
    p.add_argument("--title", default=None, help="title text for --mode partial")
    p.add_argument("--section", action="append", default=None,
                   metavar="NAME=TEXT", help="extra section for --mode partial")
    p.add_argument("--note", default=None, help="patient note text")
    p.add_argument("--note-file", default=None, help="file with the patient note")
    p.add_argument("--candidates-file", default=None,
                   help="file with one candidate trial_id per line")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--out", default=None, help="write results here instead of stdout")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="score retrievers on the eval queries")
    _add_common(p)
    _add_backbone(p)
    _add_eval(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-all", help="run every stage in order")
    p.add_argument("--input", required=True)
    p.add_argument("--groups", default=None)
    p.add_argument("--per-query", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--allow-untrained", action="store_true")
    _add_common(p)
    _add_backbone(p)
    _add_training(p)
    _add_llm(p)
    _add_eval(p)
    p.set_defaults(func=cmd_run_all)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (TrialSimError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
