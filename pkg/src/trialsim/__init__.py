"""Semi-supervised similarity search over clinical-trial protocols.

Trials are summarized into question/answer pairs, embedded with a pluggable
encoder fine-tuned by two-level contrastive learning, and retrieved by cosine
similarity, with lexical baselines and a bootstrap evaluation harness for
comparison.
"""

from .records import (
    SECTIONS,
    EmbeddingRecord,
    EvalQuery,
    QAPair,
    SimilarityLabel,
    TrainingConfig,
    TrialProtocol,
    TrialQASet,
    read_jsonl,
    write_jsonl,
)
from .errors import TrialSimError
from .llm import LlmClient, LlmClientConfig, PromptTemplate
from .qa import assemble_qa_set, parse_llm_output, predefined_qa, truncate_qa
from .encoder import (
    HashedBowEncoder,
    cosine,
    encode_qa,
    encode_text,
    encode_trial,
    make_backbone,
)
from .mining import build_mining_pools, mine_local_positives
from .losses import global_loss, in_batch_loss, local_infonce, paired_loss
from .training import TrainingReport, build_trial_examples, train
from .ingest import (
    ReviewGroup,
    build_eval_queries,
    build_labels,
    ingest_corpus,
    split_groups,
)
from .retrieval import (
    RankedResult,
    TrialIndex,
    build_index,
    load_index,
    save_index,
    search_full,
    search_partial,
    search_patient,
)
from .metrics import (
    MetricReport,
    average_precision,
    bootstrap_report,
    mean_average_precision,
    ndcg_at_k,
    precision_at_k,
    recall_at_k,
)
from .baselines import bm25_rank, tfidf_rank
from .evaluation import DenseRetriever, SparseRetriever, evaluate

__version__ = "0.1.0"

__all__ = [
    "SECTIONS",
    "TrialProtocol",
    "QAPair",
    "TrialQASet",
    "SimilarityLabel",
    "EvalQuery",
    "EmbeddingRecord",
    "TrainingConfig",
    "read_jsonl",
    "write_jsonl",
    "TrialSimError",
    "LlmClient",
    "LlmClientConfig",
    "PromptTemplate",
    "parse_llm_output",
    "predefined_qa",
    "truncate_qa",
    "assemble_qa_set",
    "HashedBowEncoder",
    "make_backbone",
    "cosine",
    "encode_qa",
    "encode_trial",
    "encode_text",
    "build_mining_pools",
    "mine_local_positives",
    "local_infonce",
    "paired_loss",
    "in_batch_loss",
    "global_loss",
    "train",
    "build_trial_examples",
    "TrainingReport",
    "ReviewGroup",
    "ingest_corpus",
    "build_labels",
    "build_eval_queries",
    "split_groups",
    "TrialIndex",
    "RankedResult",
    "build_index",
    "save_index",
    "load_index",
    "search_full",
    "search_partial",
    "search_patient",
    "precision_at_k",
    "recall_at_k",
    "ndcg_at_k",
    "average_precision",
    "mean_average_precision",
    "bootstrap_report",
    "MetricReport",
    "tfidf_rank",
    "bm25_rank",
    "DenseRetriever",
    "SparseRetriever",
    "evaluate",
    "__version__",
]
