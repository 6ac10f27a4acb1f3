"""Text encoders and the shared truncate / mean-pool / normalize pipeline.

Two backbones ship: a tiny trainable hashed bag-of-words encoder for
desk-scale work, and an adapter for any pretrained transformer-style encoder.
Both produce vectors the pipeline L2-normalizes before storage.
"""

from __future__ import annotations

import json
import logging
import re
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    InvalidInput,
    TokenizationFailure,
    ZeroVector,
)
from .records import EmbeddingRecord, QAPair, TrialQASet

logger = logging.getLogger(__name__)

TOKEN_RE = re.compile(r"[a-z0-9]+")
PAIR_DELIMITER = "; "
_NORM_EPS = 1e-12


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics."""
    return TOKEN_RE.findall(text.lower())


class EncoderBackbone:
    """Backbone interface: name, dim, max_tokens, trainable, encode_batch."""

    name: str = "base"
    dim: int = 0
    max_tokens: int = 0
    trainable: bool = False

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        """Mean-pooled (not yet normalized) vectors, one row per text."""
        raise NotImplementedError


class HashedBowEncoder(EncoderBackbone):
    """Seed-initialized hashed bag-of-words encoder, trainable at desk scale.

    Tokens are hashed (crc32) into a fixed vocabulary of embedding rows; a
    text's representation is the arithmetic mean of its token rows. forward /
    backward expose the pieces the training loop needs.
    """

    trainable = True

    def __init__(
        self,
        dim: int = 64,
        vocab_size: int = 4096,
        max_tokens: int = 256,
        seed: int = 0,
        name: str = "tiny",
    ):
        if dim < 1 or vocab_size < 1 or max_tokens < 1:
            raise ConfigError("dim, vocab_size and max_tokens must be positive")
        self.name = name
        self.dim = dim
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((vocab_size, dim)) / np.sqrt(dim)
        self.truncation_count = 0

    def token_ids(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if len(tokens) > self.max_tokens:
            self.truncation_count += 1
            logger.debug(
                "truncating %d tokens to %d", len(tokens), self.max_tokens
            )
            tokens = tokens[: self.max_tokens]
        if not tokens:
            raise TokenizationFailure(f"no tokens in text: {text[:60]!r}")
        ids = [zlib.crc32(t.encode("utf-8")) % self.vocab_size for t in tokens]
        return np.asarray(ids, dtype=np.int64)

    def forward(self, texts: list[str]) -> tuple[np.ndarray, list[np.ndarray]]:
        """Pooled vectors plus the token-id cache backward() needs."""
        cache = [self.token_ids(t) for t in texts]
        pooled = np.stack([self.weights[ids].mean(axis=0) for ids in cache])
        return pooled, cache

    def backward(
        self, cache: list[np.ndarray], grad_pooled: np.ndarray
    ) -> np.ndarray:
        """Gradient of the pooled outputs w.r.t. the embedding table."""
        grad = np.zeros_like(self.weights)
        for ids, g in zip(cache, grad_pooled):
            np.add.at(grad, ids, g / len(ids))
        return grad

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        pooled, _ = self.forward(texts)
        return pooled

    def clone(self) -> "HashedBowEncoder":
        """Independent copy (used to freeze pre-finetune weights)."""
        copy = HashedBowEncoder(
            dim=self.dim,
            vocab_size=self.vocab_size,
            max_tokens=self.max_tokens,
            seed=self.seed,
            name=self.name,
        )
        copy.weights = self.weights.copy()
        return copy

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "weights.npy", self.weights)
        meta = {
            "name": self.name,
            "dim": self.dim,
            "vocab_size": self.vocab_size,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        }
        with open(directory / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, directory) -> "HashedBowEncoder":
        directory = Path(directory)
        with open(directory / "meta.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        encoder = cls(**meta)
        encoder.weights = np.load(directory / "weights.npy")
        return encoder


class TransformerBackbone(EncoderBackbone):
    """Adapter for a pretrained transformer encoder (inference only).

    Any model loadable through the transformers AutoModel/AutoTokenizer pair
    works; token states are mean-pooled under the attention mask.
    """

    trainable = False

    def __init__(self, model_name: str, max_tokens: int = 512):
        try:
            import torch  # noqa: F401
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ConfigError(
                "transformers/torch are required for pretrained backbones"
            ) from exc
        self.name = f"hf:{model_name}"
        self.max_tokens = max_tokens
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name)
        self.model.eval()
        self.dim = int(self.model.config.hidden_size)

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        import torch

        encoded = self.tokenizer(
            texts,
            truncation=True,
            max_length=self.max_tokens,
            padding=True,
            return_tensors="pt",
        )
        with torch.no_grad():
            states = self.model(**encoded).last_hidden_state
        mask = encoded["attention_mask"].unsqueeze(-1).float()
        pooled = (states * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        return pooled.cpu().numpy().astype(np.float64)


def make_backbone(name: str, **kwargs) -> EncoderBackbone:
    """Backbone factory for the config key encoder.name.

    "tiny" builds the trainable hashed encoder (kwargs: dim, vocab_size,
    max_tokens, seed); "hf:<model>" wraps a pretrained transformer.
    """
    if name == "tiny":
        return HashedBowEncoder(name="tiny", **kwargs)
    if name.startswith("hf:"):
        return TransformerBackbone(model_name=name[3:], **kwargs)
    raise ConfigError(f"unknown encoder name {name!r}")


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize each row; zero rows raise ZeroVector."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < _NORM_EPS):
        raise ZeroVector("cannot normalize a zero-norm vector")
    return matrix / norms[:, None]


def cosine(a, b) -> float:
    """Cosine similarity of two equal-length vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInput("non-finite component in cosine input")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a < _NORM_EPS or norm_b < _NORM_EPS:
        raise ZeroVector("cosine undefined for zero-norm vector")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def encode_texts(texts: list[str], backbone: EncoderBackbone) -> np.ndarray:
    """Encode a batch of texts into L2-normalized rows."""
    return normalize_rows(backbone.encode_batch(texts))


def _record(subject_id: str, kind: str, vector: np.ndarray) -> EmbeddingRecord:
    record = EmbeddingRecord(
        subject_id=subject_id,
        subject_kind=kind,
        vector=[float(v) for v in vector],
        dim=int(vector.shape[0]),
    )
    record.validate()
    return record


def encode_qa(
    pair: QAPair, backbone: EncoderBackbone, subject_id: str | None = None
) -> EmbeddingRecord:
    """Embed one Q/A pair ("question answer" through the shared pipeline)."""
    pair.validate()
    vector = encode_texts([pair.text()], backbone)[0]
    if subject_id is None:
        subject_id = f"{pair.section}:{pair.ordinal}"
    return _record(subject_id, "qa_pair", vector)


def trial_input_text(qa_set: TrialQASet) -> str:
    """Canonical-order concatenation of all pair texts."""
    return qa_set.text(delimiter=PAIR_DELIMITER)


def encode_trial(
    qa_set: TrialQASet,
    backbone: EncoderBackbone,
    mode: str = "concat",
) -> EmbeddingRecord:
    """Embed an entire trial from its Q/A set.

    mode="concat" (default) jointly encodes the canonical-order concatenation;
    mode="mean_pairs" averages the per-pair embeddings instead (ablation).
    """
    if not qa_set.pairs:
        raise InvalidInput(f"trial {qa_set.trial_id}: empty Q/A set")
    if mode == "concat":
        vector = encode_texts([trial_input_text(qa_set)], backbone)[0]
    elif mode == "mean_pairs":
        per_pair = encode_texts(
            [p.text() for p in qa_set.canonical_pairs()], backbone
        )
        vector = normalize_rows(per_pair.mean(axis=0))[0]
    else:
        raise ConfigError(f"unknown trial encoding mode {mode!r}")
    return _record(qa_set.trial_id, "trial", vector)


def encode_text(
    note: str, backbone: EncoderBackbone, subject_id: str = "patient"
) -> EmbeddingRecord:
    """Embed raw text (patient notes) through the same pipeline."""
    if not note or not note.strip():
        raise InvalidInput("note text is empty")
    vector = encode_texts([note], backbone)[0]
    return _record(subject_id, "patient", vector)
