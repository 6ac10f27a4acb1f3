"""Exception hierarchy shared by all trialsim modules.

Every error raised on purpose by this package derives from TrialSimError so
callers (and the CLI) can distinguish our failures from genuine bugs.
"""


class TrialSimError(Exception):
    """Base class for all errors raised by trialsim."""


class ConfigError(TrialSimError):
    """Bad or missing configuration (CLI maps this to exit code 2)."""


# --- record / schema errors ---

class SchemaViolation(TrialSimError):
    """A stored or constructed record breaks one of its invariants."""


class MissingId(SchemaViolation):
    """A trial record has no usable trial_id."""


class EmptyProtocol(SchemaViolation):
    """All six protocol sections are empty."""


# --- ingestion errors ---

class FormatError(TrialSimError):
    """No recognizable trial records found in the given input."""


class UnknownTrial(TrialSimError):
    """A referenced trial_id is absent from the corpus."""


class InsufficientCorpus(TrialSimError):
    """Too few distinct trials to build an evaluation query."""


# --- LLM / QA errors ---

class LlmUnavailable(TrialSimError):
    """The completion endpoint kept failing after all retries."""


class ParseFailure(TrialSimError):
    """The model output contained no extractable Q/A pairs."""


class CacheMiss(TrialSimError):
    """Offline mode requested a completion that is not cached."""


# --- encoder errors ---

class TokenizationFailure(TrialSimError):
    """Input text produced no tokens the encoder can use."""


class InvalidInput(TrialSimError):
    """Empty or otherwise unusable input to an encode/search operation."""


class ZeroVector(TrialSimError):
    """Cosine similarity is undefined for a zero-norm vector."""


# --- training errors ---

class PoolTooSmall(TrialSimError):
    """A mining pool has fewer than two entries."""


class DegenerateBatch(TrialSimError):
    """A contrastive loss was asked to run on a batch it cannot score."""


class NoEligibleSection(TrialSimError):
    """An unlabeled anchor has no section with at least two Q/A pairs."""


class NonFiniteLoss(TrialSimError):
    """Training produced a NaN or infinite loss."""


# --- retrieval / evaluation errors ---

class DuplicateTrial(TrialSimError):
    """The same trial_id appeared twice while building an index."""


class EmptyCorpus(TrialSimError):
    """An index or baseline was asked to rank over an empty corpus."""


class UnknownCandidate(TrialSimError):
    """A requested candidate trial_id is not present in the index."""


class NoRelevant(TrialSimError):
    """A recall/nDCG/AP computation was given an empty relevant set."""
