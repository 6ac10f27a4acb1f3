"""Chat-completion client with a content-addressed file cache.

Every completion is cached under (model name, sha256 of the input text), so
re-runs never hit the endpoint twice for the same criteria text and the whole
test suite can run offline against a pre-seeded cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .errors import CacheMiss, ConfigError, LlmUnavailable

logger = logging.getLogger(__name__)

# Instruction sent with every eligibility-criteria request. The receiving
# model replies with one json object per pair.
DEFAULT_SYSTEM_PROMPT = (
    "You are an expert at creating key questions from a medical text and "
    "extracting the answers from the text. Extract 3-10 Q/A pairs without "
    "repetitions of key entities in the Q/As. Avoid general questions like "
    "'What are the exclusion criteria?' Make sure that an answer is no more "
    "than 5 tokens/words. Output only json-formated Q/A pairs like this: "
    "{'Question': 'question1', 'Answer': 'answer1'} {'Question': 'question2'"
    ", 'Answer': 'answer2'} ... Input:"
)


@dataclass
class PromptTemplate:
    """The generation instruction plus the expected pair-count range."""

    system_text: str = DEFAULT_SYSTEM_PROMPT
    max_pairs: int = 10
    min_pairs: int = 3

    def validate(self) -> None:
        if "Extract 3-10 Q/A pairs" not in self.system_text:
            raise ConfigError(
                "prompt template must instruct the model to extract 3-10 pairs"
            )


@dataclass
class LlmClientConfig:
    """Connection, retry, and cache settings for the completion endpoint."""

    endpoint: str = ""
    model_name: str = "fixture"
    timeout: float = 60.0
    max_retries: int = 3
    cache_dir: str = "llm_cache"
    offline: bool = False


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def cache_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class LlmClient:
    """Thin wrapper over an HTTP chat-completion endpoint.

    offline=True forces cache-only operation; an uncached request raises
    CacheMiss instead of touching the network.
    """

    def __init__(self, config: LlmClientConfig):
        self.config = config
        self.cache_root = Path(config.cache_dir) / _safe_name(config.model_name)

    def _cache_path(self, text: str) -> Path:
        return self.cache_root / f"{cache_key(text)}.json"

    def cached_completion(self, text: str) -> str | None:
        path = self._cache_path(text)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)["completion"]

    def store_completion(self, text: str, completion: str) -> None:
        self.cache_root.mkdir(parents=True, exist_ok=True)
        payload = {
            "model": self.config.model_name,
            "input_sha256": cache_key(text),
            "completion": completion,
        }
        path = self._cache_path(text)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
        tmp.replace(path)  # atomic: concurrent writers of one key are safe

    def complete(self, text: str, template: PromptTemplate) -> str:
        """Return the raw completion for text, from cache when possible."""
        cached = self.cached_completion(text)
        if cached is not None:
            return cached
        if self.config.offline:
            raise CacheMiss(
                f"offline mode and no cached completion for input "
                f"{cache_key(text)[:12]}... under {self.cache_root}"
            )
        completion = self._request(text, template)
        self.store_completion(text, completion)
        return completion

    def _request(self, text: str, template: PromptTemplate) -> str:
        if not self.config.endpoint:
            raise ConfigError("no LLM endpoint configured and input not cached")
        payload = {
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": template.system_text},
                {"role": "user", "content": text},
            ],
            # greedy decoding keeps repeated runs reproducible
            "temperature": 0,
        }
        headers = {}
        api_key = os.environ.get("TRIALSIM_API_KEY")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_error: Exception | None = None
        for attempt in range(1, self.config.max_retries + 1):
            try:
                response = requests.post(
                    self.config.endpoint,
                    json=payload,
                    headers=headers,
                    timeout=self.config.timeout,
                )
                response.raise_for_status()
                body = response.json()
                return body["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                logger.warning(
                    "completion attempt %d/%d failed: %s",
                    attempt,
                    self.config.max_retries,
                    exc,
                )
                if attempt < self.config.max_retries:
                    time.sleep(min(2.0 ** (attempt - 1), 10.0))
        raise LlmUnavailable(
            f"endpoint failed after {self.config.max_retries} attempts: {last_error}"
        )
