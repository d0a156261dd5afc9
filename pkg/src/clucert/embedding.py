"""Sentence embedders and cosine similarity.

Two embedders ship with the package: :class:`HashingEmbedder`, a
dependency-free feature-hashing encoder used offline and in tests, and
:class:`RemoteEmbedder`, a client for a minimal HTTP embedding endpoint.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Protocol, Sequence

import httpx
import numpy as np

logger = logging.getLogger(__name__)

Tokens = Sequence[str]


class EmbeddingError(RuntimeError):
    """Raised when a remote embedding request fails after all retries."""

    def __init__(self, message: str, attempts: int, status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class SentenceEmbedder(Protocol):
    dimension: int

    def embed_batch(self, sentences: Sequence[Tokens]) -> np.ndarray: ...


def _check_nonempty(sentence: Tokens) -> None:
    if len(sentence) == 0:
        raise ValueError("cannot embed an empty sentence")


def embed(sentence: Tokens, embedder: SentenceEmbedder) -> np.ndarray:
    _check_nonempty(sentence)
    return embedder.embed_batch([tuple(sentence)])[0]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - cosine(a, b)


@lru_cache(maxsize=65536)
def hash_bucket(token: str, dimension: int) -> int:
    """Stable bucket for a token: first 8 bytes of BLAKE2b, big-endian, mod ``dimension``."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dimension


class HashingEmbedder:
    """Bag-of-tokens feature hashing followed by L2 normalisation.

    Each token adds ``+1`` at ``hash_bucket(token, dimension)``. Equal token
    multisets give equal vectors, so word order is ignored.
    """

    def __init__(self, dimension: int = 64):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def counts(self, sentence: Tokens) -> np.ndarray:
        _check_nonempty(sentence)
        vec = np.zeros(self.dimension)
        for token in sentence:
            vec[hash_bucket(token, self.dimension)] += 1.0
        return vec

    def embed_batch(self, sentences: Sequence[Tokens]) -> np.ndarray:
        out = np.empty((len(sentences), self.dimension))
        for i, sentence in enumerate(sentences):
            vec = self.counts(sentence)
            out[i] = vec / np.linalg.norm(vec)
        return out


class RemoteEmbedder:
    """Client for ``POST {"input": [...]} -> {"data": [{"embedding": [...]}]}``.

    Sentences are sent as whitespace-joined strings in chunks of
    ``batch_size``; at most ``max_in_flight`` requests run at once.
    """

    def __init__(
        self,
        url: str,
        *,
        model: str | None = None,
        api_key_env: str = "CLUCERT_EMBED_API_KEY",
        batch_size: int = 64,
        max_in_flight: int = 4,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.batch_size = batch_size
        self.max_in_flight = max_in_flight
        self.retries = retries
        self.backoff = backoff
        self.dimension = 0
        self._client = client or httpx.Client(timeout=timeout)
        self._gate = threading.BoundedSemaphore(max_in_flight)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, texts: list[str]) -> list[list[float]]:
        payload: dict = {"input": texts}
        if self.model:
            payload["model"] = self.model
        last_status = None
        for attempt in range(1, self.retries + 2):
            try:
                with self._gate:
                    resp = self._client.post(self.url, json=payload, headers=self._headers())
                last_status = resp.status_code
                if resp.status_code in (401, 403):
                    raise EmbeddingError("embedding endpoint rejected credentials", attempt, resp.status_code)
                resp.raise_for_status()
                data = resp.json()["data"]
                if len(data) != len(texts):
                    raise EmbeddingError(
                        f"endpoint returned {len(data)} vectors for {len(texts)} inputs", attempt, last_status
                    )
                return [item["embedding"] for item in data]
            except EmbeddingError:
                raise
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                logger.warning("embedding request failed (attempt %d): %s", attempt, exc)
                if attempt > self.retries:
                    raise EmbeddingError(f"embedding request failed: {exc}", attempt, last_status) from exc
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise AssertionError("unreachable")

    def embed_batch(self, sentences: Sequence[Tokens]) -> np.ndarray:
        for sentence in sentences:
            _check_nonempty(sentence)
        if not sentences:
            return np.empty((0, self.dimension))
        texts = [" ".join(s) for s in sentences]
        chunks = [texts[i : i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            results = list(pool.map(self._post, chunks))
        vectors = np.asarray([v for chunk in results for v in chunk], dtype=np.float64)
        if vectors.ndim != 2 or not np.all(np.isfinite(vectors)):
            raise EmbeddingError("endpoint returned malformed or non-finite vectors", 1)
        if self.dimension and vectors.shape[1] != self.dimension:
            raise EmbeddingError(f"dimension changed from {self.dimension} to {vectors.shape[1]}", 1)
        self.dimension = vectors.shape[1]
        return vectors
