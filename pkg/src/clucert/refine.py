"""Token importance scoring and top-L refinement."""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

from .model_client import ChatTransport, ResponseCache, query_text

DEFAULT_REFINE_LENGTH = 20

IMPORTANCE_PROMPTS: tuple[str, ...] = (
    "Please classify each word in the sentence into one of four levels based on its importance "
    "to the overall sentiment: Very Important, Important, Less Important, or Not Important.",
    "Assign an importance level (Very Important, Important, Less Important, Not Important) to "
    "each word depending on how strongly it affects the sentiment of the sentence.",
    "For every word in the sentence, evaluate its influence on the emotional tone and categorize "
    "it as either Very Important, Important, Less Important, or Not Important.",
    "Which words carry the core sentiment of the sentence? Please group all words into four "
    "categories according to their emotional contribution.",
    "Label each word in the sentence as Very Important, Important, Less Important, or Not "
    "Important, based on how necessary it is for understanding the sentence's meaning.",
    "Which words in this sentence are the least meaningful or most negligible in terms of "
    "semantic contribution? Please assign all words to four importance levels accordingly.",
)

LEVELS = {"very important": 3, "important": 2, "less important": 1, "not important": 0}

RESPONSE_FORMAT = (
    'Answer with exactly one line per word, in the form "word: level", where level is one of '
    "Very Important, Important, Less Important, Not Important."
)


@dataclass(frozen=True)
class ImportanceScores:
    scores: tuple[float, ...]
    scorer_id: str

    def __post_init__(self) -> None:
        if not all(math.isfinite(s) for s in self.scores):
            raise ValueError("importance scores must be finite")


@dataclass(frozen=True)
class RefinedSentence:
    tokens: tuple[str, ...]
    kept_positions: tuple[int, ...]
    original_length: int


class ImportanceScorer(Protocol):
    scorer_id: str

    def __call__(self, sentence: Sequence[str]) -> ImportanceScores: ...


class OfflineScorer:
    """``len(token) + 0.001 * (n - position)`` with 1-based positions.

    Longer tokens rank higher; among equal lengths the earlier token wins.
    """

    scorer_id = "offline-length-v1"

    def __call__(self, sentence: Sequence[str]) -> ImportanceScores:
        n = len(sentence)
        return ImportanceScores(
            tuple(len(tok) + 0.001 * (n - i) for i, tok in enumerate(sentence, 1)), self.scorer_id
        )


def importance_prompt(instruction: str, sentence: Sequence[str]) -> str:
    return f"{instruction}\n{RESPONSE_FORMAT}\n\nSentence: {' '.join(sentence)}\n"


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")


def parse_levels(response: str, sentence: Sequence[str]) -> list[int]:
    """Per-token levels from ``token: level`` lines; unmatched tokens get 0."""
    found: dict[str, int] = {}
    for line in response.splitlines():
        token, sep, level_text = _BULLET.sub("", line).rpartition(":")
        if not sep:
            continue
        token = token.strip().strip("\"'`*")
        level = LEVELS.get(level_text.strip().strip("\"'`*.").lower())
        if level is not None and token not in found:
            found[token] = level
    return [found.get(tok, 0) for tok in sentence]


class LLMScorer:
    """Averages 0-3 importance levels over several differently phrased prompts."""

    def __init__(
        self,
        transport: ChatTransport,
        cache: ResponseCache | None = None,
        prompts: Sequence[str] = IMPORTANCE_PROMPTS,
        *,
        retries: int = 2,
        backoff: float = 0.5,
        max_workers: int = 4,
    ):
        if not prompts:
            raise ValueError("at least one importance prompt is required")
        self.transport = transport
        self.cache = cache
        self.prompts = tuple(prompts)
        self.retries = retries
        self.backoff = backoff
        self.max_workers = max_workers
        self.scorer_id = f"llm-{len(self.prompts)}prompt-mean"

    def _levels(self, instruction: str, sentence: Sequence[str]) -> list[int]:
        text = query_text(
            importance_prompt(instruction, sentence), self.transport, self.cache,
            retries=self.retries, backoff=self.backoff,
        )
        return parse_levels(text, sentence)

    def __call__(self, sentence: Sequence[str]) -> ImportanceScores:
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            per_prompt = list(pool.map(lambda p: self._levels(p, sentence), self.prompts))
        k = len(per_prompt)
        return ImportanceScores(tuple(sum(col) / k for col in zip(*per_prompt)), self.scorer_id)


def score_importance(sentence: Sequence[str], scorer: ImportanceScorer) -> ImportanceScores:
    if not sentence:
        raise ValueError("cannot score an empty sentence")
    scores = scorer(sentence)
    if len(scores.scores) != len(sentence):
        raise ValueError("scorer returned misaligned scores")
    return scores


def refine(sentence: Sequence[str], scores: ImportanceScores, target_length: int) -> RefinedSentence:
    """Keep the ``target_length`` highest-scoring tokens in original order."""
    if target_length < 1:
        raise ValueError("target length must be at least 1")
    n = len(sentence)
    if len(scores.scores) != n:
        raise ValueError(f"{len(scores.scores)} scores for {n} tokens")
    ranked = sorted(range(n), key=lambda i: (-scores.scores[i], i))
    kept = sorted(ranked[:target_length])
    return RefinedSentence(tuple(sentence[i] for i in kept), tuple(i + 1 for i in kept), n)

