"""Mask-then-recover perturbations: masking, lexicon candidates, substitution.

Positions in the public API are 1-based, matching the way retention sets
are usually written (``T = {1, 3, 5}``).
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import SentenceEmbedder, cosine

MASK_TOKEN = "[MASK]"

Sentence = tuple[str, ...]
Seed = tuple[int, ...]


def to_sentence(tokens: str | Iterable[str]) -> Sentence:
    """Validate and normalise input into a token tuple.

    A string is split on whitespace. Tokens must be non-empty, contain no
    whitespace, and may not be the reserved ``[MASK]`` symbol.
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    out = tuple(tokens)
    if not out:
        raise ValueError("sentence must contain at least one token")
    for tok in out:
        if not isinstance(tok, str) or not tok or any(ch.isspace() for ch in tok):
            raise ValueError(f"invalid token {tok!r}")
        if MASK_TOKEN in tok:
            raise ValueError(f"reserved symbol {MASK_TOKEN} may not appear in input")
    return out


def retention_count(n: int, mask_rate: float) -> int:
    """``floor((1 - m) * n)``, computed in decimal so ``m=0.9, n=10`` gives 1."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= mask_rate <= 1:
        raise ValueError(f"mask rate must lie in [0, 1], got {mask_rate}")
    return math.floor((1 - Decimal(repr(float(mask_rate)))) * n)


def replace_count(n: int, mask_rate: float) -> int:
    """``floor(m * n)``: the number of positions the substitution routine draws."""
    if not 0 <= mask_rate <= 1:
        raise ValueError(f"mask rate must lie in [0, 1], got {mask_rate}")
    return math.floor(Decimal(repr(float(mask_rate))) * n)


@dataclass(frozen=True)
class RetentionSet:
    positions: frozenset[int]
    sentence_length: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", frozenset(self.positions))
        bad = [p for p in self.positions if not 1 <= p <= self.sentence_length]
        if bad:
            raise ValueError(f"positions {sorted(bad)} outside 1..{self.sentence_length}")

    @classmethod
    def draw(cls, n: int, s: int, rng: np.random.Generator) -> "RetentionSet":
        picked = rng.choice(n, size=s, replace=False) + 1
        return cls(frozenset(int(p) for p in picked), n)


def mask(sentence: Sequence[str], retained: RetentionSet) -> Sentence:
    if retained.sentence_length != len(sentence):
        raise ValueError(
            f"retention set is for length {retained.sentence_length}, sentence has {len(sentence)}"
        )
    return tuple(tok if i in retained.positions else MASK_TOKEN for i, tok in enumerate(sentence, 1))


class Lexicon:
    """Merged candidate pool ``{token: [candidate, ...]}``.

    Candidates equal to their key are dropped on construction and duplicate
    candidates keep their first occurrence.
    """

    def __init__(self, entries: Mapping[str, Sequence[str]] | None = None, *, fold_case: bool = False):
        self.fold_case = fold_case
        self.entries: dict[str, tuple[str, ...]] = {}
        for key, cands in (entries or {}).items():
            if fold_case:
                key = key.lower()
                cands = [c.lower() for c in cands]
            merged = list(self.entries.get(key, ()))
            for c in cands:
                if c and c != key and c not in merged:
                    merged.append(c)
            self.entries[key] = tuple(merged)

    @classmethod
    def load(cls, path: str | Path, *, fold_case: bool = False) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
            raise ValueError(f"{path}: lexicon must be a JSON object of token -> list of candidates")
        return cls(data, fold_case=fold_case)

    def candidates(self, token: str) -> tuple[str, ...]:
        if self.fold_case:
            token = token.lower()
        return self.entries.get(token, ())

    def is_deterministic(self, tokens: Iterable[str]) -> bool:
        return all(len(self.candidates(t)) <= 1 for t in tokens)

    def __len__(self) -> int:
        return len(self.entries)


def sample_lexicon_path() -> Path:
    return Path(__file__).parent / "data" / "sample_lexicon.json"


@dataclass(frozen=True)
class PerturbedSample:
    tokens: Sentence
    substituted_positions: frozenset[int]
    origin_seed: Seed = ()


def _with_token(sentence: Sequence[str], position: int, token: str) -> Sentence:
    out = list(sentence)
    out[position - 1] = token
    return tuple(out)


def score_candidate(
    sentence: Sequence[str], position: int, candidate: str, embedder: SentenceEmbedder
) -> float:
    """Cosine similarity between the sentence and its single-token edit."""
    if not sentence:
        raise ValueError("empty sentence")
    if not 1 <= position <= len(sentence):
        raise ValueError(f"position {position} outside 1..{len(sentence)}")
    if not candidate:
        raise ValueError("empty candidate")
    vecs = embedder.embed_batch([tuple(sentence), _with_token(sentence, position, candidate)])
    return cosine(vecs[0], vecs[1])


@dataclass
class ScoreCache:
    """Per-batch memo of candidate scores keyed by (sentence, position, candidate)."""

    embedder: SentenceEmbedder
    _scores: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def survivors(
        self, sentence: Sentence, position: int, candidates: Sequence[str], tau: float
    ) -> list[str]:
        key = (sentence, position)
        with self._lock:
            known = self._scores.setdefault(key, {})
            missing = [c for c in candidates if c not in known]
            if missing:
                vecs = self.embedder.embed_batch(
                    [sentence] + [_with_token(sentence, position, c) for c in missing]
                )
                for cand, vec in zip(missing, vecs[1:]):
                    known[cand] = cosine(vecs[0], vec)
            return [c for c in candidates if known[c] >= tau]


def substitute(
    sentence: Sequence[str],
    mask_rate: float,
    lexicon: Lexicon,
    embedder: SentenceEmbedder | None,
    tau: float,
    seed: int | Seed,
    *,
    n_replace: int | None = None,
    cache: ScoreCache | None = None,
) -> PerturbedSample:
    """Replace randomly chosen positions with context-filtered synonyms.

    ``n_replace`` defaults to ``floor(m * n)``. Positions are drawn first,
    then each is resolved in ascending order: candidates scoring below
    ``tau`` are discarded and a survivor is picked uniformly; a position
    with no survivor keeps its token. With ``embedder=None`` no scoring
    filter is applied.
    """
    sentence = tuple(sentence)
    n = len(sentence)
    if n == 0:
        raise ValueError("empty sentence")
    if not -1 <= tau <= 1:
        raise ValueError(f"tau must lie in [-1, 1], got {tau}")
    k = replace_count(n, mask_rate) if n_replace is None else n_replace
    if not 0 <= k <= n:
        raise ValueError(f"cannot replace {k} of {n} positions")
    seed = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    rng = np.random.default_rng(list(seed))

    positions = sorted(int(p) + 1 for p in rng.choice(n, size=k, replace=False))
    if embedder is not None and cache is None:
        cache = ScoreCache(embedder)
    out = list(sentence)
    changed = set()
    for pos in positions:
        cands = lexicon.candidates(sentence[pos - 1])
        if cands and cache is not None:
            cands = cache.survivors(sentence, pos, cands, tau)
        if cands:
            out[pos - 1] = cands[int(rng.integers(len(cands)))]
            changed.add(pos)
    return PerturbedSample(tuple(out), frozenset(changed), seed)


def sample_batch(
    sentence: Sequence[str],
    n_samples: int,
    mask_rate: float,
    lexicon: Lexicon,
    embedder: SentenceEmbedder | None,
    tau: float,
    master_seed: int,
    *,
    stream: int = 0,
    n_replace: int | None = None,
) -> list[PerturbedSample]:
    """Draw ``n_samples`` independent substitutions.

    Sample ``i`` is seeded with ``(master_seed, stream, i)`` so the batch
    does not depend on evaluation order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    cache = ScoreCache(embedder) if embedder is not None else None
    return [
        substitute(
            sentence, mask_rate, lexicon, embedder, tau, (master_seed, stream, i),
            n_replace=n_replace, cache=cache,
        )
        for i in range(n_samples)
    ]
