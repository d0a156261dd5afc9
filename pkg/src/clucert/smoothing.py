"""Smoothed classification and certification.

The Monte-Carlo path (:func:`classifier_counts`, :func:`predict`,
:func:`certify`) samples perturbations, optionally keeps only the largest
embedding cluster, and votes. The exact path (:func:`exact_smoothed_distribution`
and friends) enumerates every retention set and is only feasible for short
inputs with a deterministic recovery map; it serves as the reference the
sampled path is checked against.
"""

from __future__ import annotations

import itertools
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Sequence

from .bounds import (
    ConfidenceBound,
    RadiusOutcome,
    binom_p_value,
    certified_radius,
    clopper_pearson,
    delta_shift,
    radius_from_gap,
)
from .clustering import ClusterParams, dbscan, filter_largest
from .embedding import SentenceEmbedder
from .model_client import OTHER, Classifier
from .perturbation import (
    Lexicon,
    PerturbedSample,
    Sentence,
    retention_count,
    sample_batch,
)

logger = logging.getLogger(__name__)

ABSTAIN = "ABSTAIN"
SCHEMA_VERSION = "clucert_v1"
EXACT_LIMIT = 12
STAGES = ("refine", "perturb", "embed", "cluster", "query", "certify")

Sampler = Callable[[Sentence, int, int], list[PerturbedSample]]


@dataclass(frozen=True)
class GammaPolicy:
    mode: str = "fixed"
    value: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "estimate"):
            raise ValueError(f"unknown gamma mode {self.mode!r}")
        if self.mode == "fixed" and not 0 <= self.value <= 1:
            raise ValueError(f"fixed gamma must lie in [0, 1], got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "GammaPolicy":
        """``"fixed:0.8"``, ``"fixed"`` (=1.0) or ``"estimate"``."""
        text = text.strip().lower()
        if text == "estimate":
            return cls("estimate", 1.0)
        if text == "fixed":
            return cls("fixed", 1.0)
        if text.startswith("fixed:"):
            return cls("fixed", float(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse gamma policy {text!r}")

    def resolve(self, top_prob: float) -> float:
        return self.value if self.mode == "fixed" else min(1.0, max(0.0, top_prob))

    def __str__(self) -> str:
        return f"fixed:{self.value:g}" if self.mode == "fixed" else "estimate"


@dataclass(frozen=True)
class SmoothingConfig:
    mask_rate: float = 0.9
    samples_predict: int = 1000
    samples_certify: int = 1000
    alpha: float = 0.05
    gamma: GammaPolicy = GammaPolicy()
    cluster: ClusterParams = ClusterParams()
    use_clustering: bool = True
    tau: float = 0.8
    refine_length: int = 20
    master_seed: int = 0
    bonferroni: bool = False
    max_workers: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.mask_rate < 1:
            raise ValueError(f"mask rate must lie in (0, 1), got {self.mask_rate}")
        if self.samples_predict < 1 or self.samples_certify < 1:
            raise ValueError("sample counts must be at least 1")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not -1 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [-1, 1], got {self.tau}")
        if self.refine_length < 1:
            raise ValueError("refine length must be at least 1")


class StageTimer:
    """Accumulates wall-clock seconds per pipeline stage."""

    def __init__(self) -> None:
        self.seconds: dict[str, float] = {name: 0.0 for name in STAGES}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start

    def merge(self, other: "StageTimer") -> None:
        for k, v in other.seconds.items():
            self.seconds[k] = self.seconds.get(k, 0.0) + v


@dataclass
class VoteCounts:
    counts: dict[str, int]
    total_sampled: int
    retained_after_cluster: int
    cluster_filtered: bool
    queries: int = 0
    classifier_errors: int = 0

    def __post_init__(self) -> None:
        if sum(self.counts.values()) != self.retained_after_cluster:
            raise ValueError("counts do not sum to the retained sample count")
        if self.retained_after_cluster > self.total_sampled:
            raise ValueError("retained more samples than were drawn")

    def top_two(self) -> tuple[str, int, int]:
        ranked = sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))
        label, n_a = ranked[0]
        n_b = ranked[1][1] if len(ranked) > 1 else 0
        return label, n_a, n_b


def make_sampler(
    config: SmoothingConfig, lexicon: Lexicon, embedder: SentenceEmbedder | None
) -> Sampler:
    """Substitution sampler that replaces exactly ``n - s`` positions."""

    def sampler(sentence: Sentence, n_samples: int, stream: int) -> list[PerturbedSample]:
        n = len(sentence)
        s = retention_count(n, config.mask_rate)
        return sample_batch(
            sentence, n_samples, config.mask_rate, lexicon, embedder, config.tau,
            config.master_seed, stream=stream, n_replace=n - s,
        )

    return sampler


_FAILED = object()


def _query_all(model: Classifier, inputs: Sequence[Sentence], max_workers: int) -> tuple[dict, int]:
    def safe(tokens: Sentence) -> str:
        try:
            return str(model(tokens))
        except Exception as exc:  # any classifier failure is a vote for OTHER
            logger.debug("classifier failed on %r: %s", tokens, exc)
            return _FAILED

    if max_workers > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            answers = list(pool.map(safe, inputs))
    else:
        answers = [safe(t) for t in inputs]
    errors = sum(a is _FAILED for a in answers)
    if errors:
        logger.warning("%d classifier queries failed and were tallied as %s", errors, OTHER)
    return {t: (OTHER if a is _FAILED else a) for t, a in zip(inputs, answers)}, errors


def tally(
    samples: Sequence[PerturbedSample],
    model: Classifier,
    config: SmoothingConfig,
    embedder: SentenceEmbedder | None,
    timer: StageTimer | None = None,
) -> VoteCounts:
    """Cluster-filter ``samples`` (if enabled) and count classifier labels.

    Identical perturbed sentences are sent to the classifier once.
    """
    timer = timer or StageTimer()
    kept, filtered = list(samples), False
    if config.use_clustering and samples:
        if embedder is None:
            raise ValueError("clustering requires an embedder")
        with timer.stage("embed"):
            vectors = embedder.embed_batch([s.tokens for s in samples])
        with timer.stage("cluster"):
            assignment = dbscan(vectors, config.cluster)
            kept, filtered = filter_largest(samples, assignment)
    with timer.stage("query"):
        unique = list(dict.fromkeys(s.tokens for s in kept))
        answers, errors = _query_all(model, unique, config.max_workers)
        counts = Counter(answers[s.tokens] for s in kept)
    return VoteCounts(
        dict(sorted(counts.items())), len(samples), len(kept), filtered, len(unique), errors
    )


def classifier_counts(
    sentence: Sequence[str],
    model: Classifier,
    config: SmoothingConfig,
    lexicon: Lexicon | None = None,
    embedder: SentenceEmbedder | None = None,
    *,
    n_samples: int | None = None,
    stream: int = 0,
    sampler: Sampler | None = None,
    timer: StageTimer | None = None,
) -> VoteCounts:
    """Sample, filter by cluster, and tally classifier votes for one round."""
    sentence = tuple(sentence)
    timer = timer or StageTimer()
    if sampler is None:
        if lexicon is None:
            raise ValueError("either a lexicon or a sampler is required")
        sampler = make_sampler(config, lexicon, embedder)
    with timer.stage("perturb"):
        samples = sampler(sentence, n_samples or config.samples_predict, stream)
    return tally(samples, model, config, embedder, timer)


def majority(counts: VoteCounts) -> tuple[str, float]:
    total = sum(counts.counts.values())
    if total == 0:
        raise ValueError("no retained samples to vote with")
    label, n_a, _ = counts.top_two()
    return label, n_a / total


def predict(
    sentence: Sequence[str],
    model: Classifier,
    config: SmoothingConfig,
    lexicon: Lexicon | None = None,
    embedder: SentenceEmbedder | None = None,
    *,
    sampler: Sampler | None = None,
    timer: StageTimer | None = None,
) -> tuple[str, float, VoteCounts]:
    """Majority label and its vote share; ties go to the smallest label."""
    counts = classifier_counts(
        sentence, model, config, lexicon, embedder,
        n_samples=config.samples_predict, stream=0, sampler=sampler, timer=timer,
    )
    label, share = majority(counts)
    return label, share, counts


@dataclass
class CertificationResult:
    input_id: str
    predicted_label: str
    ground_label: str | None
    correct: bool | None
    certified: bool
    radius: int | None
    gap: float | None
    top_prob_estimate: float | None
    gamma_used: float | None
    gamma_policy: str
    gamma_heuristic: bool
    alpha: float
    alpha_per_class: float
    p_value: float | None
    bounds: dict[str, dict]
    n: int
    s: int
    predict_votes: dict | None
    certify_votes: dict | None
    cluster_filtered: bool
    query_count: int
    abstain_reason: str | None = None
    warnings: list[str] = field(default_factory=list)
    refined_positions: list[int] | None = None
    wall_time: float = 0.0
    stage_seconds: dict[str, float] = field(default_factory=dict)
    schema: str = SCHEMA_VERSION

    @property
    def abstained(self) -> bool:
        return not self.certified

    def to_record(self, include_timing: bool = False) -> dict:
        record = {"schema": self.schema}
        record.update(asdict(self))
        del record["wall_time"], record["stage_seconds"]
        if include_timing:
            record["wall_time"] = self.wall_time
            record["stage_seconds"] = self.stage_seconds
        return record

    @classmethod
    def from_record(cls, record: dict) -> "CertificationResult":
        return cls(**record)


def class_bounds(
    counts: VoteCounts, labels: Iterable[str], alpha: float
) -> dict[str, ConfidenceBound]:
    """Clopper-Pearson interval for every label in ``labels``, observed ones, and ``OTHER``."""
    universe = sorted(set(labels) | set(counts.counts) | {OTHER})
    trials = counts.retained_after_cluster
    return {lab: clopper_pearson(counts.counts.get(lab, 0), trials, alpha) for lab in universe}


def certify(
    sentence: Sequence[str],
    ground_label: str | None,
    model: Classifier,
    config: SmoothingConfig,
    lexicon: Lexicon | None = None,
    embedder: SentenceEmbedder | None = None,
    *,
    labels: Sequence[str] = (),
    input_id: str = "",
    sampler: Sampler | None = None,
    timer: StageTimer | None = None,
) -> CertificationResult:
    """Predict with ``N`` samples, test significance, then bound with ``N'`` fresh samples.

    The certified label is the predicted one; ``correct`` records whether it
    matches ``ground_label``. ``labels`` lists classes that must receive an
    upper bound even when unobserved.
    """
    started = time.perf_counter()
    timer = timer or StageTimer()
    sentence = tuple(sentence)
    n = len(sentence)
    s = retention_count(n, config.mask_rate)
    if sampler is None:
        if lexicon is None:
            raise ValueError("either a lexicon or a sampler is required")
        sampler = make_sampler(config, lexicon, embedder)

    first = classifier_counts(
        sentence, model, config, embedder=embedder,
        n_samples=config.samples_predict, stream=0, sampler=sampler, timer=timer,
    )
    result = CertificationResult(
        input_id=input_id, predicted_label=ABSTAIN, ground_label=ground_label, correct=None,
        certified=False, radius=None, gap=None, top_prob_estimate=None, gamma_used=None,
        gamma_policy=str(config.gamma), gamma_heuristic=config.gamma.mode == "estimate",
        alpha=config.alpha, alpha_per_class=config.alpha, p_value=None, bounds={}, n=n, s=s,
        predict_votes=asdict(first), certify_votes=None, cluster_filtered=first.cluster_filtered,
        query_count=first.queries,
    )

    def finish(reason: str | None) -> CertificationResult:
        result.abstain_reason = reason
        result.wall_time = time.perf_counter() - started
        result.stage_seconds = dict(timer.seconds)
        return result

    if first.retained_after_cluster == 0:
        return finish("no samples retained in predict round")
    top, share = majority(first)
    result.top_prob_estimate = share
    result.correct = None if ground_label is None else top == ground_label
    if top == OTHER:
        return finish("majority label is OTHER")

    _, n_a, n_b = first.top_two()
    with timer.stage("certify"):
        result.p_value = binom_p_value(n_a, n_a + n_b, 0.5)
    if result.p_value > config.alpha:
        return finish("top-2 binomial test not significant")

    second = classifier_counts(
        sentence, model, config, embedder=embedder,
        n_samples=config.samples_certify, stream=1, sampler=sampler, timer=timer,
    )
    result.certify_votes = asdict(second)
    result.query_count += second.queries
    result.cluster_filtered = first.cluster_filtered and second.cluster_filtered
    if second.retained_after_cluster == 0:
        return finish("no samples retained in certify round")

    with timer.stage("certify"):
        universe = set(labels) | set(second.counts) | {OTHER, top}
        alpha = config.alpha / len(universe) if config.bonferroni else config.alpha
        result.alpha_per_class = alpha
        bounds = class_bounds(second, universe, alpha)
        gamma = config.gamma.resolve(share)
        outcome = certified_radius(bounds, top, gamma, n, s)
    result.bounds = {k: asdict(v) for k, v in bounds.items()}
    result.gamma_used = gamma
    result.gap = outcome.gap
    if outcome.warning:
        result.warnings.append(outcome.warning)
    if not outcome.certified:
        return finish("confidence gap is not positive")
    result.certified = True
    result.predicted_label = top
    result.radius = outcome.radius
    return finish(None)


# -- exact enumeration ------------------------------------------------------


def _recovery(lexicon: Lexicon, token: str) -> str:
    cands = lexicon.candidates(token)
    return cands[0] if cands else token


def _check_exact(sentence: Sentence, lexicon: Lexicon) -> None:
    if len(sentence) > EXACT_LIMIT:
        raise ValueError(f"enumeration guard: n={len(sentence)} > {EXACT_LIMIT}")
    if not lexicon.is_deterministic(sentence):
        raise ValueError("exact enumeration needs at most one candidate per token")


def exact_smoothed_distribution(
    sentence: Sequence[str], model: Classifier, mask_rate: float, lexicon: Lexicon
) -> dict[str, Fraction]:
    """Exact ``P_T[f(recover(mask(w, T))) = c]`` for every label ``c`` that occurs.

    Every size-``s`` retention set is enumerated; masked tokens are replaced
    by their single lexicon candidate (or kept when they have none).
    """
    sentence = tuple(sentence)
    _check_exact(sentence, lexicon)
    n = len(sentence)
    s = retention_count(n, mask_rate)
    recovered = [_recovery(lexicon, t) for t in sentence]
    counts: Counter = Counter()
    memo: dict[Sentence, str] = {}
    total = 0
    for kept in itertools.combinations(range(n), s):
        keep = set(kept)
        tokens = tuple(sentence[i] if i in keep else recovered[i] for i in range(n))
        if tokens not in memo:
            memo[tokens] = str(model(tokens))
        counts[memo[tokens]] += 1
        total += 1
    return {label: Fraction(c, total) for label, c in sorted(counts.items())}


def exact_smoothed_prob(
    sentence: Sequence[str], model: Classifier, mask_rate: float, label: str, lexicon: Lexicon
) -> Fraction:
    return exact_smoothed_distribution(sentence, model, mask_rate, lexicon).get(label, Fraction(0))


@dataclass(frozen=True)
class Theorem1Check:
    lhs: Fraction
    rhs: Fraction
    holds: bool
    distance: int


def verify_theorem1(
    sentence: Sequence[str],
    perturbed: Sequence[str],
    model: Classifier,
    mask_rate: float,
    lexicon: Lexicon,
    label: str | None = None,
) -> Theorem1Check:
    """Compare the exact smoothed-probability drift with the sampling shift.

    ``lhs`` is ``|p_c(w) - p_c(w')|`` for ``label`` (or the largest such
    drift over all labels); ``rhs`` is the shift at the Hamming distance of
    the pair. The recovery map must agree on every differing position,
    otherwise recovery instability adds a term the shift alone does not
    cover and a :class:`ValueError` is raised.
    """
    w, w2 = tuple(sentence), tuple(perturbed)
    if len(w) != len(w2):
        raise ValueError("sentences must have equal length")
    differing = [i for i in range(len(w)) if w[i] != w2[i]]
    for i in differing:
        if _recovery(lexicon, w[i]) != _recovery(lexicon, w2[i]):
            raise ValueError(f"recovery differs at position {i + 1}: not a shared recovery map")
    p = exact_smoothed_distribution(w, model, mask_rate, lexicon)
    q = exact_smoothed_distribution(w2, model, mask_rate, lexicon)
    if label is None:
        lhs = max(abs(p.get(c, 0) - q.get(c, 0)) for c in set(p) | set(q))
    else:
        lhs = abs(p.get(label, Fraction(0)) - q.get(label, Fraction(0)))
    rhs = delta_shift(len(w), retention_count(len(w), mask_rate), len(differing))
    return Theorem1Check(Fraction(lhs), rhs, lhs <= rhs, len(differing))


def exact_top_and_gap(dist: dict[str, Fraction]) -> tuple[str, Fraction]:
    ranked = sorted(dist.items(), key=lambda kv: (-kv[1], kv[0]))
    top, p_top = ranked[0]
    runner_up = ranked[1][1] if len(ranked) > 1 else Fraction(0)
    return top, p_top - runner_up


def exact_certify(
    sentence: Sequence[str],
    model: Classifier,
    mask_rate: float,
    lexicon: Lexicon,
    gamma: float = 1.0,
) -> tuple[str, RadiusOutcome]:
    """Certify from exact smoothed probabilities instead of confidence bounds."""
    dist = exact_smoothed_distribution(sentence, model, mask_rate, lexicon)
    top, gap = exact_top_and_gap(dist)
    n = len(sentence)
    return top, radius_from_gap(gap, gamma, n, retention_count(n, mask_rate))
