"""Run settings: TOML config file, flag overrides, and pipeline assembly."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

import tomli

from .clustering import ClusterParams
from .embedding import HashingEmbedder, RemoteEmbedder, SentenceEmbedder
from .evaluation import Pipeline
from .model_client import (
    Classifier,
    HttpChatTransport,
    LLMClassifier,
    ResponseCache,
    TaskSpec,
    get_task,
    stub_classifier,
)
from .perturbation import Lexicon, sample_lexicon_path
from .refine import DEFAULT_REFINE_LENGTH, ImportanceScorer, LLMScorer, OfflineScorer
from .smoothing import GammaPolicy, SmoothingConfig


@dataclass(frozen=True)
class Settings:
    task: str = "sentiment2"
    classifier: str = "llm"
    endpoint: str = "https://api.openai.com"
    model: str = "gpt-3.5-turbo"
    cache: str | None = None
    retries: int = 2
    timeout: float = 60.0
    max_in_flight: int = 8
    lexicon: str | None = None
    fold_case: bool = False
    embedder: str = "hashing"
    scorer: str = "offline"
    workers: int = 1
    mask_rate: float = 0.9
    samples_n: int = 1000
    samples_n_prime: int = 1000
    alpha: float = 0.05
    gamma: str = "fixed:1.0"
    cluster: bool = True
    cluster_eps: float = 0.15
    cluster_min_samples: int = 5
    tau: float = 0.8
    refine_length: int = DEFAULT_REFINE_LENGTH
    seed: int = 0
    bonferroni: bool = False
    query_workers: int = 1

    def smoothing_config(self) -> SmoothingConfig:
        return SmoothingConfig(
            mask_rate=self.mask_rate,
            samples_predict=self.samples_n,
            samples_certify=self.samples_n_prime,
            alpha=self.alpha,
            gamma=GammaPolicy.parse(self.gamma),
            cluster=ClusterParams(self.cluster_eps, self.cluster_min_samples),
            use_clustering=self.cluster,
            tau=self.tau,
            refine_length=self.refine_length,
            master_seed=self.seed,
            bonferroni=self.bonferroni,
            max_workers=self.query_workers,
        )

    def merged(self, overrides: Mapping[str, Any]) -> "Settings":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown settings: {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def load_settings(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> Settings:
    """Settings from an optional TOML file (flat or ``[clucert]`` table) plus overrides."""
    settings = Settings()
    if path:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
        data = data.get("clucert", data)
        settings = settings.merged({k.replace("-", "_"): v for k, v in data.items()})
    return settings.merged(overrides or {})


def build_classifier(spec: str, task: TaskSpec, settings: Settings) -> Classifier:
    """Classifier from a spec string.

    ``llm`` | ``constant:<label>`` | ``keyword:<hit>:<miss>:<w1,w2,...>`` |
    ``position:<i>:<value>:<hit>:<miss>`` | ``hash``.
    """
    kind, _, rest = spec.partition(":")
    if kind == "llm":
        transport = HttpChatTransport(
            settings.endpoint, settings.model, timeout=settings.timeout,
            max_in_flight=settings.max_in_flight,
        )
        return LLMClassifier(task, transport, ResponseCache(settings.cache), retries=settings.retries)
    if kind == "constant":
        return stub_classifier("constant", label=rest)
    if kind == "keyword":
        hit, miss, words = rest.split(":", 2)
        return stub_classifier("keyword", keywords=words.split(","), positive=hit, negative=miss)
    if kind == "position":
        idx, value, hit, miss = rest.split(":", 3)
        return stub_classifier("position", position=int(idx), value=value, positive=hit, negative=miss)
    if kind == "hash":
        labels = task.label_set or ("0", "1")
        return stub_classifier("hash", labels=labels, salt=rest or 0)
    raise ValueError(f"unknown classifier spec {spec!r}")


def build_embedder(spec: str, settings: Settings) -> SentenceEmbedder:
    if spec == "hashing":
        return HashingEmbedder()
    if spec.startswith(("http://", "https://")):
        return RemoteEmbedder(spec, timeout=settings.timeout, max_in_flight=settings.max_in_flight)
    raise ValueError(f"unknown embedder {spec!r}")


def build_scorer(spec: str, settings: Settings) -> ImportanceScorer:
    if spec == "offline":
        return OfflineScorer()
    if spec == "llm":
        transport = HttpChatTransport(
            settings.endpoint, settings.model, timeout=settings.timeout,
            max_in_flight=settings.max_in_flight,
        )
        return LLMScorer(transport, ResponseCache(settings.cache), retries=settings.retries)
    raise ValueError(f"unknown scorer {spec!r}")


def build_pipeline(settings: Settings, *, model: Classifier | None = None) -> Pipeline:
    task = get_task(settings.task)
    lexicon = Lexicon.load(settings.lexicon or sample_lexicon_path(), fold_case=settings.fold_case)
    return Pipeline(
        task=task,
        model=model or build_classifier(settings.classifier, task, settings),
        config=settings.smoothing_config(),
        lexicon=lexicon,
        embedder=build_embedder(settings.embedder, settings),
        scorer=build_scorer(settings.scorer, settings),
    )
