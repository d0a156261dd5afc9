"""Black-box classifier access: prompts, response parsing, caching, transports.

A classifier is any callable mapping a token sequence to a label string.
:class:`LLMClassifier` wraps a chat endpoint; :func:`stub_classifier`
builds deterministic offline ones for tests and dry runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .embedding import HashingEmbedder

logger = logging.getLogger(__name__)

OTHER = "OTHER"
API_KEY_ENV = "CLUCERT_API_KEY"

Classifier = Callable[[Sequence[str]], str]

PREAMBLE = (
    "Below is an instruction that describes a task, followed by an input text. "
    "Respond appropriately by completing the task according to the instruction."
)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    label_set: tuple[str, ...]
    instruction_text: str
    answer_extraction: str

    @property
    def numeric(self) -> bool:
        return self.answer_extraction == "last_number"

    def validate_label(self, label: str) -> str:
        if self.numeric:
            canon = normalize_number(str(label))
            if canon is None:
                raise ValueError(f"label {label!r} is not numeric")
            return canon
        if label not in self.label_set:
            raise ValueError(f"label {label!r} not in {list(self.label_set)}")
        return label


TASKS: dict[str, TaskSpec] = {
    "sentiment2": TaskSpec(
        "sentiment2",
        ("negative", "positive"),
        "Below is an instruction that describes a sentiment classification task, followed by an "
        'English sentence as input. Respond with either "positive" or "negative" according to the '
        "sentence sentiment.",
        "keyword",
    ),
    "topic4": TaskSpec(
        "topic4",
        ("Business", "Sports", "Technology", "World"),
        "Below is an instruction for classifying a news article into one of four categories. "
        "Respond with the correct category name: Sports, World, Technology, or Business.",
        "keyword",
    ),
    "math_numeric": TaskSpec(
        "math_numeric",
        (),
        "Below is an instruction for solving a math word problem. Read the problem and return "
        "only the final numeric answer.",
        "last_number",
    ),
}


def get_task(task_id: str) -> TaskSpec:
    try:
        return TASKS[task_id]
    except KeyError:
        raise ValueError(f"unknown task {task_id!r}; expected one of {sorted(TASKS)}") from None


@dataclass(frozen=True)
class PromptEnvelope:
    instruction: str
    input_text: str
    rendered: str


def render_prompt(task: TaskSpec, input_text: str) -> PromptEnvelope:
    if not input_text:
        raise ValueError("input text must be non-empty")
    rendered = (
        f"{PREAMBLE}\n\n"
        f"###Instruction:\n{task.instruction_text}\n\n"
        f"###Input:\n{input_text}\n\n"
        f"###Response:\n"
    )
    return PromptEnvelope(task.instruction_text, input_text, rendered)


# -- response parsing -------------------------------------------------------

_NUMBER = re.compile(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|[-+]?\.\d+")


def normalize_number(text: str) -> str | None:
    """Canonical string for a numeric literal: ``"1,200.50" -> "1200.5"``."""
    try:
        value = Decimal(text.replace(",", ""))
    except InvalidOperation:
        return None
    if not value.is_finite():
        return None
    if value == value.to_integral_value():
        return str(int(value))
    return format(value.normalize(), "f")


def parse_response(text: str, task: TaskSpec) -> str:
    if task.numeric:
        found = _NUMBER.findall(text)
        if not found:
            return OTHER
        return normalize_number(found[-1]) or OTHER
    hits = [
        label
        for label in task.label_set
        if re.search(rf"\b{re.escape(label)}\b", text, flags=re.IGNORECASE)
    ]
    return hits[0] if len(hits) == 1 else OTHER


# -- transports and cache ---------------------------------------------------


class TransportError(RuntimeError):
    pass


class ChatTransport(Protocol):
    endpoint: str
    model: str

    def complete(self, prompt: str, temperature: float = 0.0) -> str: ...


class HttpChatTransport:
    """OpenAI-compatible ``/v1/chat/completions`` client (single attempt per call)."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._client = client or httpx.Client(timeout=timeout)
        self._gate = threading.BoundedSemaphore(max_in_flight)

    @property
    def url(self) -> str:
        if self.endpoint.endswith("/chat/completions"):
            return self.endpoint
        return f"{self.endpoint}/v1/chat/completions"

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            with self._gate:
                resp = self._client.post(self.url, json=payload, headers=headers)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise TransportError(str(exc)) from exc


class StubTransport:
    """Offline transport answering through ``respond(prompt)``; counts calls."""

    def __init__(self, respond: Callable[[str], str], endpoint: str = "stub://", model: str = "stub"):
        self.respond = respond
        self.endpoint = endpoint
        self.model = model
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        with self._lock:
            self.calls += 1
        return self.respond(prompt)


@dataclass
class CacheEntry:
    key: str
    prompt: str
    response_text: str
    timestamp: float
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.0


def cache_key(endpoint: str, model: str, prompt: str, temperature: float) -> str:
    blob = json.dumps([endpoint, model, prompt, temperature], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only JSONL response cache.

    Hits are confirmed by comparing the stored prompt text, so a digest
    collision degrades to a miss. ``path=None`` keeps everything in memory.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        entry = CacheEntry(**json.loads(line))
                    except (json.JSONDecodeError, TypeError) as exc:
                        logger.warning("%s:%d: skipping corrupt cache line (%s)", self.path, lineno, exc)
                        continue
                    self._entries[entry.key] = entry

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, endpoint: str, model: str, prompt: str, temperature: float) -> str | None:
        key = cache_key(endpoint, model, prompt, temperature)
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and entry.prompt == prompt:
                self.hits += 1
                return entry.response_text
            self.misses += 1
            return None

    def put(self, endpoint: str, model: str, prompt: str, temperature: float, response: str) -> None:
        entry = CacheEntry(
            cache_key(endpoint, model, prompt, temperature), prompt, response, time.time(),
            endpoint, model, temperature,
        )
        with self._lock:
            self._entries[entry.key] = entry
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.__dict__, ensure_ascii=False) + "\n")


def query_text(
    prompt: str,
    transport: ChatTransport,
    cache: ResponseCache | None = None,
    *,
    retries: int = 2,
    backoff: float = 0.5,
    temperature: float = 0.0,
) -> str:
    """Cached chat completion with bounded retries; raises :class:`TransportError`."""
    if cache is not None:
        hit = cache.get(transport.endpoint, transport.model, prompt, temperature)
        if hit is not None:
            return hit
    for attempt in range(retries + 1):
        try:
            text = transport.complete(prompt, temperature)
            break
        except Exception as exc:
            logger.warning("chat request failed (attempt %d/%d): %s", attempt + 1, retries + 1, exc)
            if attempt == retries:
                raise TransportError(f"giving up after {retries + 1} attempts: {exc}") from exc
            if backoff:
                time.sleep(backoff * 2**attempt)
    if cache is not None:
        cache.put(transport.endpoint, transport.model, prompt, temperature, text)
    return text


def classify(
    sentence: Sequence[str] | str,
    task: TaskSpec,
    transport: ChatTransport,
    cache: ResponseCache | None = None,
    *,
    retries: int = 2,
    backoff: float = 0.5,
) -> str:
    """Label one input through the chat endpoint; failures map to ``OTHER``."""
    text = sentence if isinstance(sentence, str) else " ".join(sentence)
    prompt = render_prompt(task, text).rendered
    try:
        response = query_text(prompt, transport, cache, retries=retries, backoff=backoff)
    except TransportError:
        return OTHER
    return parse_response(response, task)


@dataclass
class LLMClassifier:
    task: TaskSpec
    transport: ChatTransport
    cache: ResponseCache | None = None
    retries: int = 2
    backoff: float = 0.5
    failures: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __call__(self, tokens: Sequence[str]) -> str:
        prompt = render_prompt(self.task, " ".join(tokens)).rendered
        try:
            response = query_text(prompt, self.transport, self.cache, retries=self.retries, backoff=self.backoff)
        except TransportError:
            with self._lock:
                self.failures += 1
            return OTHER
        return parse_response(response, self.task)


# -- offline stub classifiers ----------------------------------------------


class LipschitzSynthetic:
    """Thresholds the projection of the hashing embedding on a fixed direction.

    The threshold is drawn once per instance, uniformly from an interval of
    width ``1 / lipschitz`` around ``center``. Over that draw, two inputs
    whose embeddings are ``rho`` apart disagree with probability at most
    ``lipschitz * rho``; each instance on its own is deterministic.
    """

    def __init__(
        self,
        direction: Sequence[float] | None = None,
        center: float = 0.0,
        lipschitz: float = 2.0,
        seed: int = 0,
        dimension: int = 64,
        labels: tuple[str, str] = ("A", "B"),
    ):
        if lipschitz <= 0:
            raise ValueError("lipschitz constant must be positive")
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(dimension) if direction is None else np.asarray(direction, dtype=float)
        self.direction = u / np.linalg.norm(u)
        self.center = center
        self.lipschitz = lipschitz
        self.threshold = center + (rng.random() - 0.5) / lipschitz
        self.labels = labels
        self.embedder = HashingEmbedder(dimension)

    def projection(self, tokens: Sequence[str]) -> float:
        return float(self.embedder.embed_batch([tuple(tokens)])[0] @ self.direction)

    def __call__(self, tokens: Sequence[str]) -> str:
        return self.labels[0] if self.projection(tokens) >= self.threshold else self.labels[1]


def stub_classifier(rule: str, **params) -> Classifier:
    """Deterministic offline classifiers.

    Rules:

    * ``constant(label)``
    * ``keyword(keywords, positive="A", negative="B")``: ``positive`` if any
      keyword occurs
    * ``position(position, value, positive="A", negative="B")``: ``positive``
      iff the 1-based ``position`` holds ``value``
    * ``lipschitz(...)``: see :class:`LipschitzSynthetic`
    * ``hash(labels, salt=0)``: an arbitrary but fixed function of the
      whole token tuple
    """
    if rule == "constant":
        label = params["label"]
        return lambda tokens: label
    if rule == "keyword":
        keywords = frozenset(params["keywords"])
        pos, neg = params.get("positive", "A"), params.get("negative", "B")
        return lambda tokens: pos if keywords.intersection(tokens) else neg
    if rule == "position":
        idx, value = int(params["position"]), params["value"]
        pos, neg = params.get("positive", "A"), params.get("negative", "B")

        def by_position(tokens: Sequence[str]) -> str:
            return pos if len(tokens) >= idx and tokens[idx - 1] == value else neg

        return by_position
    if rule == "lipschitz":
        return LipschitzSynthetic(**params)
    if rule == "hash":
        labels = tuple(params["labels"])
        salt = str(params.get("salt", 0))

        def by_hash(tokens: Sequence[str]) -> str:
            digest = hashlib.blake2b((salt + "\x00" + "\x1f".join(tokens)).encode(), digest_size=8).digest()
            return labels[int.from_bytes(digest, "big") % len(labels)]

        return by_hash
    raise ValueError(f"unknown stub rule {rule!r}")
