"""Dataset ingestion, batch certification, metrics and report files."""

from __future__ import annotations

import csv
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .embedding import SentenceEmbedder
from .model_client import Classifier, TaskSpec
from .perturbation import MASK_TOKEN, Lexicon, to_sentence
from .refine import ImportanceScorer, refine, score_importance
from .smoothing import (
    ABSTAIN,
    STAGES,
    CertificationResult,
    SmoothingConfig,
    StageTimer,
    certify,
)

logger = logging.getLogger(__name__)

EXCLUSION_RULE = (
    "abstained records are excluded from r_avg and coe; they count as never certified in cert_acc"
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    text: str
    label: str

    @property
    def tokens(self) -> tuple[str, ...]:
        return to_sentence(self.text)


def load_dataset(
    path: str | Path,
    task: TaskSpec,
    *,
    sample_n: int | None = None,
    seed: int = 0,
) -> list[DatasetRecord]:
    """Read ``{"id", "text", "label"}`` JSONL, validating every line.

    With ``sample_n`` a seeded subset is returned in file order.
    """
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid, text, label = str(obj["id"]), obj["text"], obj["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(text, str) or not text.strip():
                raise DatasetError(f"{path}:{lineno}: record {rid!r} has empty text")
            if MASK_TOKEN in text:
                raise DatasetError(f"{path}:{lineno}: record {rid!r} contains reserved {MASK_TOKEN}")
            try:
                label = task.validate_label(str(label))
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: record {rid!r}: {exc}") from None
            if rid in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            records.append(DatasetRecord(rid, text, label))
    if sample_n is not None and sample_n < len(records):
        picked = sorted(random.Random(seed).sample(range(len(records)), sample_n))
        records = [records[i] for i in picked]
    return records


@dataclass
class Pipeline:
    """Everything needed to certify one record."""

    task: TaskSpec
    model: Classifier
    config: SmoothingConfig
    lexicon: Lexicon
    embedder: SentenceEmbedder | None
    scorer: ImportanceScorer

    def record_config(self, index: int) -> SmoothingConfig:
        seed = int(np.random.SeedSequence([self.config.master_seed, index]).generate_state(1)[0])
        return replace(self.config, master_seed=seed)

    def certify_record(self, record: DatasetRecord, index: int = 0) -> CertificationResult:
        timer = StageTimer()
        started = time.perf_counter()
        tokens = record.tokens
        with timer.stage("refine"):
            scores = score_importance(tokens, self.scorer)
            refined = refine(tokens, scores, self.config.refine_length)
        result = certify(
            refined.tokens, record.label, self.model, self.record_config(index), self.lexicon,
            self.embedder, labels=self.task.label_set, input_id=record.id, timer=timer,
        )
        result.refined_positions = list(refined.kept_positions)
        result.wall_time = time.perf_counter() - started
        result.stage_seconds = dict(timer.seconds)
        return result


def failed_result(record: DatasetRecord, exc: Exception) -> CertificationResult:
    return CertificationResult(
        input_id=record.id, predicted_label=ABSTAIN, ground_label=record.label, correct=None,
        certified=False, radius=None, gap=None, top_prob_estimate=None, gamma_used=None,
        gamma_policy="", gamma_heuristic=False, alpha=0.0, alpha_per_class=0.0, p_value=None,
        bounds={}, n=0, s=0, predict_votes=None, certify_votes=None, cluster_filtered=False,
        query_count=0, abstain_reason=f"error: {type(exc).__name__}: {exc}",
    )


@dataclass
class RunSummary:
    n_records: int
    n_certified: int
    n_failed: int
    r_avg: float | None
    coe: float | None
    cert_acc_curve: list[tuple[int, float]]
    cert_acc_correct_curve: list[tuple[int, float]]
    abstain_rate: float
    clean_accuracy: float | None
    wall_time: float
    total_queries: int
    stage_seconds: dict[str, float] = field(default_factory=dict)
    exclusion_rule: str = EXCLUSION_RULE


def radius_stats(radii: Sequence[int]) -> tuple[float | None, float | None]:
    """Mean and coefficient of variation (population std / mean)."""
    if not radii:
        return None, None
    arr = np.asarray(radii, dtype=float)
    mean = float(arr.mean())
    if np.all(arr == arr[0]):
        return mean, 0.0
    return mean, float(arr.std() / mean)


def cert_acc(radii: Sequence[int | None], delta: int) -> float:
    """Share of inputs with radius ``>= delta``; ``None`` (abstain) never qualifies."""
    if not radii:
        return 0.0
    return sum(r is not None and r >= delta for r in radii) / len(radii)


def cert_acc_curve(radii: Sequence[int | None], max_delta: int | None = None) -> list[tuple[int, float]]:
    if not radii:
        return []
    top = max([r for r in radii if r is not None], default=0)
    top = top + 1 if max_delta is None else max_delta
    return [(d, cert_acc(radii, d)) for d in range(top + 1)]


def summarize(results: Sequence[CertificationResult], wall_time: float = 0.0) -> RunSummary:
    radii = [r.radius if r.certified else None for r in results]
    certified = [r for r in radii if r is not None]
    r_avg, coe = radius_stats(certified)
    correct_radii = [r.radius if r.certified and r.correct else None for r in results]
    stage = {name: 0.0 for name in STAGES}
    for r in results:
        for k, v in r.stage_seconds.items():
            stage[k] = stage.get(k, 0.0) + v
    with_truth = [r for r in results if r.ground_label is not None and r.correct is not None]
    n = len(results)
    curve = cert_acc_curve(radii)
    return RunSummary(
        n_records=n,
        n_certified=len(certified),
        n_failed=sum(1 for r in results if (r.abstain_reason or "").startswith("error:")),
        r_avg=r_avg,
        coe=coe,
        cert_acc_curve=curve,
        cert_acc_correct_curve=cert_acc_curve(correct_radii, curve[-1][0] if curve else None),
        abstain_rate=(n - len(certified)) / n if n else 0.0,
        clean_accuracy=(sum(r.correct for r in with_truth) / len(with_truth)) if with_truth else None,
        wall_time=wall_time,
        total_queries=sum(r.query_count for r in results),
        stage_seconds=stage,
    )


def run_certification(
    records: Sequence[DatasetRecord],
    pipeline: Pipeline,
    *,
    workers: int = 1,
    sink: Callable[[CertificationResult], None] | None = None,
) -> tuple[list[CertificationResult], RunSummary]:
    """Refine and certify every record; results keep input order.

    A record that raises is recorded as an abstention with an ``error:``
    reason and the run continues.
    """
    started = time.perf_counter()

    def one(item: tuple[int, DatasetRecord]) -> CertificationResult:
        index, record = item
        try:
            return pipeline.certify_record(record, index)
        except Exception as exc:
            logger.exception("record %s failed", record.id)
            return failed_result(record, exc)

    results: list[CertificationResult] = []
    items = list(enumerate(records))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stream: Iterable[CertificationResult] = pool.map(one, items)
            for res in stream:
                results.append(res)
                if sink:
                    sink(res)
    else:
        for item in items:
            res = one(item)
            results.append(res)
            if sink:
                sink(res)
    return results, summarize(results, time.perf_counter() - started)


def result_line(result: CertificationResult) -> str:
    return json.dumps(result.to_record(), ensure_ascii=False, sort_keys=True)


def emit_reports(
    results: Sequence[CertificationResult], summary: RunSummary, out_dir: str | Path
) -> dict[str, Path]:
    """Write results.jsonl, summary.json, cert_acc_curve.csv and timing.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out / "results.jsonl",
        "summary": out / "summary.json",
        "curve": out / "cert_acc_curve.csv",
        "timing": out / "timing.csv",
    }
    with open(paths["results"], "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(result_line(r) + "\n")
    with open(paths["summary"], "w", encoding="utf-8") as fh:
        json.dump(asdict(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(paths["curve"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta", "cert_acc"])
        writer.writerows(summary.cert_acc_curve)
    with open(paths["timing"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "seconds"])
        for stage in STAGES:
            writer.writerow([stage, f"{summary.stage_seconds.get(stage, 0.0):.6f}"])
    return paths


def read_results(path: str | Path) -> list[CertificationResult]:
    with open(path, encoding="utf-8") as fh:
        return [CertificationResult.from_record(json.loads(line)) for line in fh if line.strip()]
