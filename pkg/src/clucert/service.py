"""HTTP service exposing certification, prediction, perturbation and batch jobs."""

from __future__ import annotations

import logging
import threading
import uuid
from contextlib import asynccontextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from . import __version__
from .evaluation import DatasetRecord, Pipeline, run_certification
from .perturbation import sample_batch, to_sentence
from .refine import refine, score_importance
from .schemas import (
    CertificationResponse,
    CertifyRequest,
    JobRequest,
    JobStatus,
    PerturbRequest,
    PerturbResponse,
    PredictRequest,
    PredictResponse,
    SampleModel,
    SmoothingParams,
)
from .settings import Settings, build_pipeline
from .smoothing import SCHEMA_VERSION, predict

logger = logging.getLogger(__name__)


class _Job:
    def __init__(self, total: int):
        self.id = uuid.uuid4().hex
        self.status = "queued"
        self.total = total
        self.results: list = []
        self.summary = None
        self.error: str | None = None

    def view(self) -> JobStatus:
        return JobStatus(
            id=self.id, status=self.status, done=len(self.results), total=self.total,
            error=self.error, summary=asdict(self.summary) if self.summary else None,
        )


def create_app(settings: Settings | None = None, *, job_workers: int = 1) -> FastAPI:
    base = settings or Settings()
    executor = ThreadPoolExecutor(max_workers=job_workers)

    @asynccontextmanager
    async def lifespan(_: FastAPI):
        yield
        executor.shutdown(wait=False, cancel_futures=True)

    app = FastAPI(title="clucert", version=__version__, lifespan=lifespan)
    pipelines: dict[Settings, Pipeline] = {}
    pipelines_lock = threading.Lock()
    jobs: dict[str, _Job] = {}

    def pipeline_for(task: str | None, classifier: str | None, params: SmoothingParams) -> Pipeline:
        overrides = params.model_dump(exclude_none=True)
        overrides.update(task=task, classifier=classifier)
        try:
            resolved = base.merged(overrides)
            with pipelines_lock:
                if resolved not in pipelines:
                    pipelines[resolved] = build_pipeline(resolved)
                return pipelines[resolved]
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.exception_handler(ValueError)
    async def bad_input(request: Request, exc: ValueError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "schema": SCHEMA_VERSION, "version": __version__}

    @app.post("/v1/certify", response_model=CertificationResponse, response_model_by_alias=True)
    def certify_one(req: CertifyRequest):
        pipe = pipeline_for(req.task, req.classifier, req.params)
        tokens = to_sentence(req.token_list())
        label = pipe.task.validate_label(req.label) if req.label is not None else None
        record = DatasetRecord(req.id, " ".join(tokens), label or "")
        result = pipe.certify_record(record)
        if label is None:
            result.ground_label, result.correct = None, None
        return result.to_record(include_timing=True)

    @app.post("/v1/predict", response_model=PredictResponse)
    def predict_one(req: PredictRequest):
        pipe = pipeline_for(req.task, req.classifier, req.params)
        tokens = to_sentence(req.token_list())
        refined = refine(tokens, score_importance(tokens, pipe.scorer), pipe.config.refine_length)
        label, share, votes = predict(refined.tokens, pipe.model, pipe.config, pipe.lexicon, pipe.embedder)
        return PredictResponse(
            input_id=req.id, label=label, top_prob=share, votes=asdict(votes),
            refined_tokens=list(refined.tokens),
        )

    @app.post("/v1/perturb", response_model=PerturbResponse)
    def perturb(req: PerturbRequest):
        pipe = pipeline_for(None, "constant:none", req.params)
        tokens = to_sentence(req.token_list())
        cfg = pipe.config
        samples = sample_batch(
            tokens, req.n, cfg.mask_rate, pipe.lexicon, pipe.embedder, cfg.tau, cfg.master_seed,
        )
        return PerturbResponse(samples=[
            SampleModel(
                tokens=list(s.tokens), substituted_positions=sorted(s.substituted_positions),
                origin_seed=list(s.origin_seed),
            )
            for s in samples
        ])

    @app.post("/v1/jobs", response_model=JobStatus, status_code=202)
    def submit(req: JobRequest):
        pipe = pipeline_for(req.task, req.classifier, req.params)
        records = [
            DatasetRecord(r.id, " ".join(to_sentence(r.text)), pipe.task.validate_label(r.label))
            for r in req.records
        ]
        job = _Job(len(records))
        jobs[job.id] = job

        def work() -> None:
            job.status = "running"
            try:
                _, job.summary = run_certification(
                    records, pipe, workers=req.workers, sink=job.results.append
                )
                job.status = "done"
            except Exception as exc:
                logger.exception("job %s failed", job.id)
                job.error = str(exc)
                job.status = "failed"

        executor.submit(work)
        return job.view()

    def get_job(job_id: str) -> _Job:
        if job_id not in jobs:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return jobs[job_id]

    @app.get("/v1/jobs/{job_id}", response_model=JobStatus)
    def job_status(job_id: str):
        return get_job(job_id).view()

    @app.get("/v1/jobs/{job_id}/results")
    def job_results(job_id: str) -> list[dict]:
        return [r.to_record() for r in list(get_job(job_id).results)]

    return app
