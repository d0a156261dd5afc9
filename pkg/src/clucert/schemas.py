"""Request and response models for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class SmoothingParams(BaseModel):
    """Per-request overrides of the server's settings; unset fields keep the default."""

    mask_rate: Optional[float] = Field(None, gt=0, lt=1)
    samples_n: Optional[int] = Field(None, ge=1)
    samples_n_prime: Optional[int] = Field(None, ge=1)
    alpha: Optional[float] = Field(None, gt=0, lt=1)
    gamma: Optional[str] = None
    cluster: Optional[bool] = None
    cluster_eps: Optional[float] = Field(None, ge=0)
    cluster_min_samples: Optional[int] = Field(None, ge=1)
    tau: Optional[float] = Field(None, ge=-1, le=1)
    refine_length: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = None
    bonferroni: Optional[bool] = None


class InputText(BaseModel):
    text: Optional[str] = None
    tokens: Optional[list[str]] = None

    @model_validator(mode="after")
    def one_input(self):
        if (self.text is None) == (self.tokens is None):
            raise ValueError("provide exactly one of 'text' or 'tokens'")
        return self

    def token_list(self) -> list[str]:
        return self.tokens if self.tokens is not None else self.text.split()


class CertifyRequest(InputText):
    id: str = ""
    label: Optional[str] = None
    task: Optional[str] = None
    classifier: Optional[str] = None
    params: SmoothingParams = Field(default_factory=SmoothingParams)


class PredictRequest(CertifyRequest):
    pass


class PerturbRequest(InputText):
    n: int = Field(10, ge=1, le=10000)
    params: SmoothingParams = Field(default_factory=SmoothingParams)


class BoundModel(BaseModel):
    lower: float
    upper: float
    successes: int
    trials: int
    alpha: float


class VoteModel(BaseModel):
    counts: dict[str, int]
    total_sampled: int
    retained_after_cluster: int
    cluster_filtered: bool
    queries: int
    classifier_errors: int


class CertificationResponse(BaseModel):
    schema_version: str = Field("clucert_v1", alias="schema")
    input_id: str
    predicted_label: str
    ground_label: Optional[str]
    correct: Optional[bool]
    certified: bool
    radius: Optional[int]
    gap: Optional[float]
    top_prob_estimate: Optional[float]
    gamma_used: Optional[float]
    gamma_policy: str
    gamma_heuristic: bool
    alpha: float
    alpha_per_class: float
    p_value: Optional[float]
    bounds: dict[str, BoundModel]
    n: int
    s: int
    predict_votes: Optional[VoteModel]
    certify_votes: Optional[VoteModel]
    cluster_filtered: bool
    query_count: int
    abstain_reason: Optional[str] = None
    warnings: list[str] = []
    refined_positions: Optional[list[int]] = None
    wall_time: Optional[float] = None
    stage_seconds: Optional[dict[str, float]] = None

    model_config = {"populate_by_name": True}


class PredictResponse(BaseModel):
    input_id: str
    label: str
    top_prob: float
    votes: VoteModel
    refined_tokens: list[str]


class SampleModel(BaseModel):
    tokens: list[str]
    substituted_positions: list[int]
    origin_seed: list[int]


class PerturbResponse(BaseModel):
    samples: list[SampleModel]


class RecordModel(BaseModel):
    id: str
    text: str
    label: str


class JobRequest(BaseModel):
    records: list[RecordModel] = Field(..., min_length=1)
    task: Optional[str] = None
    classifier: Optional[str] = None
    params: SmoothingParams = Field(default_factory=SmoothingParams)
    workers: int = Field(1, ge=1, le=64)


class SummaryModel(BaseModel):
    n_records: int
    n_certified: int
    n_failed: int
    r_avg: Optional[float]
    coe: Optional[float]
    cert_acc_curve: list[tuple[int, float]]
    cert_acc_correct_curve: list[tuple[int, float]]
    abstain_rate: float
    clean_accuracy: Optional[float]
    wall_time: float
    total_queries: int
    stage_seconds: dict[str, float]
    exclusion_rule: str


class JobStatus(BaseModel):
    id: str
    status: Literal["queued", "running", "done", "failed"]
    done: int
    total: int
    error: Optional[str] = None
    summary: Optional[SummaryModel] = None
