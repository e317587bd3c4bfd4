"""FastAPI service exposing the metric/attack/benchmark operations.

Dataset paths in requests refer to the filesystem the service runs on. All
endpoints are synchronous: benchmark runs complete within the request. Run
standalone with `uvicorn percepattack.service:app`; the CLI talks to the same
app in-process by default.
"""
from __future__ import annotations

from typing import Literal, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .attacks import AttackError
from .bench import (
    ATTACK_NAMES,
    AttackConfig,
    BenchmarkError,
    evaluate_2afc_accuracy,
    margin_statistics,
    run_attack_benchmark,
    run_transfer_benchmark,
    select_unanimous,
)
from .dataio import DataError, ingest_bapps, ingest_manifest
from .gradcheck import metric_gradcheck
from .metrics import METRIC_NAMES, MetricError, WeightsFormatError, make_metric
from .optim import OptimError
from .reports import benchmark_payload, transfer_payload

GRADCHECK_TOLERANCE = 1e-3


class MetricSpec(BaseModel):
    name: Literal["l2", "ssim", "msssim", "conv"]
    weights_path: Optional[str] = None
    label: Optional[str] = None

    def build(self):
        try:
            return make_metric(self.name, self.weights_path)
        except (MetricError, WeightsFormatError, OSError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @property
    def key(self) -> str:
        return self.label or self.name


class DatasetSpec(BaseModel):
    path: str
    format: Literal["manifest", "bapps"] = "manifest"
    resize: Optional[tuple[int, int]] = None
    unanimous_only: bool = True

    def load(self):
        try:
            if self.format == "bapps":
                # Pre-filter on the judgment files so split-vote images are
                # never decoded.
                triplets = ingest_bapps(self.path, resize_to=self.resize,
                                        unanimous_only=self.unanimous_only)
            else:
                triplets = ingest_manifest(self.path, resize_to=self.resize)
        except (DataError, AttackError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        if self.unanimous_only:
            triplets = select_unanimous(triplets)
        return triplets


class AttackSpec(BaseModel):
    name: Literal["fgsm", "pgd", "onepixel", "stadv", "stadv-pgd", "reverse-pgd"]
    eps: float = 0.03
    alpha: float = 0.001
    max_iters: int = 30
    max_eps: float = 0.05
    eps_step: float = 1e-4
    alpha_rank: float = 50.0
    beta_flow: float = 0.05
    stadv_iterations: int = 250
    pgd_k: int = 10
    de_population: int = 80
    de_generations: int = 75

    def build(self) -> AttackConfig:
        try:
            return AttackConfig(
                name=self.name, eps=self.eps, alpha=self.alpha, max_iters=self.max_iters,
                max_eps=self.max_eps, eps_step=self.eps_step, alpha_rank=self.alpha_rank,
                beta_flow=self.beta_flow, stadv_iterations=self.stadv_iterations,
                pgd_k=self.pgd_k, de_population=self.de_population,
                de_generations=self.de_generations,
            )
        except (BenchmarkError, OptimError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc


class AccuracyRequest(BaseModel):
    dataset: DatasetSpec
    metric: MetricSpec
    threads: int = Field(default=1, ge=1)
    with_margins: bool = False


class AccuracyResponse(BaseModel):
    metric: str
    n_samples: int
    accuracy: float
    margins: Optional[dict[str, Optional[float]]] = None


class GradcheckRequest(BaseModel):
    metric: MetricSpec
    seed: int = 0
    height: int = Field(default=16, ge=11)
    width: int = Field(default=16, ge=11)
    channels: Literal[1, 3] = 3


class GradcheckResponse(BaseModel):
    metric: str
    seed: int
    max_relative_error: float
    tolerance: float
    passed: bool


class AttackRequest(BaseModel):
    dataset: DatasetSpec
    metric: MetricSpec
    attack: AttackSpec
    seed: int = 0
    threads: int = Field(default=1, ge=1)


class TransferRequest(BaseModel):
    dataset: DatasetSpec
    source: MetricSpec
    targets: list[MetricSpec]
    combine_ks: list[int] = [5, 10, 15, 20]
    plain_pgd_ks: list[int] = [10, 20]
    rmse_cap: float = 3.0
    seed: int = 0
    threads: int = Field(default=1, ge=1)
    stadv: AttackSpec = AttackSpec(name="stadv")


def create_app() -> FastAPI:
    app = FastAPI(title="percepattack", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/v1/metrics")
    def list_metrics() -> dict:
        return {"metrics": list(METRIC_NAMES), "attacks": list(ATTACK_NAMES)}

    @app.post("/v1/accuracy", response_model=AccuracyResponse)
    def accuracy(req: AccuracyRequest) -> AccuracyResponse:
        metric = req.metric.build()
        triplets = req.dataset.load()
        acc = evaluate_2afc_accuracy(triplets, metric, threads=req.threads)
        margins = None
        if req.with_margins:
            raw = margin_statistics(triplets, metric, threads=req.threads)
            margins = {k: (None if v != v else v) for k, v in raw.items()}
        return AccuracyResponse(
            metric=req.metric.key, n_samples=len(triplets), accuracy=acc, margins=margins
        )

    @app.post("/v1/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest) -> GradcheckResponse:
        metric = req.metric.build()
        try:
            err = metric_gradcheck(
                metric, req.seed, shape=(req.channels, req.height, req.width)
            )
        except MetricError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return GradcheckResponse(
            metric=req.metric.key, seed=req.seed, max_relative_error=err,
            tolerance=GRADCHECK_TOLERANCE, passed=err < GRADCHECK_TOLERANCE,
        )

    @app.post("/v1/attack")
    def attack(req: AttackRequest) -> dict:
        metric = req.metric.build()
        config = req.attack.build()
        triplets = req.dataset.load()
        try:
            report = run_attack_benchmark(
                triplets, metric, config, seed=req.seed, threads=req.threads
            )
        except (AttackError, OptimError, MetricError) as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return benchmark_payload(report)

    @app.post("/v1/transfer")
    def transfer(req: TransferRequest) -> dict:
        source = req.source.build()
        if not req.targets:
            raise HTTPException(status_code=400, detail="at least one target metric required")
        targets = {}
        for spec in req.targets:
            if spec.key in targets:
                raise HTTPException(status_code=400, detail=f"duplicate target {spec.key!r}")
            targets[spec.key] = spec.build()
        if req.stadv.name != "stadv":
            raise HTTPException(status_code=400,
                                detail="transfer stage config must have name 'stadv'")
        triplets = req.dataset.load()
        try:
            report = run_transfer_benchmark(
                triplets, source, targets,
                combine_ks=req.combine_ks, plain_pgd_ks=req.plain_pgd_ks,
                rmse_cap=req.rmse_cap, seed=req.seed, threads=req.threads,
                stadv_config=req.stadv.build(),
            )
        except (AttackError, OptimError, MetricError) as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return transfer_payload(report)

    return app


app = create_app()
