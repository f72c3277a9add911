"""Service operations: pure functions from request to response models.

The HTTP layer and the CLI's local mode both call these, so a request
is validated and executed identically whether it arrives over the wire
or in-process.
"""

from __future__ import annotations

from .._version import __version__
from .. import pipeline
from .schemas import (
    AblateRequest,
    AblateResponse,
    AblateRowResult,
    BundleInfo,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    ScoreRequest,
    ScoreResponse,
    TrainRequest,
    TrainResponse,
)


def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


def train(request: TrainRequest) -> TrainResponse:
    result = pipeline.run_train(request.config)
    return TrainResponse(
        config_hash=result.config_hash,
        run_manifest=str(result.run_manifest_path),
        bundles=[
            BundleInfo(
                category=rec.category,
                seed=rec.seed,
                shots=rec.shots,
                bundle_path=str(rec.bundle_path),
                manifest_path=str(rec.manifest_path),
                manifest_hash=rec.manifest_hash,
            )
            for rec in result.records
        ],
    )


def evaluate(request: EvalRequest) -> EvalResponse:
    result = pipeline.run_eval(request.config)
    return EvalResponse.from_report(result.report, result.csv_path, result.table_path)


def score(request: ScoreRequest) -> ScoreResponse:
    payload = pipeline.run_score(
        request.config, request.bundle, request.image, request.heatmap_dir
    )
    return ScoreResponse(**payload)


def ablate(request: AblateRequest) -> AblateResponse:
    rows = request.rows if request.rows is not None else list(pipeline.DEFAULT_ABLATION_ROWS)
    results = pipeline.run_ablate(request.config, rows)
    out = []
    for flags in rows:
        result = results[flags.name()]
        out.append(
            AblateRowResult(
                name=flags.name(),
                flags=flags,
                eval=EvalResponse.from_report(
                    result.report, result.csv_path, result.table_path
                ),
            )
        )
    return AblateResponse(rows=out)
