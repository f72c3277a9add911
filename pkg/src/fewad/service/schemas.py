"""Request/response models for the HTTP API (also used by the CLI client)."""

from __future__ import annotations

from pathlib import Path

from pydantic import BaseModel, ConfigDict

from ..config import AblationFlags, RunConfig
from ..metrics import MetricReport


class ApiModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthResponse(ApiModel):
    status: str
    version: str


class TrainRequest(ApiModel):
    config: RunConfig


class BundleInfo(ApiModel):
    category: str
    seed: int
    shots: list[str]
    bundle_path: str
    manifest_path: str
    manifest_hash: str


class TrainResponse(ApiModel):
    config_hash: str
    run_manifest: str
    bundles: list[BundleInfo]


class EvalRequest(ApiModel):
    config: RunConfig


class MetricRowModel(ApiModel):
    category: str
    seed: int
    image_auroc: float
    image_aupr: float
    pixel_auroc: float | None = None
    pixel_pro: float | None = None


class MetricStatModel(ApiModel):
    mean: float
    std: float | None = None
    n: int


class CategorySummaryModel(ApiModel):
    category: str
    stats: dict[str, MetricStatModel]


class EvalResponse(ApiModel):
    rows: list[MetricRowModel]
    categories: list[CategorySummaryModel]
    dataset_mean: dict[str, float | None]
    csv_path: str
    table_path: str

    @classmethod
    def from_report(cls, report: MetricReport, csv_path: Path, table_path: Path) -> "EvalResponse":
        return cls(
            rows=[
                MetricRowModel(
                    category=row.category,
                    seed=row.seed,
                    image_auroc=row.image_auroc,
                    image_aupr=row.image_aupr,
                    pixel_auroc=row.pixel_auroc,
                    pixel_pro=row.pixel_pro,
                )
                for row in report.rows
            ],
            categories=[
                CategorySummaryModel(
                    category=summary.category,
                    stats={
                        metric: MetricStatModel(mean=stat.mean, std=stat.std, n=stat.n)
                        for metric, stat in summary.stats.items()
                    },
                )
                for summary in report.categories
            ],
            dataset_mean=report.dataset_mean,
            csv_path=str(csv_path),
            table_path=str(table_path),
        )


class ScoreRequest(ApiModel):
    config: RunConfig
    bundle: Path
    image: Path
    heatmap_dir: Path | None = None


class ScoreResponse(ApiModel):
    image_score: float
    prompt_image_score: float | None = None
    vision_peak: float | None = None
    provenance: str
    heatmap: str | None = None
    overlay: str | None = None


class AblateRequest(ApiModel):
    config: RunConfig
    rows: list[AblationFlags] | None = None


class AblateRowResult(ApiModel):
    name: str
    flags: AblationFlags
    eval: EvalResponse


class AblateResponse(ApiModel):
    rows: list[AblateRowResult]
