"""Declarative run configuration shared by the service, CLI, and pipeline.

A RunConfig is one JSON document; its canonical hash keys run manifests
so identical configs are provably identical runs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AblationFlags(StrictModel):
    """Pipeline toggles: prompt branch (sc), margin loss (eam), memory
    branch (vad), and the manual/learned alignment loss (align)."""

    sc: bool = True
    eam: bool = True
    vad: bool = True
    align: bool = True

    def name(self) -> str:
        parts = [flag for flag in ("sc", "eam", "vad", "align") if getattr(self, flag)]
        return "+".join(parts) if parts else "none"


class BackboneSettings(StrictModel):
    architecture: str = "vit-b16-plus-240"
    checkpoint: Path | None = None
    bpe_vocab: Path | None = None
    tap_layers: list[int] = Field(default_factory=lambda: [3, 8])
    temperature: float | None = None  # None: use the checkpoint's learned value
    feature_cache: Path | None = None
    init_seed: int = 0  # only used for randomly initialized (checkpoint-less) models

    @field_validator("tap_layers")
    @classmethod
    def _taps_nonempty(cls, taps: list[int]) -> list[int]:
        if not taps:
            raise ValueError("tap_layers must not be empty")
        if len(set(taps)) != len(taps):
            raise ValueError("tap_layers must be distinct")
        return taps

    @field_validator("temperature")
    @classmethod
    def _temp_positive(cls, value: float | None) -> float | None:
        if value is not None and value <= 0:
            raise ValueError("temperature must be positive")
        return value


class PromptSettings(StrictModel):
    prefix_count: int = 1          # normal prompts per bank
    prefix_length: int = 4         # learnable tokens per normal prefix
    learned_suffix_count: int = 4  # learnable anomaly suffixes per bank
    learned_suffix_length: int = 1
    lexicon_file: Path | None = None

    @field_validator("prefix_count", "prefix_length", "learned_suffix_count",
                     "learned_suffix_length")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("prompt settings must be >= 1")
        return value


class TrainSettings(StrictModel):
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0005
    align_weight: float = 0.001
    steps: int = 1000

    @field_validator("steps")
    @classmethod
    def _steps(cls, value: int) -> int:
        if value < 0:
            raise ValueError("steps must be >= 0")
        return value

    @field_validator("align_weight")
    @classmethod
    def _align(cls, value: float) -> float:
        if value < 0:
            raise ValueError("align_weight must be >= 0")
        return value


class ScoreSettings(StrictModel):
    smooth_sigma: float = 4.0
    heatmaps: bool = False


class PreprocessSettings(StrictModel):
    image_size: int = 240

    @field_validator("image_size")
    @classmethod
    def _size(cls, value: int) -> int:
        if value < 1:
            raise ValueError("image_size must be positive")
        return value


class RunConfig(StrictModel):
    dataset_root: Path
    dataset_name: str = "mvtec"
    categories: list[str] = Field(default_factory=list)  # empty: all scanned
    k: int = 1
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: Path
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    backbone: BackboneSettings = Field(default_factory=BackboneSettings)
    prompts: PromptSettings = Field(default_factory=PromptSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    score: ScoreSettings = Field(default_factory=ScoreSettings)
    preprocess: PreprocessSettings = Field(default_factory=PreprocessSettings)

    @field_validator("k")
    @classmethod
    def _k(cls, value: int) -> int:
        if value < 1:
            raise ValueError("k must be >= 1")
        return value

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, seeds: list[int]) -> list[int]:
        if not seeds:
            raise ValueError("at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        return seeds

    @model_validator(mode="after")
    def _branches(self) -> "RunConfig":
        if not self.ablation.sc and not self.ablation.vad:
            raise ValueError(
                "disabling the prompt branch (sc) disables prompt-guided "
                "scoring; the memory branch (vad) must then stay enabled"
            )
        return self

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_ablation(self, flags: AblationFlags, output_dir: Path) -> "RunConfig":
        update = self.model_dump()
        update["ablation"] = flags.model_dump()
        update["output_dir"] = output_dir
        return RunConfig.model_validate(update)
