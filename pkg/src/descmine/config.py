"""Run configuration file: strict JSON with a version field."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .geometry import HomographyConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Carries every validation problem, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("\n".join(problems))


class HomographySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_translation_frac: float = Field(0.1, ge=0.0, le=0.5)
    max_rotation_deg: float = Field(15.0, ge=0.0)
    scale_range: tuple[float, float] = (0.85, 1.15)
    perspective_amplitude: float = Field(0.1, ge=0.0, lt=0.5)

    @model_validator(mode="after")
    def _scale(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        return self


Strategy = Literal["in_pair", "in_batch_all", "in_batch_random", "in_batch_topk", "coarse_to_fine"]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: Literal[1] = 1
    # corpus
    corpus_count: int = Field(64, ge=1)
    corpus_width: int = Field(256, ge=64)
    corpus_height: int = Field(256, ge=64)
    corpus_elements: int = Field(24, ge=1)
    # training
    pairs_per_batch: int = Field(8, ge=2)
    keypoints_per_crop: int = Field(32, ge=4)
    top_k: int = Field(30, ge=1)
    strategy: Strategy = "in_batch_topk"
    loss_kind: Literal["ap", "triplet"] = "ap"
    lr: float = Field(1e-3, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    epochs: int = Field(5, ge=0)
    steps_per_epoch: int = Field(50, ge=0)
    crop_size: int = Field(128, ge=32)
    seed: int = Field(0, ge=0, lt=2**64)
    pool_refresh_epochs: int = Field(1, ge=1)
    patch_side: Literal[8, 16, 32] = 16
    hidden: int = Field(128, ge=8)
    dim: int = Field(32, ge=8)
    ap_bins: int = Field(25, ge=2)
    triplet_margin: float = Field(0.4, gt=0)
    augment: bool = True
    homography: HomographySettings = HomographySettings()
    # evaluation
    eval_pairs: int = Field(50, ge=1)
    pixel_thresh: float = Field(3.0, gt=0)
    retrieval_scenes: int = Field(8, ge=1)
    retrieval_views: int = Field(4, ge=2)
    rerank_top_n: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _dims(self):
        if self.hidden < self.dim:
            raise ValueError("hidden must be >= dim")
        return self

    def train_config(self, pool_dir=None) -> TrainConfig:
        h = self.homography
        return TrainConfig(
            pairs_per_batch=self.pairs_per_batch,
            keypoints_per_crop=self.keypoints_per_crop,
            top_k=self.top_k,
            strategy=self.strategy,
            loss_kind=self.loss_kind,
            lr=self.lr,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            crop_size=self.crop_size,
            seed=self.seed,
            pool_dir=str(pool_dir) if pool_dir else None,
            pool_refresh_epochs=self.pool_refresh_epochs,
            patch_side=self.patch_side,
            hidden=self.hidden,
            dim=self.dim,
            ap_bins=self.ap_bins,
            triplet_margin=self.triplet_margin,
            augment=self.augment,
            homography=HomographyConfig(h.max_translation_frac, h.max_rotation_deg, tuple(h.scale_range), h.perspective_amplitude),
        )


def _problems(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        out.append(f"{where}: {err['msg']}")
    return out


def build_config(doc: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge file values with non-None flag overrides and validate everything at once."""
    merged = dict(doc or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(_problems(exc)) from None


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"config: cannot read {path}: {exc}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(["config: top level must be a JSON object"])
    if "version" not in doc:
        raise ConfigError(["version: field required"])
    return build_config(doc, overrides)
