"""Pipeline configuration with field-precise validation."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .fit import EnergyWeights, FitConfig
from .geometry import HINDQUARTER_REGION, TemplateConfig
from .metric import TrainConfig
from .synth import AugmentPolicy, SightingJitter, SynthConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TemplateSection(_Section):
    joint_count: int = Field(11)
    keypoint_count: int = Field(16)
    resolution: int = Field(24, ge=8)
    basis_seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.joint_count not in (7, 11, 13):
            raise ValueError("joint_count must be one of 7, 11, 13")
        if self.keypoint_count not in (8, 16):
            raise ValueError("keypoint_count must be 8 or 16")
        return self

    def build(self) -> TemplateConfig:
        return TemplateConfig(resolution=self.resolution, joint_count=self.joint_count,
                              keypoint_count=self.keypoint_count, basis_seed=self.basis_seed)


class JitterSection(_Section):
    azimuth: float = Field(0.35, ge=0)
    tilt: float = Field(0.08, ge=0)
    pose: float = Field(0.15, ge=0)
    depth: float = Field(0.1, ge=0, lt=1)
    offset: float = Field(0.08, ge=0)
    light: float = Field(0.4, ge=0)


class PolicySection(_Section):
    saturation: float = Field(0.3, ge=0)
    contrast: float = Field(0.3, ge=0)
    brightness: float = Field(25.0, ge=0)
    shift: float = Field(12.0, ge=0)
    rotation: float = Field(8.0, ge=0)


class SynthSection(_Section):
    individuals: int = Field(10, ge=2)
    sightings_per_individual: int = Field(4, ge=2)
    train_per_individual: int = Field(2, ge=1)
    augment_factor: int = Field(25, ge=1)
    image_size: int = Field(256, ge=64)
    frequency_range: tuple[float, float] = (6.0, 16.0)
    jitter: JitterSection = JitterSection()
    augment: PolicySection = PolicySection()

    @model_validator(mode="after")
    def _check(self):
        if self.train_per_individual >= self.sightings_per_individual:
            raise ValueError("train_per_individual must be smaller than sightings_per_individual")
        if not 0 < self.frequency_range[0] <= self.frequency_range[1]:
            raise ValueError("frequency_range must be positive and ordered")
        return self

    def build(self, seed: int) -> SynthConfig:
        return SynthConfig(self.individuals, self.sightings_per_individual, self.train_per_individual,
                           self.augment_factor, seed, self.image_size,
                           SightingJitter(**self.jitter.model_dump()), AugmentPolicy(**self.augment.model_dump()),
                           tuple(self.frequency_range))


class RoiSection(_Section):
    conf_thresh: float = Field(0.83, ge=0, le=1)
    nest_iou: float = Field(0.3, ge=0, le=1)
    containment: float = Field(0.9, ge=0, le=1)
    match_iou: float = Field(0.5, gt=0, le=1)
    target_species: str = "grevys_zebra"
    species_url: str | None = None
    species_timeout: float = Field(10.0, gt=0)
    species_stub_dir: str | None = None
    max_concurrency: int = Field(4, ge=1)
    fail_open: bool = False


class FitSection(_Section):
    kp_weight: float = Field(1.0, ge=0)
    sil_weight: float = Field(0.05, ge=0)
    pose_weight: float = Field(0.01, ge=0)
    shape_weight: float = Field(0.01, ge=0)
    use_silhouette: bool = False
    boundary_samples: int = Field(64, ge=4)
    max_iterations: int = Field(200, ge=1)
    tolerance: float = Field(1e-8, gt=0)
    focal: float = Field(500.0, gt=0)

    def build(self) -> FitConfig:
        return FitConfig(EnergyWeights(self.kp_weight, self.sil_weight, self.pose_weight, self.shape_weight),
                         self.use_silhouette, self.boundary_samples, self.max_iterations, self.tolerance,
                         focal=self.focal)


class TextureSection(_Section):
    region: tuple[float, float, float, float] = HINDQUARTER_REGION

    @model_validator(mode="after")
    def _check(self):
        u1, v1, u2, v2 = self.region
        if not (0 <= u1 < u2 <= 1 and 0 <= v1 < v2 <= 1):
            raise ValueError("region must be a rectangle inside [0, 1]^2")
        return self


class TrainSection(_Section):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(8, ge=2)
    learning_rate: float = Field(0.1, gt=0)
    rtl_lambda: float = Field(0.0001, ge=0)
    identities_per_batch: int = Field(4, ge=2)
    samples_per_identity: int = Field(2, ge=2)
    precision: str = Field("float32", pattern="^(float32|float64)$")

    @model_validator(mode="after")
    def _check(self):
        if self.identities_per_batch * self.samples_per_identity != self.batch_size:
            raise ValueError("identities_per_batch * samples_per_identity must equal batch_size")
        return self

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           rtl_lambda=self.rtl_lambda, identities_per_batch=self.identities_per_batch,
                           samples_per_identity=self.samples_per_identity, seed=seed)


class IdentifySection(_Section):
    k: int = Field(1, ge=1)


class PathsSection(_Section):
    run_dir: str = "run"


class PipelineConfig(_Section):
    seed: int = 7
    template: TemplateSection = TemplateSection()
    synth: SynthSection = SynthSection()
    roi: RoiSection = RoiSection()
    fit: FitSection = FitSection()
    texture: TextureSection = TextureSection()
    train: TrainSection = TrainSection()
    identify: IdentifySection = IdentifySection()
    paths: PathsSection = PathsSection()

    def dump(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        """Hash of everything that affects results; the run location is excluded."""
        data = self.dump()
        data.pop("paths")
        text = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def parse_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid config: {problems}") from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)
