# config.py
"""PipelineConfig: one versioned JSON document holding every stage's settings."""
import json
import logging
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from body_model import PRESET_ALIASES, ModelDims
from curation import SelectionConfig
from errors import ConfigurationError, DataIOError, SchemaVersionError
from geometry import Camera
from learn import LossConfig, NetworkConfig, OptimizerConfig
from synth import NoiseProfile
from trainer import AugmentationConfig, EmaConfig

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
SNAPSHOT_NAME = "config.snapshot.json"


class DimsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    preset: Literal["toy", "full", "custom"] = "toy"
    custom: Optional[ModelDims] = None
    template_seed: int = Field(default=0, ge=0)

    @field_validator("preset", mode="before")
    @classmethod
    def _preset_alias(cls, value):
        return PRESET_ALIASES.get(value, value) if isinstance(value, str) else value

    @model_validator(mode="after")
    def _custom_present(self):
        if self.preset == "custom" and self.custom is None:
            raise ValueError("preset 'custom' needs a 'custom' ModelDims block")
        return self

    def resolve(self):
        return self.custom if self.preset == "custom" else ModelDims.preset(self.preset)


class SceneConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    focal_length: float = Field(default=1000.0, gt=0)
    principal_point: tuple[float, float] = (512.0, 512.0)
    subject_depth: float = Field(default=3.0, gt=0)
    pose_prior_scale: float = Field(default=0.3, gt=0)

    def camera(self):
        return Camera(focal_length=self.focal_length, principal_point=self.principal_point,
                      subject_depth=self.subject_depth)


class SeedConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    master: int = Field(default=0, ge=0, lt=2**64)
    model: int = Field(default=0, ge=0, lt=2**64)
    feature_map: int = Field(default=0, ge=0, lt=2**64)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: int
    dims: DimsConfig = DimsConfig()
    scene: SceneConfig = SceneConfig()
    noise: NoiseProfile = NoiseProfile()
    selection: SelectionConfig = SelectionConfig()
    loss: LossConfig = LossConfig()
    network: NetworkConfig = NetworkConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    ema: EmaConfig = EmaConfig(enabled=False)
    augmentation: AugmentationConfig = AugmentationConfig()
    seeds: SeedConfig = SeedConfig()
    threads: int = Field(default=1, ge=1)

    def with_overrides(self, seed=None, threads=None):
        """Apply the global CLI flags."""
        doc = self.model_dump()
        if seed is not None:
            doc["seeds"]["master"] = seed
        if threads is not None:
            doc["threads"] = threads
        try:
            return PipelineConfig.model_validate(doc)
        except ValidationError as e:
            raise ConfigurationError(f"invalid override: {e.errors()[0]['msg']}") from e

    def model_dims(self):
        return self.dims.resolve()


def default_config():
    return PipelineConfig(schema_version=CONFIG_SCHEMA_VERSION)


def parse_config(doc, source="<config>"):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{source}: config must be a JSON object")
    version = doc.get("schema_version")
    if version is None:
        raise ConfigurationError(f"{source}: missing schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"config schema_version {version} is not supported (this build reads {CONFIG_SCHEMA_VERSION}); "
            "upgrade the file by re-saving a snapshot from this version", source)
    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(x) for x in first["loc"])
        raise ConfigurationError(f"{source}: {where}: {first['msg']}") from e


def load_config(path=None):
    """Read and validate a config file; the built-in defaults without one."""
    if path is None:
        return default_config()
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataIOError(f"cannot read config ({e.strerror})", path) from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    cfg = parse_config(doc, str(path))
    logger.debug("loaded config %s", path)
    return cfg


def snapshot(cfg: PipelineConfig, out_dir):
    """Write the resolved config next to a command's outputs."""
    path = Path(out_dir) / SNAPSHOT_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write ({e.strerror})", path) from e
    return path
