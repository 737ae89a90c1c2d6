"""Typed pipeline configuration.

Defaults are the literature settings. A YAML file overrides them and CLI
flags override the file (see ``load_config`` and ``apply_overrides``).
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError

SAMPLE_RATE = 44100
SEGMENT_SECONDS = 2.0
FRAME_MS = 20.0
N_MELS = 40
N_FRAMES = 200
N_CHANNELS = 3
EMBEDDING_DIM = 128
SILENCE_FLOOR_DB = -80.0

SEEDED_SECTIONS = ("metric", "baseline", "head", "split")


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class FeatureConfig(_Section):
    sample_rate: int = Field(SAMPLE_RATE, gt=0)
    segment_seconds: float = Field(SEGMENT_SECONDS, gt=0)
    frame_ms: float = Field(FRAME_MS, gt=0)
    overlap: float = Field(0.5, ge=0.0, lt=1.0)
    window: str = "hann"
    n_mels: int = Field(N_MELS, ge=1)
    n_frames: int = Field(N_FRAMES, ge=1)
    fmin: float = Field(0.0, ge=0.0)
    fmax: Optional[float] = None
    mel_norm: Optional[Literal["slaney"]] = "slaney"
    hpss_kernel: int = Field(17, ge=1)
    hpss_power: float = Field(2.0, gt=0)
    silence_floor_db: float = Field(SILENCE_FLOOR_DB, lt=0)
    mel_only: bool = False

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return max(1, int(round(self.frame_length * (1.0 - self.overlap))))

    @property
    def n_fft(self) -> int:
        return 1 << (self.frame_length - 1).bit_length()

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))


class NetworkConfig(_Section):
    input_shape: tuple[int, int, int] = (N_MELS, N_FRAMES, N_CHANNELS)
    conv_filters: int = Field(64, ge=1)
    mam_1x1: int = Field(64, ge=1)
    mam_reduce: int = Field(32, ge=1)
    mam_strand: int = Field(64, ge=1)
    mam_kernels: tuple[int, int, int] = (3, 5, 7)
    mel_strides: tuple[int, int, int, int] = (2, 2, 2, 5)
    dense_units: tuple[int, int, int] = (256, 128, EMBEDDING_DIM)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    head: Literal["metric", "softmax"] = "metric"
    n_classes: Optional[int] = None

    @model_validator(mode="after")
    def _check_head(self) -> "NetworkConfig":
        if self.head == "softmax" and (self.n_classes is None or self.n_classes < 2):
            raise ValueError("softmax head requires n_classes >= 2")
        if any(k % 2 == 0 for k in self.mam_kernels):
            raise ValueError("multiscale kernels must be odd for same padding")
        return self

    @property
    def embedding_dim(self) -> int:
        return self.dense_units[-1]

    @property
    def mam_out(self) -> int:
        return self.mam_1x1 + 3 * self.mam_strand


class MetricTrainConfig(_Section):
    epochs: int = Field(150, ge=1)
    minibatches_per_epoch: int = Field(1000, ge=1)
    examples_per_class: int = Field(5, ge=2)
    triplet_batch_cap: int = Field(50, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    alpha_init: float = Field(0.2, gt=0.0)
    alpha_step: float = Field(0.05, gt=0.0)
    alpha_cap: float = Field(0.6, gt=0.0)
    thresh: int = Field(15, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_margins(self) -> "MetricTrainConfig":
        if self.alpha_init > self.alpha_cap:
            raise ValueError("alpha_init must not exceed alpha_cap")
        return self


class BaselineTrainConfig(_Section):
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(200, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    seed: int = 0


class HeadConfig(_Section):
    hidden_units: int = Field(256, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    l2: float = Field(1e-4, ge=0.0)
    max_iter: int = Field(500, ge=1)
    seed: int = 0


class OpenSetConfig(_Section):
    sigma2_floor: float = Field(1e-8, gt=0.0)
    likelihood_threshold: float = Field(0.5, gt=0.0, lt=1.0)


class SplitConfig(_Section):
    ratios: tuple[float, float, float] = (0.50, 0.15, 0.35)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ratios(self) -> "SplitConfig":
        if any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be nonnegative and sum to 1, got {self.ratios}")
        return self


class PipelineConfig(_Section):
    seed: int = 0
    cache_dir: Optional[str] = None
    ablation_repeats: int = Field(10, ge=1)
    features: FeatureConfig = FeatureConfig()
    network: NetworkConfig = NetworkConfig()
    metric: MetricTrainConfig = MetricTrainConfig()
    baseline: BaselineTrainConfig = BaselineTrainConfig()
    head: HeadConfig = HeadConfig()
    openset: OpenSetConfig = OpenSetConfig()
    split: SplitConfig = SplitConfig()

    @model_validator(mode="before")
    @classmethod
    def _propagate_seed(cls, data: Any) -> Any:
        # top-level seed fills every seeded section that does not set its own
        if isinstance(data, dict) and "seed" in data:
            data = dict(data)
            for section in SEEDED_SECTIONS:
                values = dict(data.get(section) or {})
                values.setdefault("seed", data["seed"])
                data[section] = values
        return data


def load_config(path: Optional[Path] = None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Missing config file {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path.name}: not valid YAML ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path.name}: top level must be a mapping")
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path.name}: {e}") from e


def apply_overrides(
    cfg: PipelineConfig,
    seed: Optional[int] = None,
    mel_only: Optional[bool] = None,
    cache_dir: Optional[str] = None,
) -> PipelineConfig:
    """Apply global CLI flags on top of a loaded config."""
    data = cfg.model_dump()
    if seed is not None:
        data["seed"] = seed
        for section in SEEDED_SECTIONS:
            data[section]["seed"] = seed
    if mel_only:
        data["features"]["mel_only"] = True
    if cache_dir is not None:
        data["cache_dir"] = cache_dir
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def config_echo(cfg: PipelineConfig) -> dict:
    return cfg.model_dump(mode="json")
