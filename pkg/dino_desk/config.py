"""Training and accelerator configuration files.

Both files are YAML. Every section is a pydantic model that forbids unknown keys, so a typo
such as `max_iteration` is reported with its full key path instead of being ignored.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from dino_desk.augment import CropConfig
from dino_desk.errors import ConfigError
from dino_desk.losses import IbotConfig
from dino_desk.peft import LoraConfig
from dino_desk.schedules import ScheduleParams
from dino_desk.vit import PRESETS, ViTConfig, resolve_preset

# Keys whose change makes a checkpoint unusable
STRUCTURAL_TRAIN_KEYS = (
    "model_type",
    "global_batch_size",
    "use_lora",
    "freeze_backbone_layers",
    "ibot_separate_head",
    "centering",
    "seed",
)


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DinoHeadSection(Section):
    out_dim: int = Field(default=256, ge=1)
    norm_last_layer: bool = True
    loss_weight: float = Field(default=1.0, ge=0)
    hidden_dim: int = Field(default=256, ge=1)
    bottleneck_dim: int = Field(default=64, ge=1)


class IbotSection(Section):
    loss_weight: float = Field(default=0.0, ge=0)
    out_dim: int = Field(default=256, ge=1)
    norm_last_layer: bool = True
    mask_sample_probability: float = Field(default=0.5, ge=0, le=1)
    mask_ratio_min_max: tuple[float, float] = (0.1, 0.5)

    @model_validator(mode="after")
    def _check_ratios(self) -> IbotSection:
        low, high = self.mask_ratio_min_max
        if not 0 <= low <= high <= 1:
            raise ValueError("mask_ratio_min_max must satisfy 0 <= min <= max <= 1.")
        return self


class DistillationSection(Section):
    distilled_model_type: str = "tiny-giant"
    distilled_model_weights: str = ""
    load_from_disk: bool = False
    teacher_views: Literal["global", "local", "all"] = "global"


class LoraSection(Section):
    lora_r: int = Field(default=4, ge=1)
    lora_alpha: float = Field(default=16.0, gt=0)
    lora_dropout: float = Field(default=0.1, ge=0, lt=1)
    lora_targets: tuple[str, ...] = ("Q", "V")


class CropsSection(Section):
    global_crops_scale: tuple[float, float] = (0.4, 1.0)
    local_crops_scale: tuple[float, float] = (0.1, 0.4)
    global_crops_number: int = Field(default=2, ge=1)
    local_crops_number: int = Field(default=8, ge=0)
    global_crops_size: int = Field(default=32, ge=1)
    local_crops_size: int = Field(default=16, ge=1)
    guided_crops_number: int = Field(default=2, ge=0)
    augmentation: Literal["rgb", "medical"] | None = None


class DatasetSection(Section):
    dataset_path: Path = Path("dataset")
    shuffle: bool = True
    channels: Literal[1, 3] = 1
    normalization: Literal["unit", "standardize"] = "unit"
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    @model_validator(mode="after")
    def _check_statistics(self) -> DatasetSection:
        if self.normalization == "standardize":
            if self.mean is None or self.std is None:
                raise ValueError("standardize normalization needs mean and std.")
            if len(self.mean) != self.channels or len(self.std) != self.channels:
                raise ValueError("mean and std need one value per channel.")
            if any(value <= 0 for value in self.std):
                raise ValueError("std values must be positive.")
        return self


class TrainSection(Section):
    model_name: str = "dino_desk_run"
    model_type: str = "desk-small"
    global_batch_size: int = Field(default=16, ge=1)
    max_iterations: int = Field(default=300, ge=1)
    do_distillation: bool = False
    mixed_precision: bool | str = False
    use_lora: bool = False
    freeze_last_layer: int = Field(default=1, ge=0)
    warmup_teacher_temp_iterations: int = Field(default=0, ge=0)
    warmup_iterations: int = Field(default=10, ge=0)
    teacher_temp: float = Field(default=0.04, gt=0)
    warmup_teacher_temp: float = Field(default=0.04, gt=0)
    freeze_backbone_layers: int = Field(default=0, ge=0)
    momentum_teacher: float = Field(default=0.996, gt=0, lt=1)
    centering: Literal["centering"] = "centering"
    ibot_separate_head: bool = False
    use_pretrained: bool = False
    pretrained_weights: Path | None = None
    generate_samples: bool = False
    lr: float = Field(default=5e-4, gt=0)
    min_lr: float = Field(default=1e-6, gt=0)
    weight_decay: float = Field(default=0.04, ge=0)
    weight_decay_end: float = Field(default=0.4, ge=0)
    clip_grad: float = Field(default=3.0, ge=0)
    student_temp: float = Field(default=0.1, gt=0)
    center_momentum: float = Field(default=0.9, ge=0, le=1)
    saveckp_freq: int = Field(default=250, ge=1)
    log_freq: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> TrainSection:
        if self.min_lr > self.lr:
            raise ValueError(f"min_lr ({self.min_lr}) must not exceed lr ({self.lr}).")
        if self.warmup_iterations >= self.max_iterations:
            raise ValueError("warmup_iterations must be smaller than max_iterations.")
        if self.model_type not in PRESETS:
            raise ValueError(f"Unknown model_type {self.model_type!r}; known: {sorted(PRESETS)}.")
        return self


class TrainConfig(Section):
    """The whole training file."""

    dino_head: DinoHeadSection = DinoHeadSection()
    ibot: IbotSection = IbotSection()
    distillation: DistillationSection = DistillationSection()
    lora_config: LoraSection = LoraSection()
    crops: CropsSection = CropsSection()
    dataset: DatasetSection = DatasetSection()
    train: TrainSection = TrainSection()

    @model_validator(mode="after")
    def _check_geometry(self) -> TrainConfig:
        patch = self.vit_config.patch_size
        for name in ("global_crops_size", "local_crops_size"):
            size = getattr(self.crops, name)
            if size < patch or size % patch:
                raise ValueError(f"crops.{name}={size} must be a multiple of the patch size {patch}.")
        if self.train.freeze_backbone_layers > self.vit_config.depth:
            raise ValueError(
                f"freeze_backbone_layers={self.train.freeze_backbone_layers} exceeds depth {self.vit_config.depth}."
            )
        if self.train.do_distillation and self.distillation.distilled_model_type not in PRESETS:
            raise ValueError(f"Unknown distilled_model_type {self.distillation.distilled_model_type!r}.")
        return self

    @property
    def variant(self) -> Literal["dinov1", "dinov2"]:
        """Objective style: the masked-patch loss is only active with a positive weight."""
        return "dinov2" if self.ibot.loss_weight > 0 else "dinov1"

    @property
    def vit_config(self) -> ViTConfig:
        preset = resolve_preset(self.train.model_type)
        return preset.model_copy(update={"in_channels": self.dataset.channels})

    @property
    def augmentation_domain(self) -> Literal["rgb", "medical"]:
        if self.crops.augmentation is not None:
            return self.crops.augmentation
        return "rgb" if self.dataset.channels == 3 else "medical"

    def crop_config(self) -> CropConfig:
        return CropConfig(**self.crops.model_dump())

    def ibot_config(self) -> IbotConfig:
        return IbotConfig(
            loss_weight=self.ibot.loss_weight,
            mask_sample_probability=self.ibot.mask_sample_probability,
            mask_ratio_min_max=self.ibot.mask_ratio_min_max,
            separate_head=self.train.ibot_separate_head,
            out_dim=self.ibot.out_dim,
        )

    def lora(self) -> LoraConfig:
        section = self.lora_config
        return LoraConfig(
            r=section.lora_r,
            alpha=section.lora_alpha,
            dropout=section.lora_dropout,
            target_projections=section.lora_targets,
        )

    def schedule_params(self) -> ScheduleParams:
        train = self.train
        return ScheduleParams(
            max_iterations=train.max_iterations,
            lr=train.lr,
            min_lr=train.min_lr,
            warmup_iterations=train.warmup_iterations,
            weight_decay=train.weight_decay,
            weight_decay_end=train.weight_decay_end,
            momentum_teacher=train.momentum_teacher,
            warmup_teacher_temp=train.warmup_teacher_temp,
            teacher_temp=train.teacher_temp,
            warmup_teacher_temp_iterations=train.warmup_teacher_temp_iterations,
        )

    def structural_snapshot(self) -> dict[str, Any]:
        """The parts of the config a checkpoint depends on."""
        dumped = self.model_dump(mode="json")
        return {
            "dino_head": dumped["dino_head"],
            "ibot": dumped["ibot"],
            "lora_config": dumped["lora_config"],
            "crops": dumped["crops"],
            "dataset.channels": dumped["dataset"]["channels"],
            **{f"train.{key}": dumped["train"][key] for key in STRUCTURAL_TRAIN_KEYS},
        }


class DistributionSection(Section):
    type: Literal["ddp", "fsdp"] = "ddp"
    mixed_precision: str | bool = "no"
    downcast_bf16: str | bool = "no"
    num_workers: int = Field(default=1, ge=1)


class AccelConfig(Section):
    """The accelerator file."""

    distribution: DistributionSection = DistributionSection()


def _format_errors(err: ValidationError) -> str:
    lines = []
    for error in err.errors():
        location = ".".join(str(part) for part in error["loc"]) or "<root>"
        lines.append(f"{location}: {error['msg']}")
    return "; ".join(lines)


def _load_yaml(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as err:
        raise ConfigError(f"Config file {path} does not exist.") from err
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path} is not valid YAML: {err}") from err
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level.")
    return data


def parse_train_config_data(data: dict[str, Any], source: str = "<memory>") -> TrainConfig:
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"{source}: {_format_errors(err)}") from err


def parse_train_config(path: Path) -> TrainConfig:
    """Load and validate a training YAML file."""
    return parse_train_config_data(_load_yaml(path), str(path))


def parse_accel_config(path: Path) -> AccelConfig:
    """Load and validate an accelerator YAML file."""
    try:
        return AccelConfig.model_validate(_load_yaml(path))
    except ValidationError as err:
        raise ConfigError(f"{path}: {_format_errors(err)}") from err


def dump_train_config(config: TrainConfig) -> str:
    """Render a config back to YAML; parsing the result gives an equal config."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def check_compatible(config: TrainConfig, accel: AccelConfig) -> None:
    """Raise when the global batch cannot be split evenly over the workers."""
    workers = accel.distribution.num_workers
    if config.train.global_batch_size % workers:
        raise ConfigError(
            f"train.global_batch_size={config.train.global_batch_size} is not divisible by "
            f"distribution.num_workers={workers}."
        )
