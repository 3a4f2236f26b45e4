"""Tests for the training and accelerator config files."""

from __future__ import annotations

from pathlib import Path

import pytest

from dino_desk.config import (
    AccelConfig,
    TrainConfig,
    check_compatible,
    dump_train_config,
    parse_accel_config,
    parse_train_config,
    parse_train_config_data,
)
from dino_desk.errors import ConfigError
from tests.conftest import accel_config, tiny_config

TRAIN_YAML = """\
dino_head:
  out_dim: 64
  norm_last_layer: true
ibot:
  loss_weight: 0.0
  mask_sample_probability: 0.5
  mask_ratio_min_max: [0.1, 0.5]
lora_config:
  lora_r: 8
  lora_targets: [Q, K, V]
crops:
  global_crops_size: 16
  local_crops_size: 8
  local_crops_number: 4
dataset:
  dataset_path: data/train
  channels: 1
train:
  model_name: toy
  model_type: desk-tiny
  global_batch_size: 8
  max_iterations: 40
  warmup_iterations: 4
  use_lora: true
  freeze_last_layer: 2
  saveckp_freq: 10
"""

ACCEL_YAML = """\
distribution:
  type: fsdp
  mixed_precision: bf16
  num_workers: 2
"""


@pytest.fixture(name="train_file")
def fixture_train_file(tmp_path: Path) -> Path:
    path = tmp_path / "train.yaml"
    path.write_text(TRAIN_YAML, encoding="utf-8")
    return path


def test_parse_train_config(train_file: Path) -> None:
    config = parse_train_config(train_file)

    assert config.dino_head.out_dim == 64
    assert config.lora_config.lora_targets == ("Q", "K", "V")
    assert config.train.model_name == "toy"
    assert config.train.max_iterations == 40
    assert config.dataset.dataset_path == Path("data/train")
    # Untouched sections keep their defaults
    assert config.distillation.teacher_views == "global"
    assert config.train.teacher_temp == 0.04


def test_derived_views(train_file: Path) -> None:
    config = parse_train_config(train_file)

    assert config.variant == "dinov1"
    assert config.augmentation_domain == "medical"
    assert config.vit_config.embed_dim == 32
    assert config.vit_config.in_channels == 1
    assert config.crop_config().local_crops_number == 4
    assert config.lora().r == 8
    assert config.lora().target_projections == ("Q", "K", "V")
    assert config.ibot_config().loss_weight == 0.0
    params = config.schedule_params()
    assert params.max_iterations == 40
    assert params.warmup_iterations == 4
    assert params.weight_decay_end == 0.4


def test_variant_and_domain_switches() -> None:
    assert tiny_config(ibot={"loss_weight": 0.5}).variant == "dinov2"
    assert tiny_config(dataset={"channels": 3}).augmentation_domain == "rgb"
    assert tiny_config(dataset={"channels": 3}, crops={"augmentation": "medical"}).augmentation_domain == "medical"


def test_dump_round_trip(train_file: Path, tmp_path: Path) -> None:
    config = parse_train_config(train_file)
    copy = tmp_path / "copy.yaml"
    copy.write_text(dump_train_config(config), encoding="utf-8")
    assert parse_train_config(copy) == config


def test_empty_file_gives_defaults(tmp_path: Path) -> None:
    path = tmp_path / "empty.yaml"
    path.write_text("", encoding="utf-8")
    assert parse_train_config(path) == TrainConfig()


@pytest.mark.parametrize(
    ("data", "match"),
    [
        ({"train": {"max_iteration": 10}}, "train.max_iteration"),
        ({"train": {"lr": -1.0}}, "train.lr"),
        ({"train": {"min_lr": 1.0, "lr": 0.1}}, "min_lr"),
        ({"train": {"warmup_iterations": 300}}, "warmup_iterations"),
        ({"train": {"model_type": "vit-huge"}}, "Unknown model_type"),
        ({"crops": {"global_crops_size": 18}}, "multiple of the patch size"),
        ({"train": {"freeze_backbone_layers": 9}}, "exceeds depth"),
        ({"ibot": {"mask_ratio_min_max": [0.6, 0.1]}}, "mask_ratio_min_max"),
        ({"dataset": {"normalization": "standardize"}}, "mean and std"),
        ({"dataset": {"normalization": "standardize", "mean": [0.5], "std": [0.0]}}, "positive"),
        ({"distillation": {"teacher_views": "some"}}, "teacher_views"),
        ({"train": {"do_distillation": True}, "distillation": {"distilled_model_type": "x"}}, "distilled_model_type"),
        ({"optimizer": {}}, "optimizer"),
    ],
)
def test_invalid_configs_name_the_key(data: dict[str, object], match: str) -> None:
    with pytest.raises(ConfigError, match=match):
        parse_train_config_data(data, "train.yaml")


@pytest.mark.parametrize(
    ("text", "match"),
    [("train: [1, 2", "not valid YAML"), ("- a\n- b\n", "mapping at the top level")],
)
def test_unreadable_files(tmp_path: Path, text: str, match: str) -> None:
    path = tmp_path / "bad.yaml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError, match=match):
        parse_train_config(path)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="does not exist"):
        parse_train_config(tmp_path / "absent.yaml")


def test_structural_snapshot() -> None:
    config = tiny_config()
    snapshot = config.structural_snapshot()

    assert snapshot["train.model_type"] == "desk-tiny"
    assert snapshot["train.seed"] == 7
    assert snapshot["dataset.channels"] == 1
    assert "train.max_iterations" not in snapshot
    assert tiny_config(train={"max_iterations": 50}).structural_snapshot() == snapshot
    assert tiny_config(dino_head={"out_dim": 16}).structural_snapshot() != snapshot


def test_parse_accel_config(tmp_path: Path) -> None:
    path = tmp_path / "accel.yaml"
    path.write_text(ACCEL_YAML, encoding="utf-8")

    accel = parse_accel_config(path)

    assert accel.distribution.type == "fsdp"
    assert accel.distribution.mixed_precision == "bf16"
    assert accel.distribution.num_workers == 2
    assert AccelConfig().distribution.num_workers == 1


def test_parse_accel_config_rejects_unknown_type(tmp_path: Path) -> None:
    path = tmp_path / "accel.yaml"
    path.write_text("distribution:\n  type: deepspeed\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="distribution.type"):
        parse_accel_config(path)


def test_check_compatible() -> None:
    config = tiny_config()
    check_compatible(config, accel_config(2))
    check_compatible(config, accel_config(4))
    with pytest.raises(ConfigError, match="not divisible"):
        check_compatible(config, accel_config(3))
