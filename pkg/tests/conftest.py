"""Fixtures that are shared across tests."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Final
from unittest.mock import Mock

import numpy as np
import pytest
import torch

from dino_desk.config import AccelConfig, TrainConfig, parse_train_config_data
from dino_desk.data import ImageSample, LabeledSample, RoiMask, write_pgm
from dino_desk.make_utils import Settings

TEST_ENV_VARS: Final = {
    "DINO_DESK_ENVIRONMENT": "production",
    "DINO_DESK_TORCH_THREADS": "2",
}
TEST_ERROR_MESSAGE: Final = "Test error message"
IMAGE_SIZE: Final = 32

# Small enough for a few CPU iterations per test
TINY_CONFIG: Final[dict[str, Any]] = {
    "dino_head": {"out_dim": 32, "hidden_dim": 32, "bottleneck_dim": 16},
    "ibot": {"loss_weight": 0.0, "out_dim": 32},
    "crops": {
        "global_crops_size": 16,
        "local_crops_size": 8,
        "global_crops_number": 2,
        "local_crops_number": 2,
        "guided_crops_number": 1,
    },
    "train": {
        "model_type": "desk-tiny",
        "global_batch_size": 4,
        "max_iterations": 6,
        "warmup_iterations": 1,
        "lr": 1e-3,
        "min_lr": 1e-5,
        "saveckp_freq": 3,
        "seed": 7,
    },
}


def create_log_record(
    module: str = "test_module",
    level: int = 20,  # INFO level
    msg: str = "Test message",
    args: tuple[str | Mapping[str, str], ...] = (),
) -> logging.LogRecord:
    """Create LogRecord instances for testing using a helper function.

    Args:
    ----
        module: The module name for the log record
        level: The logging level (default: INFO/20)
        msg: The message to log
        args: Tuple of arguments for message formatting (default: empty tuple)

    Returns:
    -------
        LogRecord: A configured log record for testing

    """
    return logging.LogRecord(
        name=module, level=level, pathname="test.py", lineno=1, msg=msg, args=args, exc_info=None
    )


def tiny_config(**sections: dict[str, Any]) -> TrainConfig:
    """The tiny training config with per-section overrides merged in."""
    data = {name: dict(values) for name, values in TINY_CONFIG.items()}
    for name, values in sections.items():
        data[name] = data.get(name, {}) | values
    return parse_train_config_data(data)


def accel_config(workers: int = 1, kind: str = "ddp") -> AccelConfig:
    return AccelConfig.model_validate({"distribution": {"type": kind, "num_workers": workers}})


def blob_image(rng: np.random.Generator, size: int = IMAGE_SIZE) -> tuple[torch.Tensor, torch.Tensor]:
    """A bright Gaussian blob on a dim background, plus its ROI (pixels above half the peak)."""
    rows, cols = np.mgrid[0:size, 0:size]
    center = rng.uniform(size * 0.3, size * 0.7, size=2)
    sigma = rng.uniform(size * 0.08, size * 0.15)
    blob = np.exp(-((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / (2 * sigma**2))
    pixels = 0.1 + 0.8 * blob + rng.normal(0, 0.02, size=(size, size))
    image = torch.from_numpy(np.clip(pixels, 0, 1)).float().unsqueeze(0)
    return image, torch.from_numpy(blob > 0.5)


def stripe_image(rng: np.random.Generator, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Sinusoidal stripes with a random period, phase and orientation."""
    rows, cols = np.mgrid[0:size, 0:size]
    angle = rng.uniform(0, math.pi)
    period = rng.uniform(4, 8)
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.sin(2 * math.pi * (rows * math.sin(angle) + cols * math.cos(angle)) / period + phase)
    pixels = 0.5 + 0.4 * wave + rng.normal(0, 0.02, size=(size, size))
    return torch.from_numpy(np.clip(pixels, 0, 1)).float().unsqueeze(0)


def synthetic_samples(count: int, seed: int = 0, *, with_roi: bool = True) -> list[LabeledSample]:
    """Alternating blob (label 0) and stripe (label 1) images."""
    rng = np.random.default_rng(seed)
    samples = []
    for index in range(count):
        if index % 2 == 0:
            pixels, roi = blob_image(rng)
            mask = RoiMask(roi) if with_roi else None
            samples.append(LabeledSample(ImageSample(pixels, f"blob_{index:03d}"), 0, mask))
        else:
            pixels = stripe_image(rng)
            samples.append(LabeledSample(ImageSample(pixels, f"stripe_{index:03d}"), 1))
    return samples


def write_dataset(root: Path, samples: list[LabeledSample]) -> Path:
    """Write samples as PGM files with a manifest.csv; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    lines = ["image,label,roi"]
    for sample in samples:
        name = f"{sample.image.source_id}.pgm"
        write_pgm(root / name, sample.image.pixels[0])
        roi_name = ""
        if sample.roi is not None:
            roi_name = f"{sample.image.source_id}_roi.pgm"
            write_pgm(root / roi_name, sample.roi.mask.float())
        lines.append(f"{name},{sample.label},{roi_name}")
    manifest = root / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


@pytest.fixture(name="settings")
def fixture_settings(monkeypatch: pytest.MonkeyPatch) -> Settings:
    """Set up a development environment before building the settings."""
    monkeypatch.setenv("DINO_DESK_ENVIRONMENT", "development")
    monkeypatch.delenv("DINO_DESK_TORCH_THREADS", raising=False)

    Settings.cache_clear()  # Clear any cached settings
    return Settings()


@pytest.fixture(name="prod_settings")
def fixture_prod_settings(tmp_path: Path) -> Mock:
    """Set up production environment settings."""
    settings = Mock(spec=Settings)
    settings.ENVIRONMENT = TEST_ENV_VARS["DINO_DESK_ENVIRONMENT"]
    settings.LOG_FILE = tmp_path / "dino_desk.log"
    settings.TORCH_THREADS = int(TEST_ENV_VARS["DINO_DESK_TORCH_THREADS"])
    return settings


@pytest.fixture(name="mock_logger")
def fixture_mock_logger() -> Mock:
    """Create a mock logger with all necessary methods."""
    logger = Mock()
    logger.info = Mock()
    logger.error = Mock()
    logger.warning = Mock()
    logger.critical = Mock()
    logger.debug = Mock()
    return logger


@pytest.fixture(name="samples")
def fixture_samples() -> list[LabeledSample]:
    """Eight synthetic blob / stripe images; blobs carry an ROI."""
    return synthetic_samples(8)


@pytest.fixture(name="config")
def fixture_config() -> TrainConfig:
    return tiny_config()


def test_function() -> None:
    """A dummy function for unit testing decorators."""
    return None
