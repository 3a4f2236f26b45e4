"""Multi-crop view generation with RGB / medical policies and label-guided crops.

All randomness flows through an explicit `torch.Generator`, so a ViewSet is a pure function of
(image, configs, seed).
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Final, Literal

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dino_desk.data import RoiMask, write_pgm
from dino_desk.errors import PolicyError
from dino_desk.utils import get_logger

logger = get_logger("dino_desk.augment")

PRIMITIVES: Final = (
    "hflip",
    "vflip",
    "crop",
    "resized_crop",
    "gaussian_blur",
    "solarize",
    "color_jitter",
    "brightness_shift",
    "noise_addition",
)
# Table of primitives each image domain forbids
FORBIDDEN: Final[dict[str, frozenset[str]]] = {
    "rgb": frozenset({"brightness_shift", "noise_addition"}),
    "medical": frozenset({"solarize", "color_jitter"}),
}
BLUR_SIGMA: Final = (0.1, 2.0)
BRIGHTNESS_DELTA: Final = (-0.2, 0.2)
NOISE_SIGMA: Final = (0.01, 0.1)
JITTER_FACTOR: Final = (0.6, 1.4)
LOG_ASPECT: Final = (math.log(3 / 4), math.log(4 / 3))

type ViewKind = Literal["global", "local", "guided"]


class CropConfig(BaseModel):
    """Multi-crop geometry, mirroring the `crops` section of the training config."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    global_crops_scale: tuple[float, float] = (0.4, 1.0)
    local_crops_scale: tuple[float, float] = (0.1, 0.4)
    global_crops_number: int = Field(default=2, ge=1)
    local_crops_number: int = Field(default=8, ge=0)
    global_crops_size: int = Field(default=32, ge=1)
    local_crops_size: int = Field(default=16, ge=1)
    guided_crops_number: int = Field(default=2, ge=0)
    augmentation: Literal["rgb", "medical"] | None = None

    @model_validator(mode="after")
    def _check_scales(self) -> CropConfig:
        for name in ("global_crops_scale", "local_crops_scale"):
            low, high = getattr(self, name)
            if not 0 < low <= high <= 1:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got {[low, high]}.")
        return self


class AugmentationPolicy(BaseModel):
    """Which primitives may run and how often, for one image domain."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    domain: Literal["rgb", "medical"]
    probabilities: dict[str, float]

    @model_validator(mode="after")
    def _check_gating(self) -> AugmentationPolicy:
        for kind, probability in self.probabilities.items():
            if kind not in PRIMITIVES:
                raise ValueError(f"Unknown primitive {kind!r}.")
            if not 0 <= probability <= 1:
                raise ValueError(f"Probability of {kind} must be in [0, 1].")
            if probability > 0 and kind in FORBIDDEN[self.domain]:
                raise ValueError(f"{kind} is not allowed for {self.domain} images.")
        return self

    @classmethod
    def for_domain(cls, domain: Literal["rgb", "medical"]) -> AugmentationPolicy:
        """Default policy of a domain."""
        if domain == "rgb":
            probabilities = {
                "hflip": 0.5,
                "vflip": 0.2,
                "crop": 0.2,
                "gaussian_blur": 0.5,
                "solarize": 0.2,
                "color_jitter": 0.8,
            }
        else:
            probabilities = {
                "hflip": 0.5,
                "vflip": 0.5,
                "crop": 0.2,
                "gaussian_blur": 0.5,
                "brightness_shift": 0.5,
                "noise_addition": 0.5,
            }
        return cls(domain=domain, probabilities=probabilities)

    def enabled(self, kind: str) -> bool:
        """Whether `kind` may run under this policy; resized_crop always may."""
        return kind == "resized_crop" or (
            kind not in FORBIDDEN[self.domain] and self.probabilities.get(kind, 0.0) > 0
        )


@dataclass(frozen=True)
class ViewProvenance:
    """Where a view came from: crop rectangle (top, left, height, width) and primitives."""

    kind: ViewKind
    rect: tuple[int, int, int, int]
    primitives: tuple[str, ...]
    focus: tuple[int, int] | None = None
    fallback: bool = False


@dataclass(frozen=True)
class ViewSet:
    """Augmented crops of one source image."""

    global_views: tuple[torch.Tensor, ...]
    local_views: tuple[torch.Tensor, ...]
    guided_views: tuple[torch.Tensor, ...]
    provenance: tuple[ViewProvenance, ...]
    rng_seed: int

    @property
    def student_local_views(self) -> tuple[torch.Tensor, ...]:
        """Local-resolution views in the order the student consumes them."""
        return self.local_views + self.guided_views


def view_seed(base_seed: int, iteration: int, sample_index: int) -> int:
    """Derive an independent 63-bit seed for one sample of one iteration."""
    state = np.random.SeedSequence([base_seed, iteration, sample_index]).generate_state(2)
    return int((int(state[0]) << 32 | int(state[1])) & ((1 << 63) - 1))


def make_generator(seed: int) -> torch.Generator:
    """Create a CPU generator seeded with `seed`."""
    return torch.Generator().manual_seed(seed)


def _uniform(rng: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(torch.rand((), generator=rng))


def _randint(rng: torch.Generator, low: int, high: int) -> int:
    """Uniform integer in [low, high]."""
    return int(torch.randint(low, high + 1, (), generator=rng))


def _bernoulli(rng: torch.Generator, probability: float) -> bool:
    return probability > 0 and float(torch.rand((), generator=rng)) < probability


def _blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, math.ceil(3 * sigma))
    offsets = torch.arange(-radius, radius + 1, dtype=image.dtype)
    kernel = torch.exp(-(offsets**2) / (2 * sigma**2))
    kernel /= kernel.sum()
    channels = image.shape[0]
    x = F.pad(image.unsqueeze(0), (radius, radius, radius, radius), mode="replicate")
    x = F.conv2d(x, kernel.view(1, 1, 1, -1).expand(channels, 1, 1, -1), groups=channels)
    x = F.conv2d(x, kernel.view(1, 1, -1, 1).expand(channels, 1, -1, 1), groups=channels)
    return x.squeeze(0)


def _color_jitter(image: torch.Tensor, params: Mapping[str, float]) -> torch.Tensor:
    x = image * params.get("brightness", 1.0)
    mean = x.mean()
    x = (x - mean) * params.get("contrast", 1.0) + mean
    if x.shape[0] == 3:
        grey = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).unsqueeze(0)
        x = (x - grey) * params.get("saturation", 1.0) + grey
    return x


def _resize(image: torch.Tensor, size: int) -> torch.Tensor:
    if image.shape[-2:] == (size, size):
        return image
    return F.interpolate(
        image.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    ).squeeze(0)


def _check_range(kind: str, name: str, value: float, bounds: tuple[float, float]) -> None:
    if not bounds[0] <= value <= bounds[1]:
        raise ValueError(f"{kind}: {name}={value} outside {list(bounds)}.")


def apply_primitive(
    image: torch.Tensor,
    kind: str,
    params: Mapping[str, float],
    rng: torch.Generator,
    policy: AugmentationPolicy | None = None,
) -> torch.Tensor:
    """Apply one augmentation primitive to a [C, H, W] image and clamp into [0, 1].

    Parameters per kind: crop(padding), resized_crop(top, left, height, width, size),
    gaussian_blur(sigma), solarize(threshold), color_jitter(brightness, contrast, saturation),
    brightness_shift(delta), noise_addition(sigma). Flips take none.
    """
    if kind not in PRIMITIVES:
        raise ValueError(f"Unknown primitive {kind!r}.")
    if policy is not None and not policy.enabled(kind):
        raise PolicyError(f"{kind} is disabled by the {policy.domain} policy.")
    match kind:
        case "hflip":
            return image.flip(-1)
        case "vflip":
            return image.flip(-2)
        case "crop":
            padding = int(params.get("padding", 2))
            _check_range(kind, "padding", padding, (0, min(image.shape[-2:])))
            height, width = image.shape[-2:]
            padded = F.pad(image, (padding, padding, padding, padding))
            top, left = _randint(rng, 0, 2 * padding), _randint(rng, 0, 2 * padding)
            out = padded[:, top : top + height, left : left + width]
        case "resized_crop":
            top, left = int(params["top"]), int(params["left"])
            height, width = int(params["height"]), int(params["width"])
            if height < 1 or width < 1:
                raise ValueError("resized_crop: degenerate crop window.")
            if top < 0 or left < 0 or top + height > image.shape[-2] or left + width > image.shape[-1]:
                raise ValueError("resized_crop: window outside the image.")
            out = _resize(image[:, top : top + height, left : left + width], int(params["size"]))
        case "gaussian_blur":
            sigma = float(params["sigma"])
            _check_range(kind, "sigma", sigma, BLUR_SIGMA)
            out = _blur(image, sigma)
        case "solarize":
            threshold = float(params.get("threshold", 0.5))
            _check_range(kind, "threshold", threshold, (0.0, 1.0))
            out = torch.where(image >= threshold, 1.0 - image, image)
        case "color_jitter":
            for name in ("brightness", "contrast", "saturation"):
                _check_range(kind, name, float(params.get(name, 1.0)), JITTER_FACTOR)
            out = _color_jitter(image, params)
        case "brightness_shift":
            delta = float(params["delta"])
            _check_range(kind, "delta", delta, BRIGHTNESS_DELTA)
            out = image + delta
        case _:
            sigma = float(params["sigma"])
            _check_range(kind, "sigma", sigma, NOISE_SIGMA)
            out = image + sigma * torch.randn(image.shape, generator=rng, dtype=image.dtype)
    return out.clamp(0.0, 1.0)


def _draw_params(kind: str, rng: torch.Generator) -> dict[str, float]:
    match kind:
        case "gaussian_blur":
            return {"sigma": _uniform(rng, *BLUR_SIGMA)}
        case "solarize":
            return {"threshold": 0.5}
        case "color_jitter":
            return {name: _uniform(rng, *JITTER_FACTOR) for name in ("brightness", "contrast", "saturation")}
        case "brightness_shift":
            return {"delta": _uniform(rng, *BRIGHTNESS_DELTA)}
        case "noise_addition":
            return {"sigma": _uniform(rng, *NOISE_SIGMA)}
        case _:
            return {}


def _apply_chain(
    view: torch.Tensor, policy: AugmentationPolicy, rng: torch.Generator
) -> tuple[torch.Tensor, list[str]]:
    applied = []
    for kind in PRIMITIVES:
        if kind == "resized_crop" or not policy.enabled(kind):
            continue
        if _bernoulli(rng, policy.probabilities[kind]):
            view = apply_primitive(view, kind, _draw_params(kind, rng), rng, policy)
            applied.append(kind)
    return view, applied


def _random_rect(
    height: int, width: int, scale: tuple[float, float], rng: torch.Generator
) -> tuple[int, int, int, int]:
    area = height * width
    for _ in range(10):
        target = area * _uniform(rng, *scale)
        aspect = math.exp(_uniform(rng, *LOG_ASPECT))
        crop_w = round(math.sqrt(target * aspect))
        crop_h = round(math.sqrt(target / aspect))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            return _randint(rng, 0, height - crop_h), _randint(rng, 0, width - crop_w), crop_h, crop_w
    side = min(height, width, round(math.sqrt(area * _uniform(rng, *scale))))
    if side < 1:
        raise ValueError(f"Degenerate crop window for a {height}x{width} image.")
    return _randint(rng, 0, height - side), _randint(rng, 0, width - side), side, side


def _guided_rect(
    height: int,
    width: int,
    focus: tuple[int, int],
    scale: tuple[float, float],
    rng: torch.Generator,
) -> tuple[int, int, int, int]:
    side = min(height, width, max(1, round(math.sqrt(height * width * _uniform(rng, *scale)))))
    row, col = focus
    top = _randint(rng, max(0, row - side + 1), min(row, height - side))
    left = _randint(rng, max(0, col - side + 1), min(col, width - side))
    return top, left, side, side


def pick_focus_center(roi: RoiMask, rng: torch.Generator) -> tuple[int, int]:
    """Draw a focus pixel uniformly among the nonzero pixels of `roi`."""
    coords = roi.mask.nonzero()
    if coords.shape[0] == 0:
        raise ValueError("Cannot pick a focus center from an empty ROI.")
    row, col = coords[_randint(rng, 0, coords.shape[0] - 1)].tolist()
    return int(row), int(col)


def make_views(
    image: torch.Tensor,
    crop_config: CropConfig,
    policy: AugmentationPolicy,
    roi: RoiMask | None,
    rng: torch.Generator,
    *,
    rng_seed: int = 0,
) -> ViewSet:
    """Produce the global, local and label-guided views of one [C, H, W] image.

    Guided views come from focus pixels of the ROI and always receive the medical chain. When
    guided crops are requested but the ROI is missing or empty, the slots are filled with
    random local crops flagged `fallback` in their provenance.
    """
    height, width = image.shape[-2:]
    min_side = math.sqrt(height * width * min(crop_config.local_crops_scale[0], crop_config.global_crops_scale[0]))
    if min_side < 1:
        raise ValueError(f"Image {height}x{width} is too small for the configured crop scales.")
    guided_policy = AugmentationPolicy.for_domain("medical")
    views: dict[ViewKind, list[torch.Tensor]] = {"global": [], "local": [], "guided": []}
    provenance: list[ViewProvenance] = []

    def emit(
        kind: ViewKind,
        rect: tuple[int, int, int, int],
        size: int,
        chain_policy: AugmentationPolicy,
        **extra: object,
    ) -> None:
        top, left, crop_h, crop_w = rect
        params = {"top": top, "left": left, "height": crop_h, "width": crop_w, "size": size}
        view = apply_primitive(image, "resized_crop", params, rng)
        view, applied = _apply_chain(view, chain_policy, rng)
        views[kind].append(view)
        provenance.append(
            ViewProvenance(kind, rect, ("resized_crop", *applied), **extra)  # type: ignore[arg-type]
        )

    for _ in range(crop_config.global_crops_number):
        rect = _random_rect(height, width, crop_config.global_crops_scale, rng)
        emit("global", rect, crop_config.global_crops_size, policy)
    for _ in range(crop_config.local_crops_number):
        rect = _random_rect(height, width, crop_config.local_crops_scale, rng)
        emit("local", rect, crop_config.local_crops_size, policy)
    if crop_config.guided_crops_number:
        usable = roi is not None and not roi.is_empty()
        if not usable:
            logger.debug("Guided crops requested without a usable ROI; using random crops.")
        for _ in range(crop_config.guided_crops_number):
            if usable and roi is not None:
                focus = pick_focus_center(roi, rng)
                rect = _guided_rect(height, width, focus, crop_config.local_crops_scale, rng)
                emit("guided", rect, crop_config.local_crops_size, guided_policy, focus=focus)
            else:
                rect = _random_rect(height, width, crop_config.local_crops_scale, rng)
                emit("guided", rect, crop_config.local_crops_size, guided_policy, fallback=True)
    return ViewSet(
        global_views=tuple(views["global"]),
        local_views=tuple(views["local"]),
        guided_views=tuple(views["guided"]),
        provenance=tuple(provenance),
        rng_seed=rng_seed,
    )


def make_views_seeded(
    image: torch.Tensor,
    crop_config: CropConfig,
    policy: AugmentationPolicy,
    roi: RoiMask | None,
    seed: int,
) -> ViewSet:
    """`make_views` with a fresh generator seeded by `seed`."""
    return make_views(image, crop_config, policy, roi, make_generator(seed), rng_seed=seed)


def save_view_samples(viewset: ViewSet, directory: Path, prefix: str = "sample") -> list[Path]:
    """Write every view of a ViewSet as an 8-bit PGM (channel mean for colour views)."""
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    all_views = viewset.global_views + viewset.local_views + viewset.guided_views
    for index, (view, origin) in enumerate(zip(all_views, viewset.provenance, strict=True)):
        path = directory / f"{prefix}_{index:02d}_{origin.kind}.pgm"
        write_pgm(path, view.mean(dim=0))
        written.append(path)
    return written
