"""DINO self-distillation loss with centering and sharpening, plus the iBOT masked-patch loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dino_desk.schedules import linear_warmup

if TYPE_CHECKING:
    from collections.abc import Sequence


@dataclass(frozen=True)
class DinoLossState:
    """Center and temperatures of the DINO (or iBOT) loss.

    The teacher temperature ramps linearly from `warmup_teacher_temp` to `teacher_temp`
    over `warmup_iterations` and stays constant afterwards.
    """

    center: torch.Tensor
    center_momentum: float = 0.9
    student_temp: float = 0.1
    warmup_teacher_temp: float = 0.04
    teacher_temp: float = 0.04
    warmup_iterations: int = 0

    def __post_init__(self) -> None:
        if self.student_temp <= 0 or self.teacher_temp <= 0 or self.warmup_teacher_temp <= 0:
            raise ValueError("Temperatures must be positive.")
        if not 0 <= self.center_momentum <= 1:
            raise ValueError(f"center_momentum must be in [0, 1], got {self.center_momentum}.")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be non-negative.")
        if self.center.ndim != 1 or not bool(torch.isfinite(self.center).all()):
            raise ValueError("center must be a finite vector.")

    @classmethod
    def zeros(cls, out_dim: int, **kwargs: float) -> DinoLossState:
        """Initial state with a zero center of length `out_dim`."""
        return cls(center=torch.zeros(out_dim), **kwargs)  # type: ignore[arg-type]

    @property
    def out_dim(self) -> int:
        return self.center.shape[0]


class IbotConfig(BaseModel):
    """Masked-patch objective settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    loss_weight: float = Field(default=1.0, ge=0)
    mask_sample_probability: float = Field(default=0.5, ge=0, le=1)
    mask_ratio_min_max: tuple[float, float] = (0.1, 0.5)
    separate_head: bool = False
    out_dim: int = Field(default=256, ge=1)

    @model_validator(mode="after")
    def _check_ratios(self) -> IbotConfig:
        low, high = self.mask_ratio_min_max
        if not 0 <= low <= high <= 1:
            raise ValueError(f"mask_ratio_min_max must satisfy 0 <= min <= max <= 1, got {[low, high]}.")
        return self


@dataclass(frozen=True)
class LossBreakdown:
    """Components of one step's objective. Fields are scalar tensors so `total` can backprop."""

    total: torch.Tensor
    local_dino: torch.Tensor
    global_dino: torch.Tensor
    ibot: torch.Tensor
    dino_weight: float = 1.0
    ibot_weight: float = 0.0

    def with_ibot(self, ibot: torch.Tensor, weight: float) -> LossBreakdown:
        """Return a copy whose total includes `weight * ibot`."""
        total = self.dino_weight * (self.local_dino + self.global_dino) + weight * ibot
        return replace(self, total=total, ibot=ibot, ibot_weight=weight)

    def as_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total),
            "local_dino": float(self.local_dino),
            "global_dino": float(self.global_dino),
            "ibot": float(self.ibot),
        }


def teacher_temp_at(iteration: int, state: DinoLossState) -> float:
    """Teacher temperature at `iteration`."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative.")
    return linear_warmup(iteration, state.warmup_teacher_temp, state.teacher_temp, state.warmup_iterations)


def teacher_probs(logits: torch.Tensor, state: DinoLossState, iteration: int) -> torch.Tensor:
    """Centered, sharpened teacher distribution over the last dimension."""
    if logits.shape[-1] != state.out_dim:
        raise ValueError(f"Expected {state.out_dim} logits, got {logits.shape[-1]}.")
    return F.softmax((logits - state.center.to(logits.dtype)) / teacher_temp_at(iteration, state), dim=-1)


def cross_entropy(teacher: torch.Tensor, student_logits: torch.Tensor, student_temp: float) -> torch.Tensor:
    """Per-row CE between teacher probabilities and tempered student logits."""
    return -(teacher * F.log_softmax(student_logits / student_temp, dim=-1)).sum(dim=-1)


def dino_loss(
    teacher_outputs: Sequence[torch.Tensor],
    student_outputs: Sequence[torch.Tensor],
    state: DinoLossState,
    iteration: int,
    *,
    num_global: int | None = None,
    teacher_indices: Sequence[int] | None = None,
    dino_weight: float = 1.0,
) -> LossBreakdown:
    """Cross-view DINO loss.

    `teacher_outputs` holds [B, K] logits per teacher view, `student_outputs` [B, K] logits
    per student view with the `num_global` globals first. `teacher_indices` gives the student
    position of each teacher view (default: the globals in order); a pair is skipped when
    both sides saw the same view. Pairs whose student view is global and pairs whose student
    view is local are averaged separately over pairs and batch.
    """
    num_global = len(teacher_outputs) if num_global is None else num_global
    if teacher_indices is None:
        teacher_indices = range(len(teacher_outputs))
    if len(teacher_indices) != len(teacher_outputs):
        raise ValueError("teacher_indices must name one student view per teacher view.")
    if not teacher_outputs or len(student_outputs) < num_global:
        raise ValueError(
            f"View-count mismatch: {len(teacher_outputs)} teacher views, "
            f"{len(student_outputs)} student views, {num_global} globals."
        )
    out_dim = state.out_dim
    for output in (*teacher_outputs, *student_outputs):
        if output.shape[-1] != out_dim:
            raise ValueError(f"Expected {out_dim} logits, got {output.shape[-1]}.")
    probs = [teacher_probs(logits, state, iteration) for logits in teacher_outputs]
    zero = student_outputs[0].new_zeros(())
    global_sum, global_pairs = zero, 0
    local_sum, local_pairs = zero, 0
    for i, teacher in zip(teacher_indices, probs, strict=True):
        for j, student in enumerate(student_outputs):
            if j == i:
                continue
            term = cross_entropy(teacher, student, state.student_temp).mean()
            if j < num_global:
                global_sum, global_pairs = global_sum + term, global_pairs + 1
            else:
                local_sum, local_pairs = local_sum + term, local_pairs + 1
    global_dino = global_sum / max(global_pairs, 1)
    local_dino = local_sum / max(local_pairs, 1)
    return LossBreakdown(
        total=dino_weight * (local_dino + global_dino),
        local_dino=local_dino,
        global_dino=global_dino,
        ibot=zero,
        dino_weight=dino_weight,
    )


def update_center(state: DinoLossState, batch_teacher_logits: torch.Tensor) -> DinoLossState:
    """EMA of the center towards the mean teacher logits ([N, K], all rows weighted equally)."""
    if batch_teacher_logits.ndim != 2 or batch_teacher_logits.shape[0] == 0:
        raise ValueError("update_center needs a nonempty [N, K] batch of teacher logits.")
    return update_center_from_mean(state, batch_teacher_logits.mean(dim=0))


def update_center_from_mean(state: DinoLossState, batch_mean: torch.Tensor) -> DinoLossState:
    """Center EMA from an already averaged logit vector (after a cross-worker reduce)."""
    m = state.center_momentum
    center = m * state.center + (1 - m) * batch_mean.detach().to(state.center.dtype)
    return replace(state, center=center)


def sample_ibot_mask(rng: torch.Generator, num_patches: int, config: IbotConfig) -> torch.Tensor:
    """Draw masked patch indices; empty with probability 1 - mask_sample_probability."""
    if num_patches < 1:
        raise ValueError("num_patches must be positive.")
    empty = torch.zeros(0, dtype=torch.long)
    if float(torch.rand((), generator=rng)) >= config.mask_sample_probability:
        return empty
    low, high = config.mask_ratio_min_max
    ratio = low + (high - low) * float(torch.rand((), generator=rng))
    count = min(num_patches, math.ceil(ratio * num_patches))
    return torch.randperm(num_patches, generator=rng)[:count].sort().values


def ibot_loss(
    teacher_patch_logits: torch.Tensor,
    student_patch_logits: torch.Tensor,
    mask: torch.Tensor,
    state: DinoLossState,
    iteration: int,
) -> torch.Tensor:
    """Mean CE over masked tokens of one image ([N, K] logits, mask = patch indices)."""
    if teacher_patch_logits.shape != student_patch_logits.shape:
        raise ValueError("Teacher and student patch grids differ.")
    if mask.numel() == 0:
        return student_patch_logits.new_zeros(())
    num_patches = student_patch_logits.shape[0]
    if int(mask.min()) < 0 or int(mask.max()) >= num_patches:
        raise IndexError(f"Mask index out of range for {num_patches} patches.")
    teacher = teacher_probs(teacher_patch_logits[mask], state, iteration)
    return cross_entropy(teacher, student_patch_logits[mask], state.student_temp).mean()


def batched_ibot_loss(
    teacher_patch_logits: torch.Tensor,
    student_patch_logits: torch.Tensor,
    masks: torch.Tensor,
    state: DinoLossState,
    iteration: int,
) -> torch.Tensor:
    """Batch mean of per-image iBOT losses.

    Logits are [B, N, K] and `masks` a [B, N] boolean grid; images with an empty mask add 0.
    """
    if teacher_patch_logits.shape != student_patch_logits.shape:
        raise ValueError("Teacher and student patch grids differ.")
    teacher = teacher_probs(teacher_patch_logits, state, iteration)
    per_token = cross_entropy(teacher, student_patch_logits, state.student_temp)
    weights = masks.to(per_token.dtype)
    counts = weights.sum(dim=1)
    per_image = (per_token * weights).sum(dim=1) / counts.clamp(min=1)
    return per_image.mean()


def batch_mean_entropy(probs: torch.Tensor) -> float:
    """Entropy of the batch-mean distribution of [N, K] probabilities."""
    mean = probs.mean(dim=0)
    return float(-(mean * torch.log(mean.clamp(min=1e-12))).sum())


def collapse_threshold(out_dim: int) -> float:
    """Entropy floor below which the teacher output is considered collapsing."""
    return 0.5 * math.log(out_dim)
