"""Distillation from a frozen, larger teacher into a smaller student.

The teacher backbone and its head projection never change. The teacher head's last layer
follows a shadow of the student kept by EMA, so teacher targets live in the student's
output space even when the embedding widths differ.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import torch

from dino_desk.config import DistillationSection
from dino_desk.data import read_tensors
from dino_desk.errors import CheckpointError, FormatError, TrainingError
from dino_desk.losses import dino_loss, teacher_probs, update_center_from_mean
from dino_desk.schedules import Schedules
from dino_desk.trainer import DinoTrainer, StepOutput, ViewBatch, ema_update
from dino_desk.vit import (
    DinoModel,
    ViTConfig,
    VisionTransformer,
    build_head,
    build_vit,
    load_matching,
    resolve_preset,
)

TEACHER_SEED_OFFSET = 101
TEACHER_HEAD_SEED_OFFSET = 102


@dataclass(frozen=True)
class TeacherSpec:
    """A frozen teacher encoder and where it came from."""

    config: ViTConfig
    backbone: VisionTransformer
    source: Literal["synthetic", "checkpoint"]

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim


def parameter_hash(module: torch.nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter, in registration order."""
    digest = hashlib.sha256()
    for name, param in module.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().contiguous().numpy().tobytes())
    return digest.hexdigest()


def load_teacher(section: DistillationSection, *, in_channels: int = 1, seed: int = 0) -> TeacherSpec:
    """Instantiate the teacher preset, from disk when `load_from_disk` is set, and freeze it."""
    preset = resolve_preset(section.distilled_model_type)
    config = preset.model_copy(update={"in_channels": in_channels})
    backbone = build_vit(config, seed + TEACHER_SEED_OFFSET)
    source: Literal["synthetic", "checkpoint"] = "synthetic"
    if section.load_from_disk:
        path = Path(section.distilled_model_weights)
        if not path.is_file():
            raise CheckpointError(f"Teacher weights {path} do not exist.")
        try:
            tensors = read_tensors(path)
        except FormatError as err:
            raise CheckpointError(f"Teacher weights {path} are corrupt: {err}") from err
        prefix = next(
            (p for p in ("teacher.backbone.", "backbone.") if any(name.startswith(p) for name in tensors)),
            "",
        )
        try:
            load_matching(backbone, tensors, prefix)
        except (KeyError, ValueError) as err:
            raise CheckpointError(f"Teacher weights {path} do not fit {section.distilled_model_type}: {err}") from err
        source = "checkpoint"
    backbone.requires_grad_(False)
    backbone.eval()
    return TeacherSpec(config=config, backbone=backbone, source=source)


class DistillTrainer(DinoTrainer):
    """Student-from-teacher training sharing the workers, reducer and checkpoints of DinoTrainer."""

    def _build_targets(self, student: DinoModel) -> None:
        config = self.config
        spec = load_teacher(config.distillation, in_channels=config.dataset.channels, seed=config.train.seed)
        head = config.dino_head
        teacher_head = build_head(
            spec.embed_dim,
            head.out_dim,
            config.train.seed + TEACHER_HEAD_SEED_OFFSET,
            hidden_dim=head.hidden_dim,
            bottleneck_dim=head.bottleneck_dim,
            norm_last_layer=head.norm_last_layer,
        )
        self.teacher_spec = spec
        self.shadow = copy.deepcopy(student)
        self.shadow.requires_grad_(False)
        self.teacher = DinoModel(spec.backbone, teacher_head)
        self.teacher.requires_grad_(False)
        self.teacher.eval()
        self._sync_teacher_head()
        self.teacher_hash = parameter_hash(spec.backbone)

    def _sync_teacher_head(self) -> None:
        with torch.no_grad():
            source = self.shadow.dino_head.last_layer
            target = self.teacher.dino_head.last_layer
            target.weight_v.copy_(source.weight_v)
            target.weight_g.copy_(source.weight_g)

    def _teacher_views(self, batch: ViewBatch) -> list[int]:
        num_global = len(batch.global_views)
        total = num_global + len(batch.local_views)
        match self.config.distillation.teacher_views:
            case "global":
                return list(range(num_global))
            case "local":
                return list(range(num_global, total)) or list(range(num_global))
            case _:
                return list(range(total))

    def compute_loss(self, model: DinoModel, batch: ViewBatch, iteration: int) -> StepOutput:
        """CE between teacher targets on the routed views and the student on every view."""
        views = [*batch.global_views, *batch.local_views]
        routed = self._teacher_views(batch)
        with torch.no_grad():
            teacher_logits = [
                self.teacher.dino_head(self.teacher.backbone(views[index]).cls) for index in routed
            ]
        student_logits = [model.dino_head(model.backbone(view).cls) for view in views]
        if teacher_logits[0].shape[-1] != student_logits[0].shape[-1]:
            raise ValueError("Teacher and student heads emit different output sizes.")
        breakdown = dino_loss(
            teacher_logits,
            student_logits,
            self.dino_state,
            iteration,
            num_global=len(batch.global_views),
            teacher_indices=routed,
            dino_weight=self.config.dino_head.loss_weight,
        )
        stacked = torch.cat(teacher_logits)
        stats = {
            "teacher_logit_mean": stacked.mean(dim=0),
            "teacher_prob_mean": teacher_probs(stacked, self.dino_state, iteration).mean(dim=0),
        }
        return StepOutput(breakdown.with_ibot(breakdown.ibot, 0.0), stats)

    def _after_step(self, iteration: int, reduced: dict[str, torch.Tensor]) -> None:
        momentum = Schedules.at(iteration, self.schedule_params).teacher_momentum
        ema_update(self.shadow, self.student, momentum)
        self._sync_teacher_head()
        self.dino_state = update_center_from_mean(self.dino_state, reduced["stat.teacher_logit_mean"])
        self.verify_teacher()

    def verify_teacher(self) -> None:
        """Raise when the frozen teacher received a gradient or changed."""
        backbone = self.teacher_spec.backbone
        if any(param.grad is not None for param in backbone.parameters()):
            raise TrainingError("The frozen teacher received a gradient.")
        if parameter_hash(backbone) != self.teacher_hash:
            raise TrainingError("The frozen teacher's parameters changed.")

    def checkpoint_tensors(self) -> dict[str, torch.Tensor]:
        tensors = super().checkpoint_tensors()
        tensors |= {f"shadow.{name}": value for name, value in self.shadow.state_dict().items()}
        return tensors

    def _load_model_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for replica in self.replicas:
            load_matching(replica, tensors, "student.")
        load_matching(self.shadow, tensors, "shadow.")
        load_matching(self.teacher, tensors, "teacher.")
        if parameter_hash(self.teacher_spec.backbone) != self.teacher_hash:
            raise CheckpointError("The checkpoint holds a different teacher backbone.")

