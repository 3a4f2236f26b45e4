"""Self-distillation training loop with worker threads, EMA teacher and checkpoints.

Every worker owns a replica of the student and its optimizer. Views depend only on the global
position of a sample in the batch, so a run gives the same losses for any worker count. In
`fsdp` mode each worker keeps optimizer state only for the tensors it owns and broadcasts its
updated tensors after the step.
"""

from __future__ import annotations

import copy
import shutil
import tempfile
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Final

import numpy as np
import torch
import yaml
from torch import nn

from dino_desk.augment import (
    AugmentationPolicy,
    make_generator,
    make_views,
    make_views_seeded,
    save_view_samples,
    view_seed,
)
from dino_desk.config import AccelConfig, TrainConfig, check_compatible, dump_train_config
from dino_desk.data import LabeledSample, normalize, read_tensors, write_tensors
from dino_desk.errors import CheckpointError, ConfigError, FormatError, TrainingError
from dino_desk.layout import RunLayout
from dino_desk.losses import (
    DinoLossState,
    LossBreakdown,
    batch_mean_entropy,
    batched_ibot_loss,
    collapse_threshold,
    dino_loss,
    sample_ibot_mask,
    teacher_probs,
    update_center_from_mean,
)
from dino_desk.make_utils import attach_run_handlers, detach_handlers
from dino_desk.parallel import ShardLayout, ThreadReducer, shard_states
from dino_desk.peft import freeze_backbone_layers, inject_lora
from dino_desk.schedules import Schedules
from dino_desk.utils import memory_usage_gb, rank_logger, retry
from dino_desk.vit import (
    DinoHead,
    DinoModel,
    VisionTransformer,
    backward,
    build_head,
    build_vit,
    load_matching,
    mask_from_indices,
    trainable_parameters,
)

STATE_FILE: Final = "state.dmxt"
META_FILE: Final = "meta.yaml"
LAST_LAYER_MARKER: Final = ".last_layer."
ADAM_BETAS: Final = (0.9, 0.999)
ADAM_EPS: Final = 1e-8
HEAD_SEED_OFFSET: Final = 1
IBOT_HEAD_SEED_OFFSET: Final = 2
LORA_SEED_OFFSET: Final = 3
# Only this rank logs; its line carries the all-reduced losses of every worker
LEADER_RANK: Final = 0

type MemoryProbe = Callable[[], tuple[float, float]]


@dataclass(frozen=True)
class IterationRecord:
    """Everything one log line reports, plus the collapse monitor value."""

    iteration: int
    max_iterations: int
    total: float
    local_dino: float
    global_dino: float
    ibot: float
    lr: float
    weight_decay: float
    teacher_momentum: float
    teacher_temp: float
    batch_size: int
    worker_id: int
    memory_used: float
    memory_total: float
    entropy: float = float("nan")

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


def format_log_line(record: IterationRecord) -> str:
    """Render the fixed-width training log line."""
    return (
        f"Total Loss: {record.total:.4f} "
        f"Local DINO: {record.local_dino:.4f} "
        f"Global DINO: {record.global_dino:.4f} "
        f"iBOT: {record.ibot:.4f} "
        f"LR: {record.lr:.6f} "
        f"Weight Decay: {record.weight_decay:.6f} "
        f"Teacher momentum: {record.teacher_momentum:.6f} "
        f"Current Batch Size: {record.batch_size:d} "
        f"Iteration: {record.iteration}/{record.max_iterations} "
        f"Worker ID: {record.worker_id:d} "
        f"Memory: {record.memory_used:.2f}/{record.memory_total:.2f}"
    )


def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s for every parameter, matched by name.

    Uses lerp so equal tensors stay bit-identical for any momentum.
    """
    teacher_params = dict(teacher.named_parameters())
    student_params = dict(student.named_parameters())
    if teacher_params.keys() != student_params.keys():
        missing = sorted(teacher_params.keys() ^ student_params.keys())
        raise ValueError(f"EMA parameter names differ: {missing[:5]}.")
    with torch.no_grad():
        for name, param in teacher_params.items():
            param.lerp_(student_params[name].detach(), 1.0 - momentum)


@dataclass
class ViewBatch:
    """Stacked views of one worker's share of the batch."""

    global_views: list[torch.Tensor]
    local_views: list[torch.Tensor]
    masks: list[torch.Tensor] | None

    @property
    def size(self) -> int:
        return self.global_views[0].shape[0]


@dataclass
class StepOutput:
    breakdown: LossBreakdown
    stats: dict[str, torch.Tensor] = field(default_factory=dict)


def param_groups(model: nn.Module) -> list[dict[str, Any]]:
    """Split trainable parameters into decayed weights and undecayed biases / norms."""
    decayed, plain = [], []
    for name, param in trainable_parameters(model).items():
        (plain if name.endswith(".bias") or param.ndim == 1 else decayed).append(param)
    groups = [
        {"params": decayed, "apply_decay": True},
        {"params": plain, "apply_decay": False},
    ]
    return [group for group in groups if group["params"]]


def build_student(config: TrainConfig) -> DinoModel:
    """Seeded student: backbone, DINO head and, for separate-head masked modelling, an iBOT head."""
    seed = config.train.seed
    vit_config = config.vit_config
    backbone = build_vit(vit_config, seed)
    head = config.dino_head

    def make_head(out_dim: int, offset: int, norm_last_layer: bool) -> DinoHead:
        return build_head(
            vit_config.embed_dim,
            out_dim,
            seed + offset,
            hidden_dim=head.hidden_dim,
            bottleneck_dim=head.bottleneck_dim,
            norm_last_layer=norm_last_layer,
        )

    dino_head = make_head(head.out_dim, HEAD_SEED_OFFSET, head.norm_last_layer)
    ibot_head = None
    if config.variant == "dinov2" and config.train.ibot_separate_head:
        ibot_head = make_head(config.ibot.out_dim, IBOT_HEAD_SEED_OFFSET, config.ibot.norm_last_layer)
    return DinoModel(backbone, dino_head, ibot_head)


def apply_peft(model: DinoModel, config: TrainConfig) -> DinoModel:
    """Apply LoRA and layer freezing; frozen layers win over adapters."""
    if config.train.use_lora:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.train.seed + LORA_SEED_OFFSET)
            inject_lora(model, config.lora())
    freeze_backbone_layers(model, config.train.freeze_backbone_layers)
    return model


def _detect_prefix(tensors: dict[str, torch.Tensor], candidates: Sequence[str]) -> str:
    for prefix in candidates:
        if any(name.startswith(prefix) for name in tensors):
            return prefix
    return ""


def load_pretrained(model: DinoModel, path: Path) -> None:
    """Initialise the backbone from a tensor container (a checkpoint or a bare backbone)."""
    try:
        tensors = read_tensors(path)
    except FileNotFoundError as err:
        raise ConfigError(f"Pretrained weights {path} do not exist.") from err
    prefix = _detect_prefix(tensors, ("teacher.backbone.", "student.backbone.", "backbone."))
    try:
        load_matching(model.backbone, tensors, prefix)
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"{path} does not fit the configured backbone: {err}") from err


def load_backbone(checkpoint: Path, config: TrainConfig, *, role: str = "teacher") -> VisionTransformer:
    """Rebuild the encoder of a checkpoint (the teacher by default) for evaluation."""
    state_path = checkpoint / STATE_FILE if checkpoint.is_dir() else checkpoint
    if not state_path.is_file():
        raise CheckpointError(f"No tensor state at {state_path}.")
    try:
        tensors = read_tensors(state_path)
    except FormatError as err:
        raise CheckpointError(str(err)) from err
    model = apply_peft(build_student(config), config)
    prefix = f"{role}.backbone."
    if not any(name.startswith(prefix) for name in tensors):
        prefix = _detect_prefix(tensors, ("student.backbone.", "backbone."))
    try:
        load_matching(model.backbone, tensors, prefix)
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"{state_path} does not match the config: {err}") from err
    model.backbone.eval()
    return model.backbone


class DinoTrainer:
    """Self-distillation with an EMA teacher, optionally with the masked-patch objective."""

    def __init__(
        self,
        config: TrainConfig,
        accel: AccelConfig,
        samples: Sequence[LabeledSample],
        layout: RunLayout | None = None,
        *,
        memory_probe: MemoryProbe = memory_usage_gb,
        reducer_timeout: float = 300.0,
    ) -> None:
        """Validate inputs and build the student replicas, the teacher and the optimizers."""
        check_compatible(config, accel)
        if not samples:
            raise ConfigError("The dataset is empty.")
        channels = {sample.image.channels for sample in samples}
        if channels != {config.dataset.channels}:
            raise ConfigError(
                f"dataset.channels={config.dataset.channels} but images have {sorted(channels)} channels."
            )
        self.config = config
        self.accel = accel
        self.samples = list(samples)
        self.layout = layout
        self.memory_probe = memory_probe
        self.workers = accel.distribution.num_workers
        self.local_batch = config.train.global_batch_size // self.workers
        self.schedule_params = config.schedule_params()
        self.crop_config = config.crop_config()
        self.policy = AugmentationPolicy.for_domain(config.augmentation_domain)
        self.ibot_config = config.ibot_config()
        self.logger = rank_logger(LEADER_RANK)
        self.iteration = 0
        self.history: list[IterationRecord] = []

        student = self._build_student()
        self.replicas: list[DinoModel] = [student] + [copy.deepcopy(student) for _ in range(self.workers - 1)]
        self._build_targets(student)
        self.optimizers = [
            torch.optim.AdamW(param_groups(replica), lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)
            for replica in self.replicas
        ]
        trainable = trainable_parameters(student)
        self.shards: ShardLayout | None = None
        if accel.distribution.type == "fsdp":
            self.shards = shard_states(trainable, self.workers)
        self.dino_state = self._initial_state(config.dino_head.out_dim)
        self.ibot_state = self._initial_state(student.patch_head.out_dim)
        self.reducer = ThreadReducer(self.workers, timeout=reducer_timeout)
        if self.crop_config.guided_crops_number and not any(s.roi is not None for s in self.samples):
            self.logger.warning("Guided crops requested but no sample has an ROI; random crops fill them.")

    @property
    def student(self) -> DinoModel:
        return self.replicas[0]

    def _initial_state(self, out_dim: int) -> DinoLossState:
        train = self.config.train
        return DinoLossState(
            center=torch.zeros(out_dim),
            center_momentum=train.center_momentum,
            student_temp=train.student_temp,
            warmup_teacher_temp=train.warmup_teacher_temp,
            teacher_temp=train.teacher_temp,
            warmup_iterations=train.warmup_teacher_temp_iterations,
        )

    def _build_student(self) -> DinoModel:
        student = build_student(self.config)
        train = self.config.train
        if train.use_pretrained and train.pretrained_weights is not None:
            load_pretrained(student, train.pretrained_weights)
        elif train.use_pretrained:
            self.logger.warning("use_pretrained is set without pretrained_weights; the student keeps its seeded init.")
        return apply_peft(student, self.config)

    def _build_targets(self, student: DinoModel) -> None:
        """Create the EMA teacher as a frozen copy of the student."""
        self.teacher = copy.deepcopy(student)
        self.teacher.requires_grad_(False)
        self.teacher.eval()

    # Batches and views

    def sample_indices(self, iteration: int) -> list[int]:
        """Dataset indices of the global batch of `iteration`, in slot order."""
        count = len(self.samples)
        batch = self.config.train.global_batch_size
        indices = []
        for position in range(iteration * batch, (iteration + 1) * batch):
            epoch, offset = divmod(position, count)
            if self.config.dataset.shuffle:
                order = np.random.default_rng([self.config.train.seed, epoch]).permutation(count)
                indices.append(int(order[offset]))
            else:
                indices.append(offset)
        return indices

    def _prepare(self, views: Sequence[torch.Tensor]) -> torch.Tensor:
        dataset = self.config.dataset
        return normalize(torch.stack(list(views)), dataset.normalization, dataset.mean, dataset.std)

    def make_batch(self, rank: int, iteration: int) -> ViewBatch:
        """Views (and masked-patch masks) of one worker's slots."""
        indices = self.sample_indices(iteration)
        first = rank * self.local_batch
        slots = range(first, first + self.local_batch)
        per_sample_views = []
        mask_indices: list[list[torch.Tensor]] = []
        grid = self.config.crops.global_crops_size // self.config.vit_config.patch_size
        for slot in slots:
            sample = self.samples[indices[slot]]
            seed = view_seed(self.config.train.seed, iteration, slot)
            rng = make_generator(seed)
            viewset = make_views(
                sample.image.pixels, self.crop_config, self.policy, sample.roi, rng, rng_seed=seed
            )
            per_sample_views.append(viewset)
            # Masks continue the per-sample stream after the views
            if self.config.variant == "dinov2":
                mask_indices.append(
                    [sample_ibot_mask(rng, grid * grid, self.ibot_config) for _ in viewset.global_views]
                )
        global_views = [
            self._prepare([viewset.global_views[v] for viewset in per_sample_views])
            for v in range(self.crop_config.global_crops_number)
        ]
        local_count = len(per_sample_views[0].student_local_views)
        local_views = [
            self._prepare([viewset.student_local_views[v] for viewset in per_sample_views])
            for v in range(local_count)
        ]
        masks = None
        if mask_indices:
            masks = [
                mask_from_indices([per_image[v] for per_image in mask_indices], grid * grid)
                for v in range(len(global_views))
            ]
        return ViewBatch(global_views, local_views, masks)

    # Loss

    def compute_loss(self, model: DinoModel, batch: ViewBatch, iteration: int) -> StepOutput:
        """Forward the teacher on globals and the student on every view."""
        num_global = len(batch.global_views)
        globals_ = torch.cat(batch.global_views)
        with torch.no_grad():
            teacher_out = self.teacher.backbone(globals_)
            teacher_logits = self.teacher.dino_head(teacher_out.cls)
        masks = torch.cat(batch.masks) if batch.masks is not None else None
        student_out = model.backbone(globals_, masks)
        student_logits = list(model.dino_head(student_out.cls).chunk(num_global))
        if batch.local_views:
            local_out = model.backbone(torch.cat(batch.local_views))
            student_logits += list(model.dino_head(local_out.cls).chunk(len(batch.local_views)))
        breakdown = dino_loss(
            list(teacher_logits.chunk(num_global)),
            student_logits,
            self.dino_state,
            iteration,
            num_global=num_global,
            dino_weight=self.config.dino_head.loss_weight,
        )
        stats = {
            "teacher_logit_mean": teacher_logits.mean(dim=0),
            "teacher_prob_mean": teacher_probs(teacher_logits, self.dino_state, iteration).mean(dim=0),
        }
        if masks is None:
            breakdown = breakdown.with_ibot(breakdown.ibot, 0.0)
        else:
            with torch.no_grad():
                teacher_patch = self.teacher.patch_head(teacher_out.patch_tokens)
            student_patch = model.patch_head(student_out.patch_tokens)
            ibot = batched_ibot_loss(teacher_patch, student_patch, masks, self.ibot_state, iteration)
            breakdown = breakdown.with_ibot(ibot, self.config.ibot.loss_weight)
            stats["ibot_logit_mean"] = teacher_patch.mean(dim=(0, 1))
        return StepOutput(breakdown, stats)

    # Step

    def _frozen_names(self, iteration: int) -> set[str]:
        if iteration >= self.config.train.freeze_last_layer:
            return set()
        return {name for name in trainable_parameters(self.student) if LAST_LAYER_MARKER in f".{name}"}

    def _worker_step(self, rank: int, iteration: int) -> dict[str, torch.Tensor]:
        model = self.replicas[rank]
        model.train()
        output = self.compute_loss(model, self.make_batch(rank, iteration), iteration)
        breakdown = output.breakdown
        if not bool(torch.isfinite(breakdown.total)):
            raise TrainingError(
                f"Non-finite loss at iteration {iteration} on worker {rank}: {breakdown.as_floats()}."
            )
        frozen = self._frozen_names(iteration)
        grads = backward(model, breakdown.total)
        payload = {f"grad.{name}": grad for name, grad in grads.items() if name not in frozen}
        payload |= {f"stat.{name}": value.detach() for name, value in output.stats.items()}
        payload |= {f"loss.{name}": torch.tensor(value) for name, value in breakdown.as_floats().items()}
        reduced = self.reducer.all_reduce(rank, payload)

        schedules = Schedules.at(iteration, self.schedule_params)
        params = trainable_parameters(model)
        for name, param in params.items():
            param.grad = reduced.get(f"grad.{name}")
        with_grad = [param for param in params.values() if param.grad is not None]
        if self.config.train.clip_grad > 0 and with_grad:
            torch.nn.utils.clip_grad_norm_(with_grad, self.config.train.clip_grad)
        if self.shards is not None:
            for name, param in params.items():
                if self.shards.owner[name] != rank:
                    param.grad = None
        optimizer = self.optimizers[rank]
        for group in optimizer.param_groups:
            group["lr"] = schedules.lr
            group["weight_decay"] = schedules.weight_decay if group["apply_decay"] else 0.0
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
        if self.shards is not None:
            owned = {name: params[name].detach() for name in self.shards.owned_by[rank]}
            updated = self.reducer.gather_owned(rank, owned)
            with torch.no_grad():
                for name, value in updated.items():
                    params[name].copy_(value)
        return reduced

    def _after_step(self, iteration: int, reduced: dict[str, torch.Tensor]) -> None:
        """Leader-only updates: EMA teacher and centers."""
        momentum = Schedules.at(iteration, self.schedule_params).teacher_momentum
        ema_update(self.teacher, self.student, momentum)
        self.dino_state = update_center_from_mean(self.dino_state, reduced["stat.teacher_logit_mean"])
        if "stat.ibot_logit_mean" in reduced:
            self.ibot_state = update_center_from_mean(self.ibot_state, reduced["stat.ibot_logit_mean"])

    def _record(self, iteration: int, reduced: dict[str, torch.Tensor]) -> IterationRecord:
        schedules = Schedules.at(iteration, self.schedule_params)
        used, total = self.memory_probe()
        entropy = float("nan")
        if "stat.teacher_prob_mean" in reduced:
            entropy = batch_mean_entropy(reduced["stat.teacher_prob_mean"].unsqueeze(0))
        return IterationRecord(
            iteration=iteration,
            max_iterations=self.config.train.max_iterations,
            total=float(reduced["loss.total"]),
            local_dino=float(reduced["loss.local_dino"]),
            global_dino=float(reduced["loss.global_dino"]),
            ibot=float(reduced["loss.ibot"]),
            lr=schedules.lr,
            weight_decay=schedules.weight_decay,
            teacher_momentum=schedules.teacher_momentum,
            teacher_temp=schedules.teacher_temp,
            batch_size=self.local_batch,
            worker_id=LEADER_RANK,
            memory_used=used,
            memory_total=total,
            entropy=entropy,
        )

    def _leader(self, iteration: int, reduced: dict[str, torch.Tensor]) -> None:
        self._after_step(iteration, reduced)
        record = self._record(iteration, reduced)
        self.history.append(record)
        if record.entropy < collapse_threshold(self.dino_state.out_dim):
            self.logger.warning(
                "Teacher entropy %.4f fell below %.4f at iteration %s; outputs may be collapsing.",
                record.entropy,
                collapse_threshold(self.dino_state.out_dim),
                iteration,
            )
        last = iteration + 1 == self.config.train.max_iterations
        if iteration % self.config.train.log_freq == 0 or last:
            self.logger.info(format_log_line(record), extra={"extra_fields": record.as_dict()})
        self.iteration = iteration + 1
        if self.layout is not None and (self.iteration % self.config.train.saveckp_freq == 0 or last):
            self.save_checkpoint(self.layout.checkpoint_dir(self.iteration))

    def _worker_loop(self, rank: int, start: int, stop: int) -> None:
        try:
            for iteration in range(start, stop):
                reduced = self._worker_step(rank, iteration)
                self.reducer.barrier()
                if rank == LEADER_RANK:
                    self._leader(iteration, reduced)
                self.reducer.barrier()
        except BaseException:
            self.reducer.abort()
            raise

    def write_samples(self) -> list[Path]:
        """Write the views of the first sample of the first batch into samples/."""
        if self.layout is None:
            return []
        sample = self.samples[self.sample_indices(self.iteration)[0]]
        seed = view_seed(self.config.train.seed, self.iteration, 0)
        viewset = make_views_seeded(sample.image.pixels, self.crop_config, self.policy, sample.roi, seed)
        return save_view_samples(viewset, self.layout.samples, prefix=f"iter_{self.iteration:06d}")

    def fit(self, max_iterations: int | None = None) -> list[IterationRecord]:
        """Train from the current iteration up to `max_iterations` (default: the configured T)."""
        stop = self.config.train.max_iterations if max_iterations is None else max_iterations
        if not self.iteration <= stop <= self.config.train.max_iterations:
            raise ValueError(f"Cannot train from iteration {self.iteration} to {stop}.")
        handlers = attach_run_handlers(self.logger, self.layout.logs) if self.layout is not None else []
        try:
            if self.config.train.generate_samples:
                self.write_samples()
            start = self.iteration
            self.logger.info(
                "Training %s (%s, %s) from iteration %s to %s with %s %s worker(s).",
                self.config.train.model_name,
                self.config.train.model_type,
                self.config.variant,
                start,
                stop,
                self.workers,
                self.accel.distribution.type,
            )
            if self.workers == 1:
                self._worker_loop(0, start, stop)
            else:
                with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="dino-worker") as pool:
                    futures = [pool.submit(self._worker_loop, rank, start, stop) for rank in range(self.workers)]
                errors = [err for future in futures if (err := future.exception()) is not None]
                if errors:
                    # The failing worker carries the cause, its peers only report the desync
                    raise next((err for err in errors if "desync" not in str(err)), errors[0])
        finally:
            detach_handlers(self.logger, handlers)
        return self.history

    # Checkpoints

    def checkpoint_tensors(self) -> dict[str, torch.Tensor]:
        """Every tensor a resumed run needs."""
        tensors: dict[str, torch.Tensor] = {}
        tensors |= {f"student.{name}": value for name, value in self.student.state_dict().items()}
        tensors |= {f"teacher.{name}": value for name, value in self.teacher.state_dict().items()}
        replica_params = [trainable_parameters(replica) for replica in self.replicas]
        for name in replica_params[0]:
            owner = self.shards.owner[name] if self.shards is not None else 0
            state = self.optimizers[owner].state.get(replica_params[owner][name], {})
            for key in ("exp_avg", "exp_avg_sq", "step"):
                if key in state:
                    tensors[f"optimizer.{name}.{key}"] = torch.as_tensor(state[key], dtype=torch.float32)
        tensors["center.dino"] = self.dino_state.center
        tensors["center.ibot"] = self.ibot_state.center
        tensors["rng.torch"] = torch.get_rng_state().to(torch.float32)
        return tensors

    def checkpoint_meta(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "seed": self.config.train.seed,
            "workers": self.workers,
            "distribution": self.accel.distribution.type,
            "snapshot": self.config.structural_snapshot(),
            "config": yaml.safe_load(dump_train_config(self.config)),
        }

    @retry(retries=2, retry_delay=1, exception_type=OSError)
    def save_checkpoint(self, directory: Path) -> Path:
        """Write state.dmxt and meta.yaml into `directory`, replacing it atomically."""
        directory.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{directory.name}-", dir=directory.parent))
        try:
            write_tensors(staging / STATE_FILE, self.checkpoint_tensors())
            (staging / META_FILE).write_text(
                yaml.safe_dump(self.checkpoint_meta(), sort_keys=False), encoding="utf-8"
            )
            if directory.exists():
                shutil.rmtree(directory)
            staging.rename(directory)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        self.logger.info("Saved checkpoint %s.", directory)
        return directory

    def _load_model_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for replica in self.replicas:
            load_matching(replica, tensors, "student.")
        load_matching(self.teacher, tensors, "teacher.")

    def resume(self, directory: Path) -> int:
        """Restore a bundle written by `save_checkpoint`; returns the next iteration."""
        state_path, meta_path = directory / STATE_FILE, directory / META_FILE
        if not state_path.is_file() or not meta_path.is_file():
            raise CheckpointError(f"{directory} is not a complete checkpoint bundle.")
        try:
            tensors = read_tensors(state_path)
            meta = yaml.safe_load(meta_path.read_text(encoding="utf-8"))
        except (FormatError, yaml.YAMLError) as err:
            raise CheckpointError(f"{directory} is corrupt: {err}") from err
        snapshot = self.config.structural_snapshot()
        saved = meta.get("snapshot", {}) if isinstance(meta, dict) else {}
        changed = sorted(key for key in snapshot.keys() | saved.keys() if snapshot.get(key) != saved.get(key))
        if changed:
            raise CheckpointError(f"Config differs from the checkpoint in: {', '.join(changed)}.")
        try:
            self._load_model_tensors(tensors)
        except (KeyError, ValueError) as err:
            raise CheckpointError(f"{directory}: {err}") from err
        for rank, (replica, optimizer) in enumerate(zip(self.replicas, self.optimizers, strict=True)):
            for name, param in trainable_parameters(replica).items():
                if self.shards is not None and self.shards.owner[name] != rank:
                    continue
                if f"optimizer.{name}.step" not in tensors:
                    continue
                optimizer.state[param] = {
                    "step": tensors[f"optimizer.{name}.step"].clone(),
                    "exp_avg": tensors[f"optimizer.{name}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"optimizer.{name}.exp_avg_sq"].clone(),
                }
        self.dino_state = replace(self.dino_state, center=tensors["center.dino"])
        self.ibot_state = replace(self.ibot_state, center=tensors["center.ibot"])
        torch.set_rng_state(tensors["rng.torch"].to(torch.uint8))
        self.iteration = int(meta["iteration"])
        if self.iteration > self.config.train.max_iterations:
            raise CheckpointError(f"Checkpoint iteration {self.iteration} exceeds max_iterations.")
        self.logger.info("Resumed from %s at iteration %s.", directory, self.iteration)
        return self.iteration
