"""Per-iteration schedules: learning rate, weight decay, teacher momentum and temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleParams:
    """Constants every schedule is computed from."""

    max_iterations: int
    lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_iterations: int = 0
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    momentum_teacher: float = 0.996
    warmup_teacher_temp: float = 0.04
    teacher_temp: float = 0.04
    warmup_teacher_temp_iterations: int = 0

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive.")
        if not 0 < self.min_lr <= self.lr:
            raise ValueError(f"Need 0 < min_lr <= lr, got min_lr={self.min_lr}, lr={self.lr}.")
        if not 0 <= self.warmup_iterations < self.max_iterations:
            raise ValueError("warmup_iterations must be below max_iterations.")
        if not 0 < self.momentum_teacher < 1:
            raise ValueError("momentum_teacher must be in (0, 1).")


def _check(t: int, params: ScheduleParams) -> None:
    if not 0 <= t < params.max_iterations:
        raise ValueError(f"Iteration {t} outside [0, {params.max_iterations}).")


def _cosine(t: float, span: float) -> float:
    """(cos(pi * t / span) + 1) / 2, falling from 1 to 0."""
    return (math.cos(math.pi * t / span) + 1) / 2


def linear_warmup(t: int, start: float, final: float, warmup: int) -> float:
    """Linear ramp from `start` to `final` over `warmup` iterations, then `final`."""
    if t >= warmup:
        return final
    return start + (final - start) * t / warmup


def lr_at(t: int, params: ScheduleParams) -> float:
    """Linear warmup from 0 to lr, then cosine decay to min_lr."""
    _check(t, params)
    warmup = params.warmup_iterations
    if t < warmup:
        return params.lr * t / warmup
    span = params.max_iterations - warmup
    return params.min_lr + (params.lr - params.min_lr) * _cosine(t - warmup, span)


def weight_decay_at(t: int, params: ScheduleParams) -> float:
    """Cosine ramp from weight_decay to weight_decay_end."""
    _check(t, params)
    start, end = params.weight_decay, params.weight_decay_end
    return end + (start - end) * _cosine(t, params.max_iterations)


def teacher_momentum_at(t: int, params: ScheduleParams) -> float:
    """Cosine ramp of the EMA momentum from m_0 towards 1."""
    _check(t, params)
    return 1 - (1 - params.momentum_teacher) * _cosine(t, params.max_iterations)


def teacher_temp_at(t: int, params: ScheduleParams) -> float:
    """Linear warmup of the teacher temperature, then constant."""
    _check(t, params)
    return linear_warmup(t, params.warmup_teacher_temp, params.teacher_temp, params.warmup_teacher_temp_iterations)


@dataclass(frozen=True)
class Schedules:
    """All schedule values of one iteration."""

    lr: float
    weight_decay: float
    teacher_momentum: float
    teacher_temp: float

    @classmethod
    def at(cls, t: int, params: ScheduleParams) -> Schedules:
        return cls(
            lr=lr_at(t, params),
            weight_decay=weight_decay_at(t, params),
            teacher_momentum=teacher_momentum_at(t, params),
            teacher_temp=teacher_temp_at(t, params),
        )
