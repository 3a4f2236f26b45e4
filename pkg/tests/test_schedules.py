"""Tests for the per-iteration schedules."""

from __future__ import annotations

import math

import pytest
import torch

from dino_desk import losses
from dino_desk.losses import DinoLossState
from dino_desk.schedules import (
    ScheduleParams,
    Schedules,
    linear_warmup,
    lr_at,
    teacher_momentum_at,
    teacher_temp_at,
    weight_decay_at,
)

# Values of a 2000-iteration run with a 1000-iteration warmup
LONG_RUN = ScheduleParams(max_iterations=2000, lr=1e-4, min_lr=1e-6, warmup_iterations=1000)


def test_logged_values_at_iteration_16() -> None:
    schedules = Schedules.at(16, LONG_RUN)

    assert f"{schedules.lr:.6f}" == "0.000002"
    assert f"{schedules.weight_decay:.6f}" == "0.040057"
    assert f"{schedules.teacher_momentum:.6f}" == "0.996001"
    assert schedules.lr == pytest.approx(1.6e-6)


def test_lr_warmup_and_cosine() -> None:
    assert lr_at(0, LONG_RUN) == 0.0
    assert lr_at(500, LONG_RUN) == pytest.approx(5e-5)
    assert lr_at(1000, LONG_RUN) == pytest.approx(1e-4)
    last = lr_at(1999, LONG_RUN)
    assert last == pytest.approx(1e-6 + (1e-4 - 1e-6) * (math.cos(math.pi * 999 / 1000) + 1) / 2)
    assert last == pytest.approx(1e-6, abs=1e-9)
    values = [lr_at(t, LONG_RUN) for t in range(1000, 2000)]
    assert all(a >= b for a, b in zip(values, values[1:], strict=False))


def test_lr_without_warmup_starts_at_peak() -> None:
    params = ScheduleParams(max_iterations=10, lr=1e-3, min_lr=1e-5)
    assert lr_at(0, params) == pytest.approx(1e-3)


def test_weight_decay_ramp() -> None:
    assert weight_decay_at(0, LONG_RUN) == pytest.approx(0.04)
    assert weight_decay_at(1000, LONG_RUN) == pytest.approx(0.22)
    assert weight_decay_at(1999, LONG_RUN) == pytest.approx(0.4, abs=1e-5)


def test_teacher_momentum_is_nondecreasing() -> None:
    values = [teacher_momentum_at(t, LONG_RUN) for t in range(2000)]
    assert values[0] == pytest.approx(0.996)
    assert all(a <= b for a, b in zip(values, values[1:], strict=False))
    assert values[-1] < 1.0


def test_teacher_temp() -> None:
    params = ScheduleParams(
        max_iterations=1000, warmup_teacher_temp=0.02, teacher_temp=0.04, warmup_teacher_temp_iterations=500
    )
    assert teacher_temp_at(0, params) == pytest.approx(0.02)
    assert teacher_temp_at(250, params) == pytest.approx(0.03)
    assert teacher_temp_at(500, params) == 0.04
    assert teacher_temp_at(999, params) == 0.04
    assert all(teacher_temp_at(t, LONG_RUN) == 0.04 for t in (0, 16, 1999))


def test_linear_warmup_drives_both_temperature_schedules() -> None:
    assert linear_warmup(0, 0.02, 0.04, 0) == 0.04
    assert linear_warmup(5, 0.0, 1.0, 10) == 0.5
    params = ScheduleParams(
        max_iterations=1000, warmup_teacher_temp=0.02, teacher_temp=0.07, warmup_teacher_temp_iterations=300
    )
    state = DinoLossState(center=torch.zeros(4), warmup_teacher_temp=0.02, teacher_temp=0.07, warmup_iterations=300)
    for t in (0, 1, 150, 299, 300, 999):
        assert losses.teacher_temp_at(t, state) == teacher_temp_at(t, params)


@pytest.mark.parametrize("function", [lr_at, weight_decay_at, teacher_momentum_at, teacher_temp_at])
@pytest.mark.parametrize("t", [-1, 2000])
def test_schedules_reject_out_of_range(function: object, t: int) -> None:
    with pytest.raises(ValueError, match="outside"):
        function(t, LONG_RUN)  # type: ignore[operator]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"max_iterations": 0},
        {"max_iterations": 10, "lr": 1e-5, "min_lr": 1e-4},
        {"max_iterations": 10, "warmup_iterations": 10},
        {"max_iterations": 10, "momentum_teacher": 1.0},
    ],
)
def test_schedule_params_validation(kwargs: dict[str, float]) -> None:
    with pytest.raises(ValueError):
        ScheduleParams(**kwargs)  # type: ignore[arg-type]
