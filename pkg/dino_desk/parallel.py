"""In-process data parallelism: deterministic all-reduce between worker threads and shard layouts.

Workers are threads of one process. The reducer is the seam where a network transport would
replace the shared-memory slots.
"""

from __future__ import annotations

import threading
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Final

import torch

from dino_desk.errors import TrainingError

DEFAULT_TIMEOUT: Final = 300.0

type Payload = Mapping[str, torch.Tensor]


def all_reduce_mean(worker_payloads: Sequence[Payload]) -> dict[str, torch.Tensor]:
    """Arithmetic mean of every named tensor, summed serially in worker-index order."""
    if not worker_payloads:
        raise ValueError("all_reduce_mean needs at least one worker.")
    names = list(worker_payloads[0])
    for rank, payload in enumerate(worker_payloads[1:], start=1):
        if list(payload) != names:
            raise ValueError(f"Worker {rank} contributed a different tensor set.")
    reduced = {}
    for name in names:
        total = worker_payloads[0][name].clone()
        for rank, payload in enumerate(worker_payloads[1:], start=1):
            tensor = payload[name]
            if tensor.shape != total.shape:
                raise ValueError(
                    f"Worker {rank} sent {name} with shape {list(tensor.shape)}, expected {list(total.shape)}."
                )
            total += tensor
        reduced[name] = total / len(worker_payloads)
    return reduced


class ThreadReducer:
    """Barrier-synchronised collectives between `world_size` worker threads.

    Every collective is entered by all ranks. A worker that fails calls `abort`, which breaks
    the barrier and turns every pending or later wait into a TrainingError.
    """

    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT) -> None:
        """Create the shared slots and the barrier."""
        if world_size < 1:
            raise ValueError("world_size must be at least 1.")
        self.world_size = world_size
        self._barrier = threading.Barrier(world_size, timeout=timeout)
        self._slots: list[Payload | None] = [None] * world_size
        self._result: dict[str, torch.Tensor] = {}

    def _wait(self) -> None:
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError as err:
            raise TrainingError("Worker desync: a peer failed or timed out.") from err

    def _collect(self) -> list[Payload]:
        if any(slot is None for slot in self._slots):
            raise TrainingError("Worker desync: missing contribution.")
        return [slot for slot in self._slots if slot is not None]

    def barrier(self) -> None:
        self._wait()

    def abort(self) -> None:
        self._barrier.abort()

    def all_reduce(self, rank: int, payload: Payload) -> dict[str, torch.Tensor]:
        """Return the worker mean of `payload`; every rank receives its own copy."""
        self._slots[rank] = payload
        self._wait()
        if rank == 0:
            self._result = all_reduce_mean(self._collect())
        self._wait()
        return {name: tensor.clone() for name, tensor in self._result.items()}

    def broadcast(self, rank: int, source: int, payload: Payload) -> dict[str, torch.Tensor]:
        """Return `payload` of `source` on every rank."""
        if rank == source:
            self._slots[rank] = payload
        self._wait()
        sent = self._slots[source]
        if sent is None:
            raise TrainingError(f"Worker desync: rank {source} did not broadcast.")
        result = {name: tensor.clone() for name, tensor in sent.items()}
        self._wait()
        return result

    def gather_owned(self, rank: int, owned: Payload) -> dict[str, torch.Tensor]:
        """Union of the tensors each rank owns, as seen by every rank."""
        self._slots[rank] = owned
        self._wait()
        merged = {}
        for slot in self._collect():
            merged.update({name: tensor.clone() for name, tensor in slot.items()})
        self._wait()
        return merged


@dataclass(frozen=True)
class ShardLayout:
    """Owner rank of every named tensor's optimizer state."""

    owner: dict[str, int]
    workers: int
    owned_by: tuple[tuple[str, ...], ...] = field(init=False)

    def __post_init__(self) -> None:
        owned: list[list[str]] = [[] for _ in range(self.workers)]
        for name, rank in self.owner.items():
            owned[rank].append(name)
        object.__setattr__(self, "owned_by", tuple(tuple(names) for names in owned))

    def check_covers(self, names: Sequence[str]) -> None:
        """Raise when a tensor has no owner."""
        orphans = [name for name in names if name not in self.owner]
        if orphans:
            raise TrainingError(f"Orphaned tensors without an owner: {orphans[:5]}.")


def shard_states(params: Mapping[str, torch.Tensor], workers: int) -> ShardLayout:
    """Assign tensors round-robin in size-descending order (ties keep name order)."""
    if workers < 1:
        raise ValueError("Need at least one worker to shard over.")
    order = sorted(enumerate(params.items()), key=lambda item: (-item[1][1].numel(), item[0]))
    owner = {name: slot % workers for slot, (_, (name, _)) in enumerate(order)}
    layout = ShardLayout(owner=owner, workers=workers)
    layout.check_covers(list(params))
    return layout
