"""Run directory layout: checkpoints/, samples/, results/ and logs/ under one root."""

from __future__ import annotations

import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Final

from dino_desk.errors import ConfigError

SUBDIRECTORIES: Final = ("checkpoints", "samples", "results", "logs")


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def results(self) -> Path:
        return self.root / "results"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    def checkpoint_dir(self, iteration: int) -> Path:
        return self.checkpoints / f"iter_{iteration:06d}"

    def is_complete(self) -> bool:
        return all((self.root / name).is_dir() for name in SUBDIRECTORIES)


def create_run_layout(root: Path, *, force: bool = False) -> RunLayout:
    """Create the run tree in a sibling temporary directory and move it into place.

    An existing non-empty root is only replaced with `force`.
    """
    root = root.resolve()
    if root.exists() and any(root.iterdir()):
        if not force:
            raise ConfigError(f"Run directory {root} already exists; pass --force or --resume-from.")
        shutil.rmtree(root)
    elif root.exists():
        root.rmdir()
    root.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{root.name}-", dir=root.parent))
    try:
        for name in SUBDIRECTORIES:
            (staging / name).mkdir()
        staging.rename(root)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return RunLayout(root)


def open_run_layout(root: Path) -> RunLayout:
    """Reuse an existing run tree (resuming), creating any missing subdirectory."""
    layout = RunLayout(root.resolve())
    for name in SUBDIRECTORIES:
        (layout.root / name).mkdir(parents=True, exist_ok=True)
    return layout
