"""Exception types raised across the package.

The CLI maps `ConfigError` to exit status 2 and every other `DinoDeskError` to exit status 3.
"""

from __future__ import annotations


class DinoDeskError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigError(DinoDeskError, ValueError):
    """A configuration file or command line is invalid."""


class FormatError(DinoDeskError, ValueError):
    """A file on disk does not match the format it claims to have."""


class PolicyError(DinoDeskError, ValueError):
    """An augmentation primitive is disabled by the active policy."""


class CheckpointError(DinoDeskError):
    """A checkpoint bundle is incomplete or does not match the current run."""


class TrainingError(DinoDeskError, RuntimeError):
    """Training cannot continue (non-finite loss, worker desync, mutated teacher)."""
