"""Exception types raised across the workbench.

All of them derive from built-in exceptions so callers that only know about
ValueError/RuntimeError keep working.
"""

from typing import Dict, Optional


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class ShapeMismatchError(ValueError):
    """Tensor extents do not agree with the probe, model or another tensor."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class StageError(RuntimeError):
    """A pipeline stage failed; earlier outputs are left on disk."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, step: int, diagnostics: Optional[Dict[str, float]] = None):
        self.epoch = epoch
        self.step = step
        self.diagnostics = diagnostics or {}
        details = ", ".join(f"{k}={v:.3e}" for k, v in sorted(self.diagnostics.items()))
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}" + (f" ({details})" if details else ""))
