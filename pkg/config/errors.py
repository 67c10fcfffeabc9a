"""
Exception tree shared by every MDiFF module.
"""


class MDiFFError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 3


class ConfigError(MDiFFError):
    """Invalid configuration or command-line usage."""

    exit_code = 2


class DataError(MDiFFError):
    """Dataset cannot be built (empty split, missing tables, bad generator config)."""

    exit_code = 2


class ScheduleError(MDiFFError):
    """Noise schedule violates its invariants or a step index is out of range."""


class ShapeError(MDiFFError):
    """Tensor or vector dimensions disagree with the configured contract."""


class DivergenceError(MDiFFError):
    """A loss, activation or kernel became non-finite."""


class CheckpointError(MDiFFError):
    """Checkpoint missing, corrupt, or not bound to the expected diffusion model."""


class MetricError(MDiFFError):
    """Metric is undefined for the given inputs (e.g. WAPE with zero actuals)."""


class ReportError(MDiFFError):
    """Report output could not be written."""
