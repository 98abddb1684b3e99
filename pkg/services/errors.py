# =============================================================
# ImpactLens - Exceptions
# Every stage raises a subclass of ImpactLensError so the CLI
# can report which stage failed.
# =============================================================

from __future__ import annotations


class ImpactLensError(ValueError):
    """Base error. `stage` names the pipeline stage that raised it."""

    stage = "impactlens"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"[{self.stage}] {self.message}"


class IngestionError(ImpactLensError):
    stage = "ingest"


class DesignError(ImpactLensError):
    stage = "design"

    def __init__(self, message: str, collinear_columns: list[str] | None = None):
        super().__init__(message)
        self.collinear_columns = list(collinear_columns or [])


class EstimationError(ImpactLensError):
    stage = "estimate"


class SelectionError(ImpactLensError):
    stage = "select"

    def __init__(self, message: str, fold: int | None = None):
        super().__init__(message)
        self.fold = fold


class ForecastError(ImpactLensError):
    stage = "forecast"


class EffectError(ImpactLensError):
    stage = "effects"


class ClassifierEvalError(ImpactLensError):
    stage = "classify-eval"


class DescriptivesError(ImpactLensError):
    stage = "describe"


class SynthConfigError(ImpactLensError):
    stage = "simulate"


class ConfigError(ImpactLensError):
    stage = "config"
