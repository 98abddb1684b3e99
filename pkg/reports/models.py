# =============================================================
# ImpactLens - Report Models
# Pydantic schemas for every JSON file in a report bundle
# =============================================================

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


# ------------------------------------------------------------------ #
# Ingestion
# ------------------------------------------------------------------ #

class RowIssue(BaseModel):
    row: int
    reason: str
    detail: str


class IngestionSummary(BaseModel):
    source: str
    rows_read: int
    accepted: int
    rejected: dict[str, int] = Field(default_factory=dict, description="Rejected rows by reason")
    duplicates: int = Field(default=0, description="Exact duplicate rows (kept)")
    errors: list[RowIssue] = Field(default_factory=list)


class PanelSummary(BaseModel):
    start_date: str
    end_date: str
    n_days: int
    series: list[str]
    totals: dict[str, int]
    excluded: dict[str, int] = Field(default_factory=dict)


# ------------------------------------------------------------------ #
# Model fit / selection
# ------------------------------------------------------------------ #

class EquationSummary(BaseModel):
    series: str
    r_squared: float | None = Field(description="SUR fit, log scale; None for a constant series")
    ols_r_squared: float | None = Field(description="Per-equation least squares, log scale")


class FitSummary(BaseModel):
    spec: str
    first_date: str
    last_date: str
    n_rows: int
    n_columns: list[int]
    fell_back: bool = Field(description="True when Sigma was singular and OLS was used")
    equations: list[EquationSummary]


class LagSelectionSummary(BaseModel):
    which: str
    lag: int
    truncated: bool
    mae_path: dict[int, float]


class SelectionSummary(BaseModel):
    chosen_spec: str
    sales: LagSelectionSummary
    license: LagSelectionSummary


# ------------------------------------------------------------------ #
# Effects
# ------------------------------------------------------------------ #

class EffectRow(BaseModel):
    series: str
    window: str
    start_offset: int
    end_offset: int
    observed_cum: float
    predicted_cum: float
    abs_diff: float
    pct_diff: float | None
    ci_low: float
    ci_high: float
    level: float
    significant: bool


class BreakevenRow(BaseModel):
    series: str
    weeks: float | None = Field(description="None means the deficit never offsets the surplus")
    rounded_weeks: int | None


class HoldoutRow(BaseModel):
    series: str
    mean_daily_pct_error: float | None
    cumulative_pct_error: float | None
    zero_days_excluded: int


class HoldoutSummary(BaseModel):
    cutoff: str
    horizon: int
    pooled_cumulative_pct_error: float | None
    series: list[HoldoutRow]


class EffectsReport(BaseModel):
    cutoff: str
    replicates: int
    level: float
    effects: list[EffectRow]
    breakeven: list[BreakevenRow] = Field(default_factory=list)
    holdout: HoldoutSummary | None = None


# ------------------------------------------------------------------ #
# Classifier evaluation
# ------------------------------------------------------------------ #

class ClassifierSummary(BaseModel):
    n_items: int
    matrices: list[dict[str, Any]]


# ------------------------------------------------------------------ #
# Run manifest
# ------------------------------------------------------------------ #

class InputFile(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    """No wall-clock fields: identical inputs give an identical manifest."""
    command: str
    seed: int
    inputs: list[InputFile] = Field(default_factory=list)
    config: dict[str, Any] = Field(default_factory=dict)
    packages: dict[str, str] = Field(default_factory=dict)
    files: list[str] = Field(default_factory=list)
