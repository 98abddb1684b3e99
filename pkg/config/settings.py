# =============================================================
# ImpactLens - Configuration
# Run settings come from a dotenv-style KEY=VALUE file, then
# IMPACTLENS_* environment variables, then command-line flags
# (later sources win).
# =============================================================

from __future__ import annotations

import os
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Mapping

from dotenv import dotenv_values

from services.design_builder import ModelSpec
from services.effect_service import PRESET_WINDOWS, EffectWindow
from services.errors import ConfigError

ENV_PREFIX = "IMPACTLENS_"

_TIME_EFFECT_FLAGS = {
    "dow": "use_day_of_week",
    "hol": "use_holiday",
    "woy": "use_week_of_year",
    "doy": "use_day_of_year",
    "lin": "use_linear_trend",
    "quad": "use_quadratic_trend",
}


@dataclass(frozen=True)
class PathsConfig:
    transactions: str | None
    licenses: str | None
    holidays: str | None
    labels: str | None
    covariates: tuple[str, ...]
    synth_config: str | None
    output_dir: str


@dataclass(frozen=True)
class ModelConfig:
    sales_lags: int
    license_lags: int
    time_effects: tuple[str, ...]     # subset of dow, hol, woy, doy, lin, quad
    auto_select: bool
    max_sales_lag: int
    max_license_lag: int
    cv_folds: int

    def spec(self, holiday_dates: frozenset[date] | None = None) -> ModelSpec:
        flags = {attr: key in self.time_effects for key, attr in _TIME_EFFECT_FLAGS.items()}
        try:
            return ModelSpec(
                sales_lags=self.sales_lags,
                license_lags=self.license_lags,
                holiday_dates=holiday_dates,
                **flags,
            )
        except ValueError as e:
            raise ConfigError(f"invalid model settings: {e}") from e


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int
    confidence: float
    workers: int


@dataclass(frozen=True)
class DescribeConfig:
    spike_start: date | None
    spike_end: date | None
    ratio_year_from: int | None
    ratio_year_to: int | None
    ratio_coverage: float


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig
    model: ModelConfig
    bootstrap: BootstrapConfig
    describe: DescribeConfig
    study_start: date | None
    study_end: date | None
    cutoff: date | None
    horizon: int
    windows: tuple[EffectWindow, ...]
    holdout_cutoff: date | None
    holdout_horizon: int
    seed: int

    def as_dict(self) -> dict:
        """Plain values for the run manifest."""
        return {
            "paths": {**vars(self.paths), "covariates": list(self.paths.covariates)},
            "model": {**vars(self.model), "time_effects": list(self.model.time_effects)},
            "bootstrap": vars(self.bootstrap),
            "describe": {k: _plain(v) for k, v in vars(self.describe).items()},
            "study_start": _plain(self.study_start),
            "study_end": _plain(self.study_end),
            "cutoff": _plain(self.cutoff),
            "horizon": self.horizon,
            "windows": [f"{w.label}:{w.start_offset}-{w.end_offset}" for w in self.windows],
            "holdout_cutoff": _plain(self.holdout_cutoff),
            "holdout_horizon": self.holdout_horizon,
            "seed": self.seed,
        }


def _plain(value):
    return value.isoformat() if isinstance(value, date) else value


# ------------------------------------------------------------------ #
# Parsing helpers
# ------------------------------------------------------------------ #

class _Source:
    def __init__(self, values: Mapping[str, str | None]):
        self._values = {k: v for k, v in values.items() if v not in (None, "")}

    def text(self, key: str, default: str | None = None) -> str | None:
        return self._values.get(key, default)

    def integer(self, key: str, default: int, minimum: int | None = None) -> int:
        raw = self._values.get(key)
        try:
            value = default if raw is None else int(raw)
        except ValueError:
            raise ConfigError(f"{ENV_PREFIX}{key} must be an integer, got {raw!r}") from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"{ENV_PREFIX}{key} must be >= {minimum}, got {value}")
        return value

    def optional_integer(self, key: str) -> int | None:
        return None if key not in self._values else self.integer(key, 0)

    def real(self, key: str, default: float) -> float:
        raw = self._values.get(key)
        try:
            return default if raw is None else float(raw)
        except ValueError:
            raise ConfigError(f"{ENV_PREFIX}{key} must be a number, got {raw!r}") from None

    def day(self, key: str) -> date | None:
        raw = self._values.get(key)
        if raw is None:
            return None
        try:
            return date.fromisoformat(raw.strip())
        except ValueError:
            raise ConfigError(f"{ENV_PREFIX}{key} must be an ISO date, got {raw!r}") from None

    def flag(self, key: str, default: bool) -> bool:
        raw = self._values.get(key)
        if raw is None:
            return default
        if raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{ENV_PREFIX}{key} must be true/false, got {raw!r}")


def _windows(raw: str | None) -> tuple[EffectWindow, ...]:
    if raw is None:
        return PRESET_WINDOWS
    try:
        return tuple(EffectWindow.parse(part) for part in raw.split(",") if part.strip())
    except ValueError as e:
        raise ConfigError(f"{ENV_PREFIX}WINDOWS: {getattr(e, 'message', e)}") from None


def _time_effects(raw: str | None) -> tuple[str, ...]:
    if raw is None:
        return ("dow", "hol", "woy", "lin", "quad")
    keys = tuple(k.strip().lower() for k in raw.split(",") if k.strip())
    unknown = [k for k in keys if k not in _TIME_EFFECT_FLAGS]
    if unknown:
        raise ConfigError(f"{ENV_PREFIX}TIME_EFFECTS has unknown entries {unknown}")
    return keys


def _path_list(raw: str | None) -> tuple[str, ...]:
    if raw is None:
        return ()
    return tuple(part.strip() for part in raw.split(",") if part.strip())


# ------------------------------------------------------------------ #
# Loader
# ------------------------------------------------------------------ #

def load_config(
    env_file: str | None = None,
    overrides: Mapping[str, str | None] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """
    `overrides` use unprefixed keys (SEED, CUTOFF, ...) and win over
    the environment, which wins over `env_file`.
    """
    merged: dict[str, str | None] = {}
    if env_file:
        if not os.path.isfile(env_file):
            raise ConfigError(f"config file not found: {env_file}")
        for key, value in dotenv_values(env_file).items():
            merged[key.removeprefix(ENV_PREFIX)] = value
    env = os.environ if environ is None else environ
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            merged[key.removeprefix(ENV_PREFIX)] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = str(value)
    src = _Source(merged)

    windows = _windows(src.text("WINDOWS"))
    confidence = src.real("CONFIDENCE", 0.95)
    if not 0.0 < confidence < 1.0:
        raise ConfigError(f"{ENV_PREFIX}CONFIDENCE must lie in (0, 1), got {confidence}")
    coverage = src.real("RATIO_COVERAGE", 0.90)
    if not 0.0 < coverage <= 1.0:
        raise ConfigError(f"{ENV_PREFIX}RATIO_COVERAGE must lie in (0, 1], got {coverage}")
    needed = max((w.end_offset + 1 for w in windows), default=1)
    horizon = src.integer("HORIZON", needed, minimum=1)
    if horizon < needed:
        raise ConfigError(f"{ENV_PREFIX}HORIZON={horizon} is shorter than the last window ({needed} days)")

    cutoff = src.day("CUTOFF")
    holdout_cutoff = src.day("HOLDOUT_CUTOFF")
    holdout_horizon = src.integer("HOLDOUT_HORIZON", 10, minimum=1)
    # holdout days must all precede the intervention
    if cutoff and holdout_cutoff and holdout_cutoff + timedelta(days=holdout_horizon) > cutoff:
        raise ConfigError(
            f"{ENV_PREFIX}HOLDOUT_CUTOFF={holdout_cutoff} with HOLDOUT_HORIZON={holdout_horizon} "
            f"runs past CUTOFF={cutoff}"
        )

    return RunConfig(
        paths=PathsConfig(
            transactions=src.text("TRANSACTIONS_PATH"),
            licenses=src.text("LICENSES_PATH"),
            holidays=src.text("HOLIDAYS_PATH"),
            labels=src.text("LABELS_PATH"),
            covariates=_path_list(src.text("COVARIATES_PATH")),
            synth_config=src.text("SYNTH_CONFIG_PATH"),
            output_dir=src.text("OUTPUT_DIR", "impactlens-out"),
        ),
        model=ModelConfig(
            sales_lags=src.integer("SALES_LAGS", 28, minimum=0),
            license_lags=src.integer("LICENSE_LAGS", 10, minimum=0),
            time_effects=_time_effects(src.text("TIME_EFFECTS")),
            auto_select=src.flag("AUTO_SELECT", False),
            max_sales_lag=src.integer("MAX_SALES_LAG", 35, minimum=1),
            max_license_lag=src.integer("MAX_LICENSE_LAG", 15, minimum=1),
            cv_folds=src.integer("CV_FOLDS", 10, minimum=2),
        ),
        bootstrap=BootstrapConfig(
            replicates=src.integer("BOOTSTRAP_REPS", 1000, minimum=2),
            confidence=confidence,
            workers=src.integer("WORKERS", 1, minimum=1),
        ),
        describe=DescribeConfig(
            spike_start=src.day("SPIKE_START"),
            spike_end=src.day("SPIKE_END"),
            ratio_year_from=src.optional_integer("RATIO_YEAR_FROM"),
            ratio_year_to=src.optional_integer("RATIO_YEAR_TO"),
            ratio_coverage=coverage,
        ),
        study_start=src.day("STUDY_START"),
        study_end=src.day("STUDY_END"),
        cutoff=cutoff,
        horizon=horizon,
        windows=windows,
        holdout_cutoff=holdout_cutoff,
        holdout_horizon=holdout_horizon,
        seed=src.integer("SEED", 0),
    )
