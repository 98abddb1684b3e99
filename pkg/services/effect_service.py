# =============================================================
# ImpactLens - Effect Service
#
# Compares observed post-cutoff sales with the counterfactual
# forecast over day windows counted from the cutoff:
#   immediate  = days 0-4
#   short-run  = days 5-25
#   extended   = days 5-35
#
# Also: holdout validation before an intervention and the
# breakeven arithmetic between a surplus and a later deficit.
# =============================================================

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
import pandas as pd

from services.design_builder import CalendarBasis, ModelSpec, build_designs
from services.errors import EffectError, ImpactLensError
from services.forward_bootstrap import (
    DEFAULT_LEVEL,
    ExogenousFuture,
    ForecastResult,
    cumulative_draws,
    forecast_counterfactual,
    prediction_interval,
)
from services.panel_builder import DailyPanel
from services.sur_estimator import fit_sur

logger = logging.getLogger(__name__)

_WINDOW_RE = re.compile(r"^\s*([\w\- ]+)\s*:\s*(\d+)\s*-\s*(\d+)\s*$")


# ------------------------------------------------------------------ #
# Windows
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class EffectWindow:
    label: str
    start_offset: int
    end_offset: int

    def __post_init__(self):
        if not 0 <= self.start_offset <= self.end_offset:
            raise EffectError(
                f"window {self.label!r} needs 0 <= start <= end, got [{self.start_offset}, {self.end_offset}]"
            )

    @property
    def days(self) -> int:
        return self.end_offset - self.start_offset + 1

    def dates(self, cutoff: date) -> tuple[date, date]:
        return cutoff + timedelta(days=self.start_offset), cutoff + timedelta(days=self.end_offset)

    @classmethod
    def parse(cls, text: str) -> "EffectWindow":
        """'label:start-end', e.g. 'immediate:0-4'."""
        m = _WINDOW_RE.match(text)
        if not m:
            raise EffectError(f"cannot parse window {text!r}; expected label:start-end")
        return cls(m.group(1).strip(), int(m.group(2)), int(m.group(3)))


IMMEDIATE = EffectWindow("immediate", 0, 4)
SHORT_RUN = EffectWindow("short-run", 5, 25)
EXTENDED = EffectWindow("extended", 5, 35)
PRESET_WINDOWS = (IMMEDIATE, SHORT_RUN, EXTENDED)


# ------------------------------------------------------------------ #
# Effect estimates
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class EffectEstimate:
    window: EffectWindow
    series: str
    observed_cum: float
    predicted_cum: float
    abs_diff: float
    pct_diff: float | None
    ci_low: float
    ci_high: float
    significant: bool
    level: float = DEFAULT_LEVEL


def estimate_effect(
    observed: DailyPanel,
    forecast: ForecastResult,
    window: EffectWindow,
    level: float = DEFAULT_LEVEL,
) -> list[EffectEstimate]:
    """
    One estimate per series. The interval is the percentile interval
    of (sum observed - sum draw path) across replicates; the effect
    is significant when that interval excludes zero.
    """
    if window.end_offset >= forecast.horizon:
        raise EffectError(
            f"window {window.label!r} ends at day {window.end_offset} but the forecast covers "
            f"{forecast.horizon} days"
        )
    if observed.series_names != forecast.series_names:
        raise EffectError(
            f"observed series {list(observed.series_names)} do not match forecast {list(forecast.series_names)}"
        )
    first, last = window.dates(forecast.cutoff)
    if first < observed.start_date or last > observed.end_date:
        raise EffectError(
            f"observed data ({observed.start_date}..{observed.end_date}) does not cover "
            f"window {window.label!r} ({first}..{last})"
        )

    i0, i1 = observed.index_of(first), observed.index_of(last)
    observed_cum = observed.counts[i0:i1 + 1].sum(axis=0).astype(float)
    predicted_cum = forecast.point_path[window.start_offset:window.end_offset + 1].sum(axis=0)
    diff_draws = observed_cum[None, :] - cumulative_draws(forecast.draws, window.start_offset, window.end_offset)
    low, high = prediction_interval(diff_draws, level)

    estimates = []
    for j, name in enumerate(forecast.series_names):
        abs_diff = float(observed_cum[j] - predicted_cum[j])
        pct = abs_diff / float(predicted_cum[j]) if predicted_cum[j] > 0 else None
        estimates.append(EffectEstimate(
            window=window,
            series=name,
            observed_cum=float(observed_cum[j]),
            predicted_cum=float(predicted_cum[j]),
            abs_diff=abs_diff,
            pct_diff=pct,
            ci_low=float(low[j]),
            ci_high=float(high[j]),
            significant=bool(low[j] > 0 or high[j] < 0),
            level=level,
        ))
        logger.info(
            "effect | window=%s | series=%s | abs=%.1f | significant=%s",
            window.label, name, abs_diff, estimates[-1].significant,
        )
    return estimates


def effects_frame(estimates: list[EffectEstimate]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "series": e.series,
            "window": e.window.label,
            "start_offset": e.window.start_offset,
            "end_offset": e.window.end_offset,
            "observed_cum": e.observed_cum,
            "predicted_cum": e.predicted_cum,
            "abs_diff": e.abs_diff,
            "pct_diff": e.pct_diff,
            "ci_low": e.ci_low,
            "ci_high": e.ci_high,
            "level": e.level,
            "significant": e.significant,
        }
        for e in estimates
    ])


def summarize_effects(estimates: list[EffectEstimate]) -> str:
    lines = []
    for e in estimates:
        pct = "n/a" if e.pct_diff is None else f"{e.pct_diff:+.0%}"
        mark = "*" if e.significant else " "
        lines.append(
            f"{e.window.label:<10} {e.series:<12} {e.abs_diff:+10.0f} ({pct:>6}) "
            f"[{e.ci_low:+.0f}, {e.ci_high:+.0f}]{mark}"
        )
    return "\n".join(lines)


# ------------------------------------------------------------------ #
# Holdout validation
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class HoldoutSeries:
    series: str
    mean_daily_pct_error: float | None
    cumulative_pct_error: float | None
    zero_days_excluded: int


@dataclass(frozen=True)
class HoldoutReport:
    cutoff: date
    horizon: int
    series: list[HoldoutSeries]
    pooled_cumulative_pct_error: float | None
    daily: pd.DataFrame


def _pct_error(predicted: float, observed: float) -> float | None:
    return (predicted - observed) / observed if observed > 0 else None


def holdout_validation(
    panel: DailyPanel,
    spec: ModelSpec,
    cutoff: date,
    horizon: int,
    replicates: int = 200,
    seed: int = 0,
) -> HoldoutReport:
    """
    Refit on days before `cutoff`, forecast `horizon` days and score
    against what was observed. Percentage error is
    (predicted - observed) / observed on the level scale; days with
    zero observed sales drop out of the daily mean and are counted.
    """
    last = cutoff + timedelta(days=horizon - 1)
    if horizon < 1:
        raise EffectError(f"holdout horizon must be >= 1, got {horizon}")
    if last > panel.end_date:
        raise EffectError(f"holdout needs observations through {last}; panel ends {panel.end_date}")

    try:
        train = panel.before(cutoff)
        designs = build_designs(train, spec, CalendarBasis.for_panel(train, spec))
        fit = fit_sur(designs)
        # Licenses are exogenous, so the full panel may supply them for
        # the horizon; post-cutoff sales never reach the forecast.
        forecast = forecast_counterfactual(
            fit, train, cutoff, horizon,
            exogenous_future=ExogenousFuture.from_panel(panel, cutoff, horizon),
            replicates=replicates, seed=seed,
        )
    except ImpactLensError:
        raise
    except ValueError as e:
        raise EffectError(f"holdout at {cutoff}: {e}") from e

    held = panel.window(cutoff, last).counts.astype(float)
    predicted = forecast.point_path

    rows, per_series = [], []
    for j, name in enumerate(panel.series_names):
        daily = [_pct_error(predicted[t, j], held[t, j]) for t in range(horizon)]
        usable = [x for x in daily if x is not None]
        per_series.append(HoldoutSeries(
            series=name,
            mean_daily_pct_error=float(np.mean(usable)) if usable else None,
            cumulative_pct_error=_pct_error(predicted[:, j].sum(), held[:, j].sum()),
            zero_days_excluded=len(daily) - len(usable),
        ))
        for t, pct in enumerate(daily):
            rows.append({
                "date": forecast.dates[t].isoformat(),
                "series": name,
                "observed": held[t, j],
                "predicted": predicted[t, j],
                "pct_error": pct,
            })

    report = HoldoutReport(
        cutoff=cutoff,
        horizon=horizon,
        series=per_series,
        pooled_cumulative_pct_error=_pct_error(predicted.sum(), held.sum()),
        daily=pd.DataFrame(rows),
    )
    logger.info(
        "holdout_validation complete | cutoff=%s | horizon=%d | pooled=%s",
        cutoff, horizon, report.pooled_cumulative_pct_error,
    )
    return report


# ------------------------------------------------------------------ #
# Breakeven
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class Breakeven:
    """`weeks` is None when the deficit never offsets the surplus."""
    weeks: float | None

    @property
    def never(self) -> bool:
        return self.weeks is None

    @property
    def rounded(self) -> int | None:
        return None if self.weeks is None else int(math.floor(self.weeks + 0.5))

    def __str__(self) -> str:
        return "never" if self.weeks is None else f"{self.rounded} weeks ({self.weeks:.1f})"


NEVER = Breakeven(None)


def breakeven_weeks(immediate_surplus: float, shortrun_deficit: float, shortrun_days: int) -> Breakeven:
    """Weeks of short-run deficit needed to cancel the immediate surplus."""
    if shortrun_days < 1:
        raise EffectError(f"shortrun_days must be >= 1, got {shortrun_days}")
    if shortrun_deficit <= 0:
        return NEVER
    per_day = shortrun_deficit / shortrun_days
    return Breakeven(immediate_surplus / (per_day * 7.0))


def breakeven_by_series(
    immediate: list[EffectEstimate], short_run: list[EffectEstimate],
) -> dict[str, Breakeven]:
    """Pairs estimates by series; the deficit is the negated short-run difference."""
    later = {e.series: e for e in short_run}
    result = {}
    for e in immediate:
        if e.series not in later:
            raise EffectError(f"no short-run estimate for series {e.series!r}")
        s = later[e.series]
        result[e.series] = breakeven_weeks(e.abs_diff, -s.abs_diff, s.window.days)
    return result
