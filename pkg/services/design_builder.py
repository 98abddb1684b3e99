# =============================================================
# ImpactLens - Design Builder
#
# Per-equation regressor matrices for the log-scale sales model:
#
#   y_jt = sum_tau a_jtau y_j,t-tau + x_t b_j
#          + sum_tau g_jtau zN_t-tau + sum_tau d_jtau zR_t-tau + e_jt
#
# Column order is fixed: own sales lags, calendar block, new
# license lags, renewal license lags, intercept. Labels never
# depend on the panel start, only on the ModelSpec.
# =============================================================

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date, timedelta
from functools import lru_cache
from typing import Sequence

import numpy as np
import pandas as pd
from pandas.tseries.holiday import USFederalHolidayCalendar
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg

from services.errors import DesignError
from services.panel_builder import DEFAULT_OFFSET, DailyPanel

logger = logging.getLogger(__name__)

_WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
_N_WEEKS = 52
_N_DAYS = 365

# Fixed-date federal holidays (month, day); observed dates come from
# the pandas federal calendar.
_FIXED_HOLIDAYS = ((1, 1), (7, 4), (11, 11), (12, 25))


# ------------------------------------------------------------------ #
# Model specification
# ------------------------------------------------------------------ #

class ModelSpec(BaseModel):
    """
    Lag depths and time-effect switches for one model.

    Defaults are the cross-validated choice: 28 sales lags,
    10 license lags, weekday + holiday + week-of-year effects and
    linear + quadratic trends. `holiday_dates=None` means the US
    federal calendar.
    """
    model_config = ConfigDict(frozen=True)

    sales_lags: int = Field(default=28, ge=0)
    license_lags: int = Field(default=10, ge=0)
    use_day_of_week: bool = True
    use_holiday: bool = True
    use_week_of_year: bool = True
    use_day_of_year: bool = False
    use_linear_trend: bool = True
    use_quadratic_trend: bool = True
    holiday_dates: frozenset[date] | None = None

    @model_validator(mode="after")
    def _check_exclusive(self) -> "ModelSpec":
        if self.use_week_of_year and self.use_day_of_year:
            raise ValueError("use_week_of_year and use_day_of_year are mutually exclusive")
        return self

    @property
    def max_lag(self) -> int:
        return max(self.sales_lags, self.license_lags)

    def label(self) -> str:
        parts = [
            name for name, on in (
                ("dow", self.use_day_of_week),
                ("hol", self.use_holiday),
                ("doy", self.use_day_of_year),
                ("woy", self.use_week_of_year),
                ("lin", self.use_linear_trend),
                ("quad", self.use_quadratic_trend),
            ) if on
        ]
        effects = "+".join(parts) or "none"
        return f"{effects}|y{self.sales_lags}|z{self.license_lags}"

    def with_lags(self, sales_lags: int | None = None, license_lags: int | None = None) -> "ModelSpec":
        update = {}
        if sales_lags is not None:
            update["sales_lags"] = sales_lags
        if license_lags is not None:
            update["license_lags"] = license_lags
        return self.model_copy(update=update)


def time_effect_grid(sales_lags: int = 1, license_lags: int = 0) -> list[ModelSpec]:
    """The six weekday/holiday specifications compared by cross-validation."""
    grid = []
    for trend in ("none", "linear", "quadratic"):
        for seasonal in ("week", "day"):
            grid.append(ModelSpec(
                sales_lags=sales_lags,
                license_lags=license_lags,
                use_day_of_week=True,
                use_holiday=True,
                use_week_of_year=seasonal == "week",
                use_day_of_year=seasonal == "day",
                use_linear_trend=trend in ("linear", "quadratic"),
                use_quadratic_trend=trend == "quadratic",
            ))
    return grid


# ------------------------------------------------------------------ #
# Holidays
# ------------------------------------------------------------------ #

@lru_cache(maxsize=None)
def federal_holidays(year: int) -> frozenset[date]:
    """Observed US federal holidays plus the fixed calendar dates."""
    observed = USFederalHolidayCalendar().holidays(
        start=f"{year - 1}-12-25", end=f"{year + 1}-01-07",
    )
    days = {d.date() for d in observed if d.year == year}
    days.update(date(year, m, d) for m, d in _FIXED_HOLIDAYS)
    return frozenset(days)


def load_holidays(path: str) -> frozenset[date]:
    """One ISO date per line; blank lines and '#' comments are skipped."""
    days = set()
    try:
        with open(path, "r") as f:
            for lineno, line in enumerate(f, 1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                try:
                    days.add(date.fromisoformat(text))
                except ValueError:
                    raise DesignError(f"{path}:{lineno}: not an ISO date: {text!r}") from None
    except OSError as e:
        raise DesignError(f"cannot read holiday file {path}: {e}") from e
    logger.info("Loaded %d holiday dates from %s", len(days), path)
    return frozenset(days)


# ------------------------------------------------------------------ #
# Calendar basis
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class CalendarBasis:
    """
    Anchors the trend terms: t = (day - origin).days + 1, scaled by
    1/scale. A fitted model keeps its basis so forecasts continue the
    same trend.
    """
    origin: date
    scale: int
    holidays: frozenset[date] | None = None

    @classmethod
    def for_panel(cls, panel: DailyPanel, spec: ModelSpec) -> "CalendarBasis":
        return cls(origin=panel.start_date, scale=panel.n_days, holidays=spec.holiday_dates)

    def is_holiday(self, day: date) -> bool:
        if self.holidays is not None:
            return day in self.holidays
        return day in federal_holidays(day.year)


def week_of_year(days: Sequence[date] | pd.DatetimeIndex | pd.Series) -> np.ndarray:
    """min(ceil(day_of_year / 7), 52) per day: days 365/366 fold into week 52."""
    index = pd.DatetimeIndex(days)
    return np.minimum(np.ceil(index.dayofyear.to_numpy() / 7).astype(int), _N_WEEKS)


def day_of_year_index(days: Sequence[date] | pd.DatetimeIndex | pd.Series) -> np.ndarray:
    """Day of year on a 365-day calendar per day; Feb 29 pools with Feb 28."""
    index = pd.DatetimeIndex(days)
    return index.dayofyear.to_numpy() - (index.is_leap_year & (index.dayofyear >= 60)).astype(int)


def calendar_labels(spec: ModelSpec) -> list[str]:
    labels: list[str] = []
    if spec.use_day_of_week:
        labels += [f"dow_{name}" for name in _WEEKDAYS[1:]]
    if spec.use_holiday:
        labels.append("holiday")
    if spec.use_week_of_year:
        labels += [f"woy_{w:02d}" for w in range(2, _N_WEEKS + 1)]
    if spec.use_day_of_year:
        labels += [f"doy_{d:03d}" for d in range(2, _N_DAYS + 1)]
    if spec.use_linear_trend:
        labels.append("trend")
    if spec.use_quadratic_trend:
        labels.append("trend_sq")
    return labels


def calendar_block(days: Sequence[date] | pd.DatetimeIndex, spec: ModelSpec, basis: CalendarBasis) -> np.ndarray:
    """Calendar regressors for each day, columns as in calendar_labels()."""
    index = pd.DatetimeIndex(days)
    n = len(index)
    blocks: list[np.ndarray] = []

    if spec.use_day_of_week:
        dow = np.zeros((n, len(_WEEKDAYS) - 1))
        weekday = index.dayofweek.to_numpy()
        rows = np.nonzero(weekday > 0)[0]
        dow[rows, weekday[rows] - 1] = 1.0
        blocks.append(dow)
    if spec.use_holiday:
        flags = [basis.is_holiday(d.date()) for d in index]
        blocks.append(np.asarray(flags, dtype=float).reshape(n, 1))
    if spec.use_week_of_year:
        woy = np.zeros((n, _N_WEEKS - 1))
        weeks = week_of_year(index)
        rows = np.nonzero(weeks > 1)[0]
        woy[rows, weeks[rows] - 2] = 1.0
        blocks.append(woy)
    if spec.use_day_of_year:
        doy_block = np.zeros((n, _N_DAYS - 1))
        doy = day_of_year_index(index)
        rows = np.nonzero(doy > 1)[0]
        doy_block[rows, doy[rows] - 2] = 1.0
        blocks.append(doy_block)
    if spec.use_linear_trend or spec.use_quadratic_trend:
        origin = pd.Timestamp(basis.origin)
        t = ((index - origin).days.to_numpy() + 1) / basis.scale
        if spec.use_linear_trend:
            blocks.append(t.reshape(n, 1))
        if spec.use_quadratic_trend:
            blocks.append((t ** 2).reshape(n, 1))

    if not blocks:
        return np.zeros((n, 0))
    return np.hstack(blocks)


def calendar_features(day: date, spec: ModelSpec, basis: CalendarBasis) -> np.ndarray:
    """Calendar feature vector for a single day."""
    return calendar_block([day], spec, basis)[0]


# ------------------------------------------------------------------ #
# Layout + design matrix
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class DesignLayout:
    """Column layout shared by estimation and forecasting."""
    spec: ModelSpec
    basis: CalendarBasis

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(
            [f"lag_y_{k}" for k in range(1, self.spec.sales_lags + 1)]
            + calendar_labels(self.spec)
            + [f"lag_new_{k}" for k in range(1, self.spec.license_lags + 1)]
            + [f"lag_renew_{k}" for k in range(1, self.spec.license_lags + 1)]
            + ["intercept"]
        )

    @property
    def n_columns(self) -> int:
        return len(self.labels)

    def assemble(
        self,
        sales_lags: np.ndarray,
        calendar: np.ndarray,
        new_lags: np.ndarray,
        renew_lags: np.ndarray,
    ) -> np.ndarray:
        """Concatenate regressor blocks along the last axis and append the intercept."""
        lead_shape = np.broadcast_shapes(
            sales_lags.shape[:-1], calendar.shape[:-1], new_lags.shape[:-1], renew_lags.shape[:-1],
        )
        parts = [
            np.broadcast_to(block, lead_shape + block.shape[-1:])
            for block in (sales_lags, calendar, new_lags, renew_lags)
        ]
        parts.append(np.ones(lead_shape + (1,)))
        return np.concatenate(parts, axis=-1)


@dataclass(frozen=True)
class DesignMatrix:
    rows: np.ndarray
    column_labels: tuple[str, ...]
    target: np.ndarray
    date_index: date
    series_name: str
    layout: DesignLayout
    offset: float = DEFAULT_OFFSET

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def n_columns(self) -> int:
        return self.rows.shape[1]

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.date_range(self.date_index, periods=self.n_rows, freq="D")

    def subset(self, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.rows[mask], self.target[mask]


def lag_matrix(values: np.ndarray, n_lags: int, start: int) -> np.ndarray:
    """Rows t = start..len-1, column k-1 holds values[t - k]."""
    n = len(values) - start
    if n_lags == 0:
        return np.zeros((n, 0))
    return np.column_stack([values[start - k:len(values) - k] for k in range(1, n_lags + 1)])


def collinear_columns(rows: np.ndarray, labels: Sequence[str]) -> list[str]:
    """
    Labels of columns outside the numerical rank, found with a
    column-pivoted QR. Empty when the matrix has full column rank.
    """
    n, p = rows.shape
    if p == 0:
        return []
    _, r, pivot = linalg.qr(rows, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[0] == 0:
        return list(labels)
    tol = diag[0] * max(n, p) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    return [labels[i] for i in pivot[rank:]]


def check_full_rank(rows: np.ndarray, labels: Sequence[str], context: str = "") -> None:
    bad = collinear_columns(rows, labels)
    if bad:
        where = f" ({context})" if context else ""
        raise DesignError(
            f"design is rank deficient{where}; collinear columns: {bad}",
            collinear_columns=bad,
        )


def build_designs(
    panel: DailyPanel,
    spec: ModelSpec,
    basis: CalendarBasis | None = None,
    check_rank: bool = True,
) -> list[DesignMatrix]:
    """One DesignMatrix per series; all share the same usable dates."""
    burn = spec.max_lag
    if panel.n_days <= burn:
        raise DesignError(
            f"panel has {panel.n_days} days but the spec needs more than {burn} (max lag)"
        )
    basis = basis or CalendarBasis.for_panel(panel, spec)
    layout = DesignLayout(spec=spec, basis=basis)
    labels = layout.labels

    usable_dates = panel.dates[burn:]
    calendar = calendar_block(usable_dates, spec, basis)
    new_lags = lag_matrix(panel.log_new_licenses(), spec.license_lags, burn)
    renew_lags = lag_matrix(panel.log_renewal_licenses(), spec.license_lags, burn)
    log_sales = panel.log_sales()

    designs = []
    for j, name in enumerate(panel.series_names):
        y = log_sales[:, j]
        rows = layout.assemble(lag_matrix(y, spec.sales_lags, burn), calendar, new_lags, renew_lags)
        if check_rank:
            check_full_rank(rows, labels, context=f"series {name}")
        designs.append(DesignMatrix(
            rows=rows,
            column_labels=labels,
            target=y[burn:].copy(),
            date_index=usable_dates[0].date(),
            series_name=name,
            layout=layout,
            offset=panel.offset,
        ))

    logger.debug(
        "build_designs | spec=%s | rows=%d | columns=%d", spec.label(), len(usable_dates), len(labels),
    )
    return designs


def build_design(
    panel: DailyPanel,
    j: int | str,
    spec: ModelSpec,
    basis: CalendarBasis | None = None,
) -> DesignMatrix:
    """DesignMatrix for a single series (index or name)."""
    index = panel.series_index(j) if isinstance(j, str) else j
    single = DailyPanel(
        start_date=panel.start_date,
        counts=panel.counts[:, [index]],
        new_licenses=panel.new_licenses,
        renewal_licenses=panel.renewal_licenses,
        series_names=(panel.series_names[index],),
        offset=panel.offset,
    )
    return build_designs(single, spec, basis)[0]


def future_dates(last_observed: date, horizon: int) -> list[date]:
    return [last_observed + timedelta(days=k) for k in range(1, horizon + 1)]

