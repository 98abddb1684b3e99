# =============================================================
# ImpactLens - Specification Selector
#
# K-fold cross-validation over contiguous date blocks:
#   - cross_validate()       one spec -> CvReport
#   - select_lags()          add lags until MAE first increases
#   - compare_time_specs()   same folds for every spec -> table
#
# Lags always come from the full observed series, so held-out
# rows are one-step-ahead predictions. Errors are on the log scale.
# =============================================================

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np
import pandas as pd

from services.design_builder import (
    CalendarBasis,
    DesignMatrix,
    ModelSpec,
    build_designs,
    collinear_columns,
)
from services.errors import SelectionError
from services.panel_builder import DailyPanel
from services.sur_estimator import fit_sur, ols_solve

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 10


# ------------------------------------------------------------------ #
# Result models
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class CvReport:
    spec: ModelSpec
    rmse: dict[str, float]
    mae: dict[str, float]
    fold_count: int
    fold_assignment: str
    fold_sizes: tuple[int, ...]
    n_predicted: int
    in_sample_mae: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    @property
    def mean_mae(self) -> float:
        """MAE averaged with equal weight across series."""
        return float(np.mean(list(self.mae.values())))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(list(self.rmse.values())))


@dataclass(frozen=True)
class LagSelection:
    which: str
    lag: int
    truncated: bool
    mae_path: dict[int, float]


# ------------------------------------------------------------------ #
# Cross-validation
# ------------------------------------------------------------------ #

def fold_blocks(n_rows: int, k: int) -> list[np.ndarray]:
    """K contiguous, near-equal row blocks covering 0..n_rows-1 once."""
    if k < 2:
        raise SelectionError(f"cross-validation needs at least 2 folds, got {k}")
    if n_rows < k:
        raise SelectionError(f"{n_rows} usable rows cannot fill {k} folds")
    return np.array_split(np.arange(n_rows), k)


def _trim(designs: list[DesignMatrix], drop: int) -> list[DesignMatrix]:
    if drop <= 0:
        return designs
    return [
        replace(
            d,
            rows=d.rows[drop:],
            target=d.target[drop:],
            date_index=d.dates[drop].date(),
        )
        for d in designs
    ]


def _fit_fold(
    designs: list[DesignMatrix],
    fold: int,
    held_out: np.ndarray,
    estimator: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (held-out predictions [m x J], training abs errors mean per series)."""
    n = designs[0].n_rows
    train = np.ones(n, dtype=bool)
    train[held_out] = False

    for d in designs:
        bad = collinear_columns(d.rows[train], d.column_labels)
        if bad:
            raise SelectionError(
                f"fold {fold}: training design for {d.series_name} is rank deficient; "
                f"collinear columns: {bad}",
                fold=fold,
            )

    if estimator == "sur":
        sub = [replace(d, rows=d.rows[train], target=d.target[train]) for d in designs]
        coefs = list(fit_sur(sub).coefficients)
    else:
        coefs = [ols_solve(d.rows[train], d.target[train])[0] for d in designs]

    preds = np.column_stack([d.rows[held_out] @ c for d, c in zip(designs, coefs)])
    in_sample = np.array([
        np.mean(np.abs(d.target[train] - d.rows[train] @ c)) for d, c in zip(designs, coefs)
    ])
    return preds, in_sample


def cross_validate(
    panel: DailyPanel,
    spec: ModelSpec,
    k: int = DEFAULT_FOLDS,
    seed: int = 0,
    burn_in: int | None = None,
    estimator: Literal["ols", "sur"] = "ols",
    workers: int = 1,
) -> CvReport:
    """
    Blocked K-fold prediction errors for one specification.

    `burn_in` drops extra leading rows so that specs with different
    lag depths are scored on the same dates. Folds are contiguous,
    so `seed` does not change them; it is recorded for provenance.
    """
    if k < 2:
        raise SelectionError(f"cross-validation needs at least 2 folds, got {k}")
    burn = spec.max_lag if burn_in is None else max(burn_in, spec.max_lag)
    basis = CalendarBasis.for_panel(panel, spec)
    designs = build_designs(panel, spec, basis, check_rank=False)
    designs = _trim(designs, burn - spec.max_lag)

    n = designs[0].n_rows
    blocks = fold_blocks(n, k)
    targets = np.column_stack([d.target for d in designs])

    def run(fold: int):
        return _fit_fold(designs, fold, blocks[fold], estimator)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(fold) for fold in range(k)]

    preds = np.vstack([r[0] for r in results])
    in_sample = np.mean([r[1] for r in results], axis=0)
    errors = preds - targets

    names = [d.series_name for d in designs]
    report = CvReport(
        spec=spec,
        rmse={name: float(np.sqrt(np.mean(errors[:, j] ** 2))) for j, name in enumerate(names)},
        mae={name: float(np.mean(np.abs(errors[:, j]))) for j, name in enumerate(names)},
        fold_count=k,
        fold_assignment=f"contiguous blocks over {n} rows from {designs[0].date_index}",
        fold_sizes=tuple(len(b) for b in blocks),
        n_predicted=int(preds.shape[0]),
        in_sample_mae={name: float(in_sample[j]) for j, name in enumerate(names)},
        seed=seed,
    )
    logger.debug(
        "cross_validate | spec=%s | folds=%d | mean_mae=%.5f", spec.label(), k, report.mean_mae,
    )
    return report


# ------------------------------------------------------------------ #
# Lag selection
# ------------------------------------------------------------------ #

def select_lags(
    panel: DailyPanel,
    base_spec: ModelSpec,
    which: Literal["sales", "license"],
    max_lag: int,
    k: int = DEFAULT_FOLDS,
    start: int = 0,
    workers: int = 1,
) -> LagSelection:
    """
    Add lags one at a time and stop the first time an extra lag
    increases cross-validated MAE (averaged across series). All
    candidates are scored on the same rows and folds.
    """
    if max_lag < 1:
        raise SelectionError(f"max_lag must be >= 1, got {max_lag}")
    if which not in ("sales", "license"):
        raise SelectionError(f"which must be 'sales' or 'license', got {which!r}")
    if start > max_lag:
        raise SelectionError(f"start lag {start} exceeds max_lag {max_lag}")

    if which == "sales":
        burn = max(max_lag, base_spec.license_lags)
        candidate = lambda lag: base_spec.with_lags(sales_lags=lag)
    else:
        burn = max(max_lag, base_spec.sales_lags)
        candidate = lambda lag: base_spec.with_lags(license_lags=lag)

    path: dict[int, float] = {}
    for lag in range(start, max_lag + 1):
        path[lag] = cross_validate(panel, candidate(lag), k=k, burn_in=burn, workers=workers).mean_mae
        logger.info("select_lags | which=%s | lag=%d | mae=%.5f", which, lag, path[lag])
        if lag > start and path[lag] > path[lag - 1]:
            return LagSelection(which=which, lag=lag - 1, truncated=False, mae_path=path)

    logger.warning(
        "select_lags | which=%s | MAE kept decreasing up to max_lag=%d; result is truncated",
        which, max_lag,
    )
    return LagSelection(which=which, lag=max_lag, truncated=True, mae_path=path)


def select_specification(
    panel: DailyPanel,
    base_spec: ModelSpec,
    max_sales_lag: int,
    max_license_lag: int,
    k: int = DEFAULT_FOLDS,
    workers: int = 1,
) -> tuple[ModelSpec, LagSelection, LagSelection]:
    """Sales lags first; then license lags with sales lags held at their selection."""
    sales = select_lags(
        panel, base_spec.with_lags(license_lags=0), "sales", max_sales_lag, k=k, workers=workers,
    )
    licenses = select_lags(
        panel, base_spec.with_lags(sales_lags=sales.lag), "license", max_license_lag, k=k, workers=workers,
    )
    chosen = base_spec.with_lags(sales_lags=sales.lag, license_lags=licenses.lag)
    logger.info("select_specification | chosen=%s", chosen.label())
    return chosen, sales, licenses


# ------------------------------------------------------------------ #
# Time-effect comparison
# ------------------------------------------------------------------ #

def compare_time_specs(
    panel: DailyPanel,
    spec_list: Sequence[ModelSpec],
    k: int = DEFAULT_FOLDS,
    seed: int = 0,
    workers: int = 1,
) -> list[CvReport]:
    """One CvReport per spec, in input order, all on identical folds."""
    if not spec_list:
        raise SelectionError("compare_time_specs needs at least one spec")
    burn = max(s.max_lag for s in spec_list)
    return [
        cross_validate(panel, s, k=k, seed=seed, burn_in=burn, workers=workers) for s in spec_list
    ]


_FLAG_ROWS = (
    ("Day-of-Week F.E.", "use_day_of_week"),
    ("Holiday F.E.", "use_holiday"),
    ("Day-of-Year F.E.", "use_day_of_year"),
    ("Week-of-Year F.E.", "use_week_of_year"),
    ("Linear Trend", "use_linear_trend"),
    ("Quadratic Trend", "use_quadratic_trend"),
)


def cv_table(reports: Sequence[CvReport]) -> pd.DataFrame:
    """Specs as columns; flag rows, then RMSE and MAE rows per series."""
    columns = [f"({i})" for i in range(1, len(reports) + 1)]
    rows: dict[str, list[str]] = {}
    for title, attr in _FLAG_ROWS:
        rows[title] = ["x" if getattr(r.spec, attr) else "" for r in reports]
    rows["Sales Lags"] = [str(r.spec.sales_lags) for r in reports]
    rows["License Lags"] = [str(r.spec.license_lags) for r in reports]
    for name in reports[0].mae:
        rows[f"{name} Root Mean Sq. Prediction Error"] = [f"{r.rmse[name]:.3f}" for r in reports]
        rows[f"{name} Mean Abs. Prediction Error"] = [f"{r.mae[name]:.3f}" for r in reports]
    frame = pd.DataFrame.from_dict(rows, orient="index", columns=columns)
    frame.index.name = "row"
    return frame
