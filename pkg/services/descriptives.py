# =============================================================
# ImpactLens - Descriptives
#
# Record-level summaries that sit beside the time-series model:
#   - annual / monthly / weekly counts by type
#   - newly-observed purchasers (first observed week)
#   - purchaser concentration and top-retailer share in a window
#   - retailer sales ratios between two years + covariate links
#   - correlation of two annual series
#
# All tables are long-format pandas frames ready for export.
# =============================================================

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from services.design_builder import week_of_year
from services.errors import DescriptivesError
from services.panel_builder import (
    SERIES_ORDER,
    FirearmType,
    LicenseKind,
    LicenseRecord,
    TransactionRecord,
    licenses_frame,
    transactions_frame,
)

logger = logging.getLogger(__name__)

CONCENTRATION_BUCKETS: tuple[tuple[str, int, float], ...] = (
    ("1", 1, 1),
    ("2", 2, 2),
    ("3-4", 3, 4),
    ("5-15", 5, 15),
    (">15", 16, np.inf),
)
DEFAULT_COVERAGE = 0.90
RATIO_BIN_EDGES = tuple(np.round(np.arange(0.0, 3.01, 0.25), 2)) + (np.inf,)


def _frame(transactions: Iterable[TransactionRecord] | pd.DataFrame) -> pd.DataFrame:
    frame = transactions if isinstance(transactions, pd.DataFrame) else transactions_frame(transactions)
    frame = frame.copy()
    frame["date"] = pd.to_datetime(frame["date"])
    return frame


def _type_names(types: Iterable[FirearmType | str] | None) -> list[str]:
    if types is None:
        return list(SERIES_ORDER)
    return [t.value if isinstance(t, FirearmType) else FirearmType.parse(t).value for t in types]


# ------------------------------------------------------------------ #
# Counts over calendar periods
# ------------------------------------------------------------------ #

def annual_totals(transactions) -> pd.DataFrame:
    """Rows = calendar years, one column per type plus 'Total'."""
    frame = _frame(transactions)
    table = pd.crosstab(frame["date"].dt.year, frame["firearm_type"])
    table = table.reindex(columns=list(SERIES_ORDER), fill_value=0)
    table.index.name = "year"
    table.columns.name = None
    table["Total"] = table.sum(axis=1)
    return table.astype(int)


def annual_license_totals(licenses: Iterable[LicenseRecord]) -> pd.DataFrame:
    frame = licenses_frame(licenses)
    frame["issue_date"] = pd.to_datetime(frame["issue_date"])
    table = pd.crosstab(frame["issue_date"].dt.year, frame["kind"])
    table = table.reindex(columns=[k.value for k in LicenseKind], fill_value=0)
    table.index.name = "year"
    table.columns.name = None
    return table.astype(int)


def monthly_series(transactions) -> pd.DataFrame:
    """Long table: firearm_type, year, month, count."""
    frame = _frame(transactions)
    grouped = frame.groupby(
        [frame["firearm_type"], frame["date"].dt.year.rename("year"), frame["date"].dt.month.rename("month")]
    ).size()
    return grouped.rename("count").reset_index()


@dataclass(frozen=True)
class MonthlyChange:
    firearm_type: str
    year_from: int
    year_to: int
    months: tuple[int, ...]
    mean_monthly_pct_change: float | None
    pct_change_of_totals: float | None


def monthly_change(
    monthly: pd.DataFrame,
    firearm_type: FirearmType | str,
    year_from: int,
    year_to: int,
    months: Sequence[int] | None = None,
) -> MonthlyChange:
    """
    Year-over-year change under both conventions: the mean of the
    per-month percentage changes, and the change of the summed months.
    Months with no sales in `year_from` drop out of the mean.
    """
    name = _type_names([firearm_type])[0]
    months = tuple(months or range(1, 13))
    sub = monthly[monthly["firearm_type"] == name]
    by = sub.pivot_table(index="month", columns="year", values="count", aggfunc="sum", fill_value=0)
    by = by.reindex(index=list(months), columns=[year_from, year_to], fill_value=0)

    base, later = by[year_from].to_numpy(float), by[year_to].to_numpy(float)
    usable = base > 0
    mean_pct = float(np.mean((later[usable] - base[usable]) / base[usable])) if usable.any() else None
    total_pct = float((later.sum() - base.sum()) / base.sum()) if base.sum() > 0 else None
    return MonthlyChange(name, year_from, year_to, months, mean_pct, total_pct)


def weekly_overlay(transactions) -> pd.DataFrame:
    """Long table: firearm_type, year, week (1..52, last days fold into 52), count."""
    frame = _frame(transactions)
    week = pd.Series(week_of_year(frame["date"]), index=frame.index, name="week")
    keys = [frame["firearm_type"], frame["date"].dt.year.rename("year"), week]
    return frame.groupby(keys).size().rename("count").reset_index()


# ------------------------------------------------------------------ #
# Newly-observed purchasers
# ------------------------------------------------------------------ #

@dataclass
class NewPurchaserReport:
    """`flags` has one row per purchase with a bool `newly_observed` column."""
    origin: date
    flags: pd.DataFrame
    weekly: pd.DataFrame
    newly_observed: int
    repeat: int
    missing_purchaser_excluded: int

    def share_in_window(self, start: date, end: date) -> dict[str, float | None]:
        """Share of each type's purchases in [start, end] that were newly observed."""
        inside = self.flags[(self.flags["date"] >= pd.Timestamp(start)) & (self.flags["date"] <= pd.Timestamp(end))]
        shares = {}
        for name in SERIES_ORDER:
            rows = inside[inside["firearm_type"] == name]
            shares[name] = float(rows["newly_observed"].mean()) if len(rows) else None
        return shares


def newly_observed_purchasers(transactions, origin: date | None = None) -> NewPurchaserReport:
    """
    Weeks are 7-day blocks counted from `origin` (default: the first
    date in the data). Every purchase a purchaser makes in their first
    observed week counts as newly observed.
    """
    frame = _frame(transactions)
    ids = frame["purchaser_id"].fillna("").astype(str).str.strip()
    missing = int((ids == "").sum())
    frame = frame[ids != ""].copy()
    if frame.empty:
        raise DescriptivesError("no transactions carry a purchaser_id")

    origin = origin or frame["date"].min().date()
    frame["week"] = (frame["date"] - pd.Timestamp(origin)).dt.days // 7
    first_week = frame.groupby("purchaser_id")["week"].transform("min")
    frame["newly_observed"] = frame["week"] == first_week

    new_rows = frame[frame["newly_observed"]]
    weekly = new_rows.groupby(["week", "firearm_type"]).size().unstack(fill_value=0)
    weekly = weekly.reindex(columns=list(SERIES_ORDER), fill_value=0)
    weekly.columns.name = None
    weekly.insert(0, "week_start", [(pd.Timestamp(origin) + pd.Timedelta(days=7 * w)).date().isoformat() for w in weekly.index])
    weekly = weekly.reset_index()

    n_new = int(frame["newly_observed"].sum())
    report = NewPurchaserReport(
        origin=origin,
        flags=frame[["date", "firearm_type", "purchaser_id", "week", "newly_observed"]].reset_index(drop=True),
        weekly=weekly,
        newly_observed=n_new,
        repeat=len(frame) - n_new,
        missing_purchaser_excluded=missing,
    )
    logger.info(
        "newly_observed_purchasers | new=%d | repeat=%d | missing_id=%d",
        report.newly_observed, report.repeat, missing,
    )
    return report


# ------------------------------------------------------------------ #
# Concentration
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class ConcentrationReport:
    window_start: date
    window_end: date
    firearm_types: tuple[str, ...]
    n_transactions: int
    n_buyers: int
    bucket_shares: dict[str, float]
    bucket_buyers: dict[str, int]
    top_k: int
    top_k_retailer_share: float
    missing_purchaser_excluded: int = 0


def preceding_window(start: date, end: date) -> tuple[date, date]:
    """The equally long window ending the day before `start`."""
    length = (end - start).days + 1
    return start - timedelta(days=length), start - timedelta(days=1)


def purchaser_concentration(
    transactions,
    start: date,
    end: date,
    firearm_types: Iterable[FirearmType | str] | None = None,
    top_k: int = 10,
) -> ConcentrationReport:
    """
    Share of the window's purchases made by buyers with 1, 2, 3-4,
    5-15 and more than 15 purchases in the window, plus the share
    sold by the `top_k` busiest retailers.
    """
    if end < start:
        raise DescriptivesError(f"window end {end} precedes start {start}")
    names = _type_names(firearm_types)
    frame = _frame(transactions)
    inside = frame[
        (frame["date"] >= pd.Timestamp(start))
        & (frame["date"] <= pd.Timestamp(end))
        & frame["firearm_type"].isin(names)
    ]
    if inside.empty:
        raise DescriptivesError(f"no {names} transactions between {start} and {end}")

    retailer = inside.groupby("dealer_id").size().sort_values(ascending=False)
    top_share = float(retailer.iloc[:top_k].sum() / len(inside))

    ids = inside["purchaser_id"].fillna("").astype(str).str.strip()
    buyers = inside[ids != ""]
    per_buyer = buyers.groupby("purchaser_id").size()
    total = float(per_buyer.sum())

    shares, counts = {}, {}
    for label, low, high in CONCENTRATION_BUCKETS:
        in_bucket = per_buyer[(per_buyer >= low) & (per_buyer <= high)]
        shares[label] = float(in_bucket.sum() / total) if total else 0.0
        counts[label] = int(len(in_bucket))

    report = ConcentrationReport(
        window_start=start,
        window_end=end,
        firearm_types=tuple(names),
        n_transactions=int(len(inside)),
        n_buyers=int(len(per_buyer)),
        bucket_shares=shares,
        bucket_buyers=counts,
        top_k=top_k,
        top_k_retailer_share=top_share,
        missing_purchaser_excluded=int((ids == "").sum()),
    )
    logger.info(
        "purchaser_concentration | window=%s..%s | buyers=%d | single=%.3f | top%d=%.3f",
        start, end, report.n_buyers, shares["1"], top_k, top_share,
    )
    return report


def concentration_frame(reports: Sequence[ConcentrationReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        for label, _, _ in CONCENTRATION_BUCKETS:
            rows.append({
                "window_start": r.window_start.isoformat(),
                "window_end": r.window_end.isoformat(),
                "bucket": label,
                "buyers": r.bucket_buyers[label],
                "purchase_share": r.bucket_shares[label],
                "top_k_retailer_share": r.top_k_retailer_share,
            })
    return pd.DataFrame(rows)


# ------------------------------------------------------------------ #
# Retailer ratios
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class RetailerRatio:
    dealer_id: str
    zip: str | None
    sales_y0: dict[str, int]
    sales_y1: dict[str, int]
    ratio: dict[str, float | None] = field(default_factory=dict)


def retailer_sales_ratios(
    transactions,
    y0: int,
    y1: int,
    coverage: float = DEFAULT_COVERAGE,
    ranking_type: FirearmType | str = FirearmType.TAW_RIFLE,
) -> list[RetailerRatio]:
    """
    Ratios of year-y1 to year-y0 sales per type for the smallest set
    of top retailers (by y0 sales of `ranking_type`) that covers
    `coverage` of those sales. A type with no y0 sales has ratio None.
    """
    if not 0.0 < coverage <= 1.0:
        raise DescriptivesError(f"coverage must lie in (0, 1], got {coverage}")
    frame = _frame(transactions)
    years = set(frame["date"].dt.year.unique())
    if y0 not in years or y1 not in years:
        raise DescriptivesError(f"data must contain both {y0} and {y1}; found years {sorted(years)}")

    ranking = _type_names([ranking_type])[0]
    frame = frame[frame["date"].dt.year.isin([y0, y1])]
    counts = frame.groupby([frame["dealer_id"], frame["date"].dt.year.rename("year"), frame["firearm_type"]]).size()
    table = counts.unstack(["year", "firearm_type"], fill_value=0)

    def column(year: int, name: str) -> pd.Series:
        key = (year, name)
        return table[key] if key in table.columns else pd.Series(0, index=table.index)

    base = column(y0, ranking)
    if base.sum() <= 0:
        raise DescriptivesError(f"no {ranking} sales in {y0}; cannot rank retailers")
    ranked = base[base > 0].reset_index()
    ranked.columns = ["dealer_id", "sales"]
    ranked = ranked.sort_values(["sales", "dealer_id"], ascending=[False, True])
    share = ranked["sales"].cumsum() / base.sum()
    n_keep = min(int(np.searchsorted(share.to_numpy(), coverage - 1e-12)) + 1, len(ranked))
    keep = ranked["dealer_id"].iloc[:n_keep].tolist()

    zips = frame.dropna(subset=["dealer_zip"]).groupby("dealer_id")["dealer_zip"].agg(
        lambda z: next((v for v in z if v), None)
    )

    result = []
    for dealer in keep:
        s0 = {name: int(column(y0, name).get(dealer, 0)) for name in SERIES_ORDER}
        s1 = {name: int(column(y1, name).get(dealer, 0)) for name in SERIES_ORDER}
        result.append(RetailerRatio(
            dealer_id=dealer,
            zip=zips.get(dealer) or None,
            sales_y0=s0,
            sales_y1=s1,
            ratio={name: (s1[name] / s0[name] if s0[name] > 0 else None) for name in SERIES_ORDER},
        ))
    logger.info(
        "retailer_sales_ratios | %d->%d | retailers=%d of %d | coverage=%.2f",
        y0, y1, len(result), len(ranked), coverage,
    )
    return result


def ratios_frame(ratios: Sequence[RetailerRatio]) -> pd.DataFrame:
    rows = []
    for r in ratios:
        for name in SERIES_ORDER:
            rows.append({
                "dealer_id": r.dealer_id,
                "zip": r.zip or "",
                "firearm_type": name,
                "sales_y0": r.sales_y0[name],
                "sales_y1": r.sales_y1[name],
                "ratio": r.ratio[name],
            })
    return pd.DataFrame(rows)


def ratio_histogram(ratios: Sequence[RetailerRatio], edges: Sequence[float] = RATIO_BIN_EDGES) -> pd.DataFrame:
    """Fixed-bin counts of defined ratios per type; the last bin is open-ended."""
    rows = []
    for name in SERIES_ORDER:
        values = np.array([r.ratio[name] for r in ratios if r.ratio[name] is not None], dtype=float)
        counts, _ = np.histogram(values, bins=np.asarray(edges, dtype=float))
        for low, high, n in zip(edges[:-1], edges[1:], counts):
            rows.append({"firearm_type": name, "bin_low": float(low), "bin_high": float(high), "count": int(n)})
    return pd.DataFrame(rows)


# ------------------------------------------------------------------ #
# Associations
# ------------------------------------------------------------------ #

def series_correlation(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Pearson correlation; None when either series is constant."""
    x, y = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DescriptivesError(f"series must be 1-D and equally long, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise DescriptivesError(f"correlation needs at least 3 points, got {len(x)}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.pearsonr(x, y)[0])


@dataclass(frozen=True)
class Association:
    firearm_type: str
    n: int
    r: float | None
    slope: float
    slope_stderr: float | None
    undefined_ratio_excluded: int
    missing_covariate_excluded: int
    scatter: pd.DataFrame


def covariate_association(
    ratios: Sequence[RetailerRatio],
    covariate: Mapping[str, float],
    firearm_types: Iterable[FirearmType | str] | None = None,
    min_retailers: int = 3,
) -> dict[str, Association]:
    """
    Least-squares slope of ratio on a per-zip covariate, per type.

    Types with fewer than `min_retailers` matched retailers are logged
    and left out of the result.
    """
    result = {}
    for name in _type_names(firearm_types):
        undefined = sum(r.ratio[name] is None for r in ratios)
        usable = [r for r in ratios if r.ratio[name] is not None]
        matched = [r for r in usable if r.zip is not None and r.zip in covariate]
        if len(matched) < min_retailers:
            logger.warning(
                "covariate_association | type=%s | matched=%d | need at least %d retailers; omitted",
                name, len(matched), min_retailers,
            )
            continue
        x = np.array([covariate[r.zip] for r in matched], dtype=float)
        y = np.array([r.ratio[name] for r in matched], dtype=float)
        scatter = pd.DataFrame({
            "dealer_id": [r.dealer_id for r in matched],
            "zip": [r.zip for r in matched],
            "value": x,
            "ratio": y,
        })
        if np.ptp(x) == 0:
            r_value, slope, stderr = None, 0.0, None
        else:
            fit = stats.linregress(x, y)
            slope, stderr = float(fit.slope), float(fit.stderr)
            r_value = None if np.ptp(y) == 0 else float(fit.rvalue)
        result[name] = Association(
            firearm_type=name,
            n=len(matched),
            r=r_value,
            slope=slope,
            slope_stderr=stderr,
            undefined_ratio_excluded=undefined,
            missing_covariate_excluded=len(usable) - len(matched),
            scatter=scatter,
        )
    return result


def load_covariates(path: str) -> dict[str, dict[str, float]]:
    """
    Delimited file with a zip column and one or more numeric covariate
    columns. Returns {covariate name: {zip: value}}; non-numeric cells
    are skipped per column.
    """
    try:
        frame = pd.read_csv(path, dtype=str, sep=None, engine="python", keep_default_na=False)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DescriptivesError(f"cannot read covariate file {path}: {e}") from e
    frame.columns = [str(c).strip().lower() for c in frame.columns]
    names = [c for c in frame.columns if c != "zip"]
    if "zip" not in frame.columns or not names:
        raise DescriptivesError(
            f"{path}: need a zip column and at least one covariate; found {list(frame.columns)}"
        )
    zips = frame["zip"].str.strip().str.zfill(5)
    tables = {}
    for name in names:
        values = pd.to_numeric(frame[name], errors="coerce")
        bad = int(values.isna().sum())
        if bad:
            logger.warning("load_covariates | column=%s | %d rows with non-numeric values skipped", name, bad)
        tables[name] = {z: float(v) for z, v in zip(zips, values) if not np.isnan(v)}
    return tables
