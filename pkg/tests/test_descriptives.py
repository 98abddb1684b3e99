# =============================================================
# ImpactLens - Descriptives Tests
# =============================================================

from datetime import date

import pandas as pd
import pytest

from services.descriptives import (
    annual_license_totals,
    annual_totals,
    concentration_frame,
    covariate_association,
    load_covariates,
    monthly_change,
    monthly_series,
    newly_observed_purchasers,
    preceding_window,
    purchaser_concentration,
    ratio_histogram,
    ratios_frame,
    retailer_sales_ratios,
    series_correlation,
    weekly_overlay,
)
from services.errors import DescriptivesError
from services.panel_builder import FirearmType, LicenseKind, LicenseRecord, TransactionRecord

TAW, HANDGUN = FirearmType.TAW_RIFLE, FirearmType.HANDGUN


def tx(day, kind=TAW, dealer="d1", buyer="p1", zip_code="06103"):
    return TransactionRecord(day, kind, dealer, zip_code, buyer, "make", "model")


def _repeat(n, **kwargs):
    return [tx(**kwargs) for _ in range(n)]


# ------------------------------------------------------------------ #
# Period counts
# ------------------------------------------------------------------ #

def test_annual_totals():
    records = [tx(date(2015, 3, 1)), tx(date(2015, 4, 1), HANDGUN), tx(date(2016, 1, 5))]
    table = annual_totals(records)
    assert list(table.columns) == ["Handgun", "TAWRifle", "NonTAWRifle", "Shotgun", "Total"]
    assert table.loc[2015].tolist() == [1, 1, 0, 0, 2]
    assert table.loc[2016, "Total"] == 1


def test_annual_license_totals():
    records = [
        LicenseRecord(date(2015, 1, 2), LicenseKind.NEW),
        LicenseRecord(date(2015, 6, 2), LicenseKind.RENEWAL),
        LicenseRecord(date(2015, 7, 2), LicenseKind.NEW),
    ]
    table = annual_license_totals(records)
    assert table.loc[2015].tolist() == [2, 1]


def test_monthly_series_and_weekly_overlay():
    records = [tx(date(2016, 1, 1)), tx(date(2016, 1, 7)), tx(date(2016, 1, 8)), tx(date(2016, 12, 31))]
    monthly = monthly_series(records)
    assert monthly[monthly["month"] == 1]["count"].tolist() == [3]
    weekly = weekly_overlay(records)
    assert dict(zip(weekly["week"], weekly["count"])) == {1: 2, 2: 1, 52: 1}


def test_monthly_change_reports_both_conventions():
    monthly = pd.DataFrame({
        "firearm_type": ["Handgun"] * 4,
        "year": [2015, 2015, 2016, 2016],
        "month": [1, 2, 1, 2],
        "count": [10, 20, 15, 10],
    })
    change = monthly_change(monthly, "handgun", 2015, 2016, months=(1, 2))
    assert change.mean_monthly_pct_change == pytest.approx(0.0)
    assert change.pct_change_of_totals == pytest.approx(-1 / 6)
    full_year = monthly_change(monthly, HANDGUN, 2015, 2016)
    assert full_year.mean_monthly_pct_change == pytest.approx(0.0)
    assert full_year.months == tuple(range(1, 13))


# ------------------------------------------------------------------ #
# Newly-observed purchasers
# ------------------------------------------------------------------ #

def test_newly_observed_purchasers():
    records = [
        tx(date(2016, 1, 2), HANDGUN, buyer="x"),
        tx(date(2016, 1, 3), HANDGUN, buyer="x"),
        tx(date(2016, 1, 9), HANDGUN, buyer="x"),
        tx(date(2016, 1, 10), TAW, buyer="y"),
        tx(date(2016, 1, 3), TAW, buyer=""),
    ]
    report = newly_observed_purchasers(records, origin=date(2016, 1, 1))
    assert report.newly_observed == 3
    assert report.repeat == 1
    assert report.missing_purchaser_excluded == 1
    assert report.weekly["week_start"].tolist() == ["2016-01-01", "2016-01-08"]
    assert report.weekly["Handgun"].tolist() == [2, 0]
    assert report.weekly["TAWRifle"].tolist() == [0, 1]
    shares = report.share_in_window(date(2016, 1, 8), date(2016, 1, 14))
    assert shares["Handgun"] == 0.0
    assert shares["TAWRifle"] == 1.0
    assert shares["Shotgun"] is None


def test_newly_observed_needs_purchaser_ids():
    with pytest.raises(DescriptivesError):
        newly_observed_purchasers([tx(date(2016, 1, 2), buyer="")])


# ------------------------------------------------------------------ #
# Concentration
# ------------------------------------------------------------------ #

def test_purchaser_concentration_buckets():
    day = date(2016, 6, 3)
    records = (
        _repeat(1, day=day, buyer="b1")
        + _repeat(2, day=day, buyer="b2")
        + _repeat(3, day=day, buyer="b3", dealer="d2")
        + _repeat(6, day=day, buyer="b4")
        + [tx(day, buyer="")]
        + [tx(day, HANDGUN, buyer="b9"), tx(date(2016, 7, 1), buyer="b9")]
    )
    report = purchaser_concentration(records, date(2016, 6, 1), date(2016, 6, 10), ["TAWRifle"], top_k=1)
    assert report.n_transactions == 13
    assert report.n_buyers == 4
    assert report.missing_purchaser_excluded == 1
    assert report.bucket_shares == pytest.approx({"1": 1 / 12, "2": 2 / 12, "3-4": 3 / 12, "5-15": 6 / 12, ">15": 0.0})
    assert report.bucket_buyers["5-15"] == 1
    assert report.top_k_retailer_share == pytest.approx(10 / 13)
    frame = concentration_frame([report])
    assert frame["bucket"].tolist() == ["1", "2", "3-4", "5-15", ">15"]


def test_concentration_window_checks():
    with pytest.raises(DescriptivesError):
        purchaser_concentration([tx(date(2016, 6, 3))], date(2016, 6, 5), date(2016, 6, 1))
    with pytest.raises(DescriptivesError):
        purchaser_concentration([tx(date(2016, 6, 3))], date(2017, 1, 1), date(2017, 1, 5))


def test_preceding_window():
    assert preceding_window(date(2016, 6, 1), date(2016, 6, 10)) == (date(2016, 5, 22), date(2016, 5, 31))


# ------------------------------------------------------------------ #
# Retailer ratios
# ------------------------------------------------------------------ #

@pytest.fixture
def two_year_records():
    y0, y1 = date(2015, 5, 1), date(2016, 5, 1)
    return (
        _repeat(6, day=y0, dealer="A", zip_code="06001")
        + _repeat(12, day=y1, dealer="A", zip_code="06001")
        + _repeat(3, day=y1, kind=HANDGUN, dealer="A", zip_code="06001")
        + _repeat(3, day=y0, dealer="B", zip_code="06002")
        + _repeat(3, day=y1, dealer="B", zip_code="06002")
        + _repeat(1, day=y0, dealer="C", zip_code="06003")
    )


def test_retailer_ratios_cover_top_sellers(two_year_records):
    ratios = retailer_sales_ratios(two_year_records, 2015, 2016, coverage=0.9)
    assert [r.dealer_id for r in ratios] == ["A", "B"]
    assert ratios[0].ratio["TAWRifle"] == 2.0
    assert ratios[0].ratio["Handgun"] is None
    assert ratios[1].ratio["TAWRifle"] == 1.0
    assert ratios[0].zip == "06001"
    frame = ratios_frame(ratios)
    assert len(frame) == 2 * 4
    hist = ratio_histogram(ratios)
    taw = hist[(hist["firearm_type"] == "TAWRifle") & (hist["count"] > 0)]
    assert taw["bin_low"].tolist() == [1.0, 2.0]


def test_retailer_ratio_checks(two_year_records):
    with pytest.raises(DescriptivesError):
        retailer_sales_ratios(two_year_records, 2015, 2017)
    with pytest.raises(DescriptivesError):
        retailer_sales_ratios(two_year_records, 2015, 2016, coverage=0.0)
    with pytest.raises(DescriptivesError):
        retailer_sales_ratios(two_year_records, 2015, 2016, ranking_type="Shotgun")


def test_covariate_association(two_year_records):
    ratios = retailer_sales_ratios(two_year_records, 2015, 2016, coverage=1.0)
    assert len(ratios) == 3
    result = covariate_association(ratios, {"06001": 10.0, "06002": 20.0, "06003": 30.0}, ["TAWRifle"])
    taw = result["TAWRifle"]
    assert taw.n == 3
    assert taw.slope == pytest.approx(-0.1)
    assert taw.r == pytest.approx(-1.0)
    assert taw.scatter.columns.tolist() == ["dealer_id", "zip", "value", "ratio"]
    assert len(taw.scatter) == 3


def test_covariate_association_omits_undersized_types(two_year_records, caplog):
    ratios = retailer_sales_ratios(two_year_records, 2015, 2016, coverage=1.0)
    covariate = {"06001": 10.0, "06002": 20.0, "06003": 30.0}
    # no dealer sold handguns in 2015, so every handgun ratio is undefined
    result = covariate_association(ratios, covariate, ["TAWRifle", "Handgun"])
    assert list(result) == ["TAWRifle"]
    assert "type=Handgun" in caplog.text
    assert covariate_association(ratios, {"06001": 1.0}, ["TAWRifle"]) == {}


def test_load_covariates(tmp_path, caplog):
    path = tmp_path / "zips.csv"
    path.write_text("zip,income,white_male_share\n6103,1.5,0.4\n06105,n/a,0.5\n06106,2,\n")
    tables = load_covariates(str(path))
    assert tables == {
        "income": {"06103": 1.5, "06106": 2.0},
        "white_male_share": {"06103": 0.4, "06105": 0.5},
    }
    assert "column=income" in caplog.text


def test_load_covariates_needs_a_zip_column(tmp_path):
    path = tmp_path / "zips.csv"
    path.write_text("postcode,income\n06103,1.0\n")
    with pytest.raises(DescriptivesError):
        load_covariates(str(path))


# ------------------------------------------------------------------ #
# Correlation
# ------------------------------------------------------------------ #

def test_series_correlation():
    assert series_correlation([1, 2, 3, 4], [2, 4, 6, 9]) > 0.95
    assert series_correlation([1, 1, 1], [1, 2, 3]) is None
    with pytest.raises(DescriptivesError):
        series_correlation([1, 2], [1, 2])
    with pytest.raises(DescriptivesError):
        series_correlation([1, 2, 3], [1, 2])
