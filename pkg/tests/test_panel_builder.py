# =============================================================
# ImpactLens - Panel Builder Tests
# Run from project root: pytest tests/test_panel_builder.py
# =============================================================

from datetime import date

import numpy as np
import pytest

from services.errors import IngestionError
from services.panel_builder import (
    DailyPanel,
    FirearmType,
    LicenseKind,
    LicenseRecord,
    LogSeries,
    TransactionRecord,
    aggregate_daily,
    ingest_licenses,
    ingest_transactions,
    inverse_log_offset,
    load_licenses,
    load_transactions,
    log_offset,
    transactions_frame,
)


def _row(day="2016-06-12", firearm_type="TAWRifle", **extra):
    row = {
        "date": day,
        "firearm_type": firearm_type,
        "dealer_id": "D1",
        "dealer_zip": "98101",
        "purchaser_id": "P1",
        "make": "Acme",
        "model": "M1",
    }
    row.update(extra)
    return row


# ------------------------------------------------------------------ #
# Log transform
# ------------------------------------------------------------------ #

def test_log_offset_of_zero_is_finite():
    assert log_offset(0) == pytest.approx(np.log(0.1))


def test_inverse_log_offset_round_trips_counts():
    counts = np.array([0, 1, 7, 250])
    assert inverse_log_offset(log_offset(counts)) == pytest.approx(counts)


def test_inverse_log_offset_never_negative():
    assert inverse_log_offset(-10.0) == 0.0


def test_log_offset_rejects_bad_inputs():
    with pytest.raises(ValueError):
        log_offset(-1)
    with pytest.raises(ValueError):
        log_offset(3, offset=0.0)


def test_log_series_carries_its_offset():
    series = LogSeries.from_counts([0, 4], offset=1.0)
    assert series.values == pytest.approx(np.log([1.0, 5.0]))
    assert series.to_counts() == pytest.approx([0.0, 4.0])
    assert len(series) == 2


# ------------------------------------------------------------------ #
# Ingestion
# ------------------------------------------------------------------ #

def test_ingest_transactions_rejects_with_reasons():
    rows = [
        _row(),
        _row(firearm_type="Machine Gun"),
        _row(day="not-a-date"),
        _row(firearm_type="Crossbow"),
        _row(day="2010-01-01"),
    ]
    result = ingest_transactions(rows, study_start=date(2014, 1, 1))
    assert result.rows_read == 5
    assert result.accepted == 1
    assert result.rejected == {
        "excluded_type": 1,
        "bad_date": 1,
        "unknown_firearm_type": 1,
        "out_of_study_range": 1,
    }
    assert [e.row for e in result.errors] == [1, 2, 3, 4]


def test_ingest_transactions_keeps_and_counts_duplicates():
    result = ingest_transactions([_row(), _row(), _row(purchaser_id="P2")])
    assert result.accepted == 3
    assert result.duplicates == 1


def test_ingest_transactions_drops_non_sales_when_type_column_present():
    rows = [_row(transaction_type="sale"), _row(transaction_type="transfer")]
    result = ingest_transactions(rows)
    assert result.accepted == 1
    assert result.rejected == {"non_sale": 1}


def test_ingest_transactions_normalizes_fields():
    result = ingest_transactions([_row(firearm_type="non-taw rifle", dealer_zip="9810")])
    record = result.records[0]
    assert record.firearm_type is FirearmType.NON_TAW_RIFLE
    assert record.dealer_zip is None


def test_ingest_transactions_missing_column_is_fatal():
    with pytest.raises(IngestionError):
        ingest_transactions([{"date": "2016-01-01"}])


def test_ingest_licenses():
    rows = [
        {"issue_date": "2016-06-01", "kind": "New"},
        {"issue_date": "2016-06-01", "kind": "renewal"},
        {"issue_date": "2016-06-01", "kind": "Temporary"},
    ]
    result = ingest_licenses(rows)
    assert [r.kind for r in result.records] == [LicenseKind.NEW, LicenseKind.RENEWAL]
    assert result.rejected == {"unknown_kind": 1}


def test_load_transactions_reads_bundle_csv_with_header(tmp_path):
    path = tmp_path / "transactions.csv"
    with open(path, "w") as f:
        f.write("# impactlens seed=3\n")
        transactions_frame([
            TransactionRecord(date(2016, 6, 12), FirearmType.HANDGUN, "D1", "98101", "P1", "Acme", "X"),
        ]).to_csv(f, index=False)
    result = load_transactions(str(path))
    assert result.accepted == 1
    assert result.records[0].firearm_type is FirearmType.HANDGUN


def test_load_missing_file_raises(tmp_path):
    with pytest.raises(IngestionError):
        load_licenses(str(tmp_path / "absent.csv"))


@pytest.mark.parametrize("content", [
    b"# impactlens seed=1 \xff\nissue_date,kind\n2016-01-04,new\n",
    b"issue_date,kind\n2016-01-04,n\xffew\n",
], ids=["header", "body"])
def test_load_invalid_utf8_is_an_ingestion_error(tmp_path, content):
    path = tmp_path / "licenses.csv"
    path.write_bytes(content)
    with pytest.raises(IngestionError, match="unreadable"):
        load_licenses(str(path))


# ------------------------------------------------------------------ #
# Aggregation
# ------------------------------------------------------------------ #

def test_aggregate_daily_fills_every_day_and_reports_exclusions():
    tx = ingest_transactions([
        _row(day="2016-06-10", firearm_type="Handgun"),
        _row(day="2016-06-12", firearm_type="TAWRifle"),
        _row(day="2016-06-12", firearm_type="TAWRifle", purchaser_id="P9"),
        _row(day="2016-07-01", firearm_type="Shotgun"),
    ]).records
    licenses = [
        LicenseRecord(date(2016, 6, 11), LicenseKind.NEW),
        LicenseRecord(date(2016, 6, 11), LicenseKind.RENEWAL),
    ]
    panel = aggregate_daily(tx, licenses, date(2016, 6, 10), date(2016, 6, 12))
    assert panel.n_days == 3
    assert panel.series_names == ("Handgun", "TAWRifle", "NonTAWRifle", "Shotgun")
    assert panel.counts.tolist() == [[1, 0, 0, 0], [0, 0, 0, 0], [0, 2, 0, 0]]
    assert panel.new_licenses.tolist() == [0, 1, 0]
    assert panel.renewal_licenses.tolist() == [0, 1, 0]
    assert panel.excluded == {"transactions_out_of_range": 1}


def test_aggregate_daily_rejects_reversed_range():
    with pytest.raises(ValueError):
        aggregate_daily([], [], date(2016, 6, 12), date(2016, 6, 10))


def _panel(n_days=10):
    counts = np.arange(n_days * 2).reshape(n_days, 2)
    return DailyPanel(
        start_date=date(2016, 1, 1),
        counts=counts,
        new_licenses=np.ones(n_days, dtype=int),
        renewal_licenses=np.zeros(n_days, dtype=int),
        series_names=("A", "B"),
    )


def test_panel_is_read_only():
    panel = _panel()
    with pytest.raises(ValueError):
        panel.counts[0, 0] = 5


def test_panel_validation():
    with pytest.raises(ValueError):
        DailyPanel(date(2016, 1, 1), [[-1]], [0], [0], ("A",))
    with pytest.raises(ValueError):
        DailyPanel(date(2016, 1, 1), [[1]], [0, 0], [0], ("A",))
    with pytest.raises(ValueError):
        DailyPanel(date(2016, 1, 1), [[1, 2]], [0], [0], ("A", "A"))


def test_panel_before_and_window():
    panel = _panel()
    head = panel.before(date(2016, 1, 4))
    assert head.n_days == 3
    assert head.end_date == date(2016, 1, 3)
    middle = panel.window(date(2016, 1, 3), date(2016, 1, 5))
    assert middle.counts[:, 0].tolist() == [4, 6, 8]
    with pytest.raises(ValueError):
        panel.before(date(2016, 1, 1))


def test_panel_log_views():
    panel = _panel()
    assert panel.log_sales() == pytest.approx(np.log(panel.counts + 0.1))
    assert panel.log_new_licenses() == pytest.approx(np.full(10, np.log(1.1)))
    assert panel.index_of(date(2016, 1, 10)) == 9
    with pytest.raises(ValueError):
        panel.index_of(date(2016, 1, 11))


def test_panel_to_frame_columns():
    frame = _panel(3).to_frame()
    assert list(frame.columns) == ["date", "A", "B", "new_licenses", "renewal_licenses"]
    assert frame["date"].tolist() == ["2016-01-01", "2016-01-02", "2016-01-03"]
