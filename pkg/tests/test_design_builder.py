# =============================================================
# ImpactLens - Design Builder Tests
# =============================================================

from datetime import date

import numpy as np
import pytest

from services.design_builder import (
    CalendarBasis,
    DesignLayout,
    ModelSpec,
    build_design,
    build_designs,
    calendar_block,
    calendar_features,
    calendar_labels,
    collinear_columns,
    day_of_year_index,
    federal_holidays,
    future_dates,
    lag_matrix,
    load_holidays,
    time_effect_grid,
    week_of_year,
)
from services.errors import DesignError
from services.panel_builder import DailyPanel
from tests.conftest import ar_spec


def _random_panel(start=date(2016, 6, 1), n_days=60, seed=0):
    rng = np.random.default_rng(seed)
    return DailyPanel(
        start_date=start,
        counts=rng.poisson(30, size=(n_days, 2)),
        new_licenses=rng.poisson(5, size=n_days),
        renewal_licenses=rng.poisson(3, size=n_days),
        series_names=("A", "B"),
    )


# ------------------------------------------------------------------ #
# ModelSpec
# ------------------------------------------------------------------ #

def test_default_spec_label():
    assert ModelSpec().label() == "dow+hol+woy+lin+quad|y28|z10"
    assert ModelSpec().max_lag == 28


def test_week_and_day_of_year_are_exclusive():
    with pytest.raises(ValueError):
        ModelSpec(use_week_of_year=True, use_day_of_year=True)


def test_with_lags_keeps_time_effects():
    spec = ModelSpec().with_lags(sales_lags=3)
    assert spec.sales_lags == 3
    assert spec.license_lags == 10
    assert spec.use_week_of_year


def test_time_effect_grid_has_six_weekday_holiday_specs():
    grid = time_effect_grid(sales_lags=2, license_lags=1)
    assert len(grid) == 6
    assert all(s.use_day_of_week and s.use_holiday for s in grid)
    assert sum(s.use_day_of_year for s in grid) == 3
    assert {s.label() for s in grid} == {
        "dow+hol+woy|y2|z1", "dow+hol+doy|y2|z1",
        "dow+hol+woy+lin|y2|z1", "dow+hol+doy+lin|y2|z1",
        "dow+hol+woy+lin+quad|y2|z1", "dow+hol+doy+lin+quad|y2|z1",
    }


# ------------------------------------------------------------------ #
# Calendar
# ------------------------------------------------------------------ #

def test_calendar_labels_default_order():
    labels = calendar_labels(ModelSpec())
    assert labels[:6] == ["dow_Tue", "dow_Wed", "dow_Thu", "dow_Fri", "dow_Sat", "dow_Sun"]
    assert labels[6] == "holiday"
    assert labels[7] == "woy_02" and labels[57] == "woy_52"
    assert labels[-2:] == ["trend", "trend_sq"]
    assert len(labels) == 60


def test_day_of_year_labels():
    labels = calendar_labels(ModelSpec(use_week_of_year=False, use_day_of_year=True))
    assert "doy_002" in labels and "doy_365" in labels and "doy_001" not in labels


def test_reference_day_has_all_zero_indicators():
    # Monday in week 1, not a holiday
    spec = ModelSpec(use_linear_trend=False, use_quadratic_trend=False)
    basis = CalendarBasis(origin=date(2019, 1, 1), scale=365)
    row = calendar_block([date(2019, 1, 7)], spec, basis)[0]
    assert row.shape == (58,)
    assert not row.any()


def test_weekday_and_week_columns():
    spec = ModelSpec(use_holiday=False, use_linear_trend=False, use_quadratic_trend=False)
    basis = CalendarBasis(origin=date(2019, 1, 1), scale=365)
    labels = calendar_labels(spec)
    row = calendar_block([date(2019, 1, 19)], spec, basis)[0]   # Saturday, day 19 -> week 3
    on = [labels[i] for i in np.nonzero(row)[0]]
    assert on == ["dow_Sat", "woy_03"]
    assert calendar_features(date(2019, 1, 19), spec, basis).tolist() == row.tolist()


def test_week_of_year_folds_last_days():
    days = [date(2016, 12, 31), date(2015, 12, 31), date(2015, 12, 23), date(2015, 1, 8)]
    assert week_of_year(days).tolist() == [52, 52, 51, 2]


def test_day_of_year_pools_leap_day():
    days = [date(2016, 2, 28), date(2016, 2, 29), date(2016, 3, 1), date(2015, 3, 1), date(2016, 12, 31)]
    assert day_of_year_index(days).tolist() == [59, 59, 60, 60, 365]


def _on_columns(spec, days):
    basis = CalendarBasis(origin=date(2015, 1, 1), scale=365)
    labels = calendar_labels(spec)
    block = calendar_block(days, spec, basis)
    return [[labels[i] for i in np.nonzero(row)[0]] for row in block]


def test_calendar_block_puts_year_end_in_week_52():
    spec = ModelSpec(use_day_of_week=False, use_holiday=False, use_linear_trend=False, use_quadratic_trend=False)
    on = _on_columns(spec, [date(2015, 12, 23), date(2015, 12, 31), date(2016, 12, 30), date(2016, 12, 31)])
    assert on == [["woy_51"], ["woy_52"], ["woy_52"], ["woy_52"]]


def test_calendar_block_pools_leap_day_with_feb_28():
    spec = ModelSpec(
        use_day_of_week=False, use_holiday=False, use_week_of_year=False,
        use_day_of_year=True, use_linear_trend=False, use_quadratic_trend=False,
    )
    on = _on_columns(spec, [date(2016, 2, 28), date(2016, 2, 29), date(2016, 3, 1), date(2015, 3, 1), date(2016, 12, 31)])
    assert on == [["doy_059"], ["doy_059"], ["doy_060"], ["doy_060"], ["doy_365"]]


def test_default_layout_width():
    # 28 sales lags, 6 weekday, 1 holiday, 51 week, 2 trend, 2 x 10 license lags, intercept
    layout = DesignLayout(ModelSpec(), CalendarBasis(origin=date(2015, 1, 1), scale=365))
    assert layout.n_columns == 1 + 28 + 20 + 6 + 51 + 1 + 2 == 109


def test_trend_columns_use_basis():
    spec = ModelSpec(
        use_day_of_week=False, use_holiday=False, use_week_of_year=False,
        use_linear_trend=True, use_quadratic_trend=True,
    )
    basis = CalendarBasis(origin=date(2016, 1, 1), scale=10)
    block = calendar_block([date(2016, 1, 5)], spec, basis)
    assert block[0] == pytest.approx([0.5, 0.25])


def test_federal_holidays_include_observed_and_fixed_dates():
    days = federal_holidays(2015)
    assert date(2015, 7, 3) in days      # observed
    assert date(2015, 7, 4) in days      # fixed
    assert date(2015, 11, 26) in days    # Thanksgiving
    assert date(2015, 7, 6) not in days


def test_custom_holidays_override_federal_calendar(tmp_path):
    path = tmp_path / "holidays.txt"
    path.write_text("# local\n2016-06-15\n\n2016-06-20  # fair\n")
    days = load_holidays(str(path))
    assert days == frozenset({date(2016, 6, 15), date(2016, 6, 20)})
    basis = CalendarBasis(origin=date(2016, 1, 1), scale=1, holidays=days)
    assert basis.is_holiday(date(2016, 6, 15))
    assert not basis.is_holiday(date(2016, 7, 4))


def test_load_holidays_rejects_bad_lines(tmp_path):
    path = tmp_path / "holidays.txt"
    path.write_text("2016-13-01\n")
    with pytest.raises(DesignError):
        load_holidays(str(path))


# ------------------------------------------------------------------ #
# Lags and rank
# ------------------------------------------------------------------ #

def test_lag_matrix():
    out = lag_matrix(np.arange(5.0), 2, 2)
    assert out.tolist() == [[1.0, 0.0], [2.0, 1.0], [3.0, 2.0]]
    assert lag_matrix(np.arange(5.0), 0, 2).shape == (3, 0)


def test_collinear_columns_finds_duplicate():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 2))
    rows = np.column_stack([x, x[:, 0]])
    bad = collinear_columns(rows, ["a", "b", "c"])
    assert len(bad) == 1 and bad[0] in ("a", "c")
    assert collinear_columns(x, ["a", "b"]) == []


def test_layout_column_order():
    layout = DesignLayout(spec=ar_spec(2, 1), basis=CalendarBasis(date(2016, 1, 1), 10))
    assert layout.labels == ("lag_y_1", "lag_y_2", "lag_new_1", "lag_renew_1", "intercept")


def test_layout_assemble_broadcasts_leading_dims():
    layout = DesignLayout(spec=ar_spec(2, 1), basis=CalendarBasis(date(2016, 1, 1), 10))
    rows = layout.assemble(np.ones((4, 2)), np.zeros((1, 0)), np.full((1, 1), 2.0), np.full((1, 1), 3.0))
    assert rows.shape == (4, 5)
    assert rows[0].tolist() == [1.0, 1.0, 2.0, 3.0, 1.0]


# ------------------------------------------------------------------ #
# Designs
# ------------------------------------------------------------------ #

def test_build_designs_shapes_and_values():
    panel = _random_panel()
    designs = build_designs(panel, ar_spec(2, 1))
    assert len(designs) == 2
    d = designs[1]
    assert d.series_name == "B"
    assert d.n_rows == panel.n_days - 2
    assert d.date_index == date(2016, 6, 3)
    y = panel.log_sales()[:, 1]
    assert d.target == pytest.approx(y[2:])
    assert d.rows[:, 0] == pytest.approx(y[1:-1])
    assert d.rows[:, 1] == pytest.approx(y[:-2])
    assert d.rows[:, 2] == pytest.approx(panel.log_new_licenses()[1:-1])
    assert np.all(d.rows[:, -1] == 1.0)


def test_build_design_single_series_matches_system():
    panel = _random_panel()
    single = build_design(panel, "A", ar_spec(2, 1))
    assert single.rows == pytest.approx(build_designs(panel, ar_spec(2, 1))[0].rows)


def test_build_designs_needs_more_days_than_lags():
    with pytest.raises(DesignError):
        build_designs(_random_panel(n_days=5), ar_spec(5, 0))


def test_rank_deficient_design_names_columns():
    spec = ar_spec(1, 0).model_copy(update={"use_holiday": True, "holiday_dates": frozenset()})
    with pytest.raises(DesignError) as exc:
        build_designs(_random_panel(), spec)
    assert "holiday" in exc.value.collinear_columns


def test_future_dates():
    assert future_dates(date(2016, 12, 30), 3) == [date(2016, 12, 31), date(2017, 1, 1), date(2017, 1, 2)]
