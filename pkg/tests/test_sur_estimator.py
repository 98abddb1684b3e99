# =============================================================
# ImpactLens - SUR Estimator Tests
# =============================================================

from datetime import date

import numpy as np
import pytest

from services.design_builder import CalendarBasis, DesignLayout, DesignMatrix, build_designs
from services.errors import DesignError, EstimationError
from services.sur_estimator import fit_ols, fit_sur, ols_solve, r_squared
from tests.conftest import ar_spec


def _design(rows, target, name, start=date(2016, 1, 1)):
    layout = DesignLayout(spec=ar_spec(0, 0), basis=CalendarBasis(start, len(target)))
    labels = tuple(f"x{i}" for i in range(rows.shape[1]))
    return DesignMatrix(rows=rows, column_labels=labels, target=target, date_index=start,
                        series_name=name, layout=layout)


def _correlated_system(n=300, seed=4):
    rng = np.random.default_rng(seed)
    x1 = np.column_stack([rng.normal(size=n), np.ones(n)])
    x2 = np.column_stack([rng.normal(size=n), rng.normal(size=n), np.ones(n)])
    e = rng.multivariate_normal([0, 0], [[1.0, 0.8], [0.8, 1.0]], size=n)
    y1 = x1 @ [1.5, 0.5] + e[:, 0]
    y2 = x2 @ [-1.0, 2.0, 0.3] + e[:, 1]
    return _design(x1, y1, "A"), _design(x2, y2, "B")


def test_ols_solve_matches_lstsq():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    coef, _ = ols_solve(x, y)
    assert coef == pytest.approx(np.linalg.lstsq(x, y, rcond=None)[0])


def test_fit_ols_rejects_rank_deficiency():
    x = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(DesignError):
        fit_ols(_design(x, np.arange(10.0), "A"))


def test_identity_sigma_reproduces_ols():
    d1, d2 = _correlated_system()
    fit = fit_sur([d1, d2], sigma=np.eye(2))
    assert fit.coefficients[0] == pytest.approx(fit_ols(d1).coefficients)
    assert fit.coefficients[1] == pytest.approx(fit_ols(d2).coefficients)


def test_identical_regressors_give_ols_coefficients():
    d1, d2 = _correlated_system()
    shared = _design(d1.rows, d2.target, "B")
    fit = fit_sur([d1, shared])
    assert not fit.fell_back
    assert fit.coefficients[1] == pytest.approx(fit_ols(shared).coefficients, abs=1e-8)


def test_sur_recovers_coefficients_and_is_more_precise():
    d1, d2 = _correlated_system(n=2000)
    fit = fit_sur([d1, d2])
    assert fit.coefficients[0] == pytest.approx([1.5, 0.5], abs=0.1)
    assert fit.coefficients[1] == pytest.approx([-1.0, 2.0, 0.3], abs=0.1)
    assert fit.sigma[0, 1] == pytest.approx(0.8, abs=0.1)
    ols_slope_var = fit_ols(d1).coef_covariance[0, 0]
    sur_slope_var = fit.coef_covariance[0, 0]
    assert sur_slope_var < ols_slope_var, "correlated errors should tighten the slope"


@pytest.mark.parametrize("seed", range(20))
def test_shared_regressors_match_ols_on_many_panels(seed):
    rng = np.random.default_rng(100 + seed)
    n = 120
    x = np.column_stack([rng.normal(size=n), rng.normal(size=n), np.ones(n)])
    e = rng.multivariate_normal([0, 0, 0], [[1.0, 0.6, 0.3], [0.6, 1.0, 0.5], [0.3, 0.5, 1.0]], size=n)
    designs = [_design(x, x @ beta + e[:, j], name) for j, (beta, name) in enumerate([
        ([1.0, -0.5, 0.2], "A"), ([0.3, 0.8, -1.0], "B"), ([-0.7, 0.1, 0.4], "C"),
    ])]
    fit = fit_sur(designs)
    for coef, d in zip(fit.coefficients, designs):
        assert np.max(np.abs(coef - fit_ols(d).coefficients)) < 1e-8


@pytest.mark.slow
def test_sur_has_lower_coefficient_mse_than_ols_over_many_panels():
    truth = [np.array([1.5, 0.5]), np.array([-1.0, 2.0, 0.3])]
    sur_se, ols_se = [], []
    for seed in range(50):
        d1, d2 = _correlated_system(n=200, seed=1000 + seed)
        fit = fit_sur([d1, d2])
        sur_se.append(sum(np.sum((c - t) ** 2) for c, t in zip(fit.coefficients, truth)))
        ols = [fit_ols(d1).coefficients, fit_ols(d2).coefficients]
        ols_se.append(sum(np.sum((c - t) ** 2) for c, t in zip(ols, truth)))
    assert np.mean(sur_se) <= np.mean(ols_se)


def test_singular_sigma_falls_back_to_ols():
    d1, _ = _correlated_system()
    twin = _design(d1.rows, d1.target, "B")
    fit = fit_sur([d1, twin])
    assert fit.fell_back
    assert fit.coefficients[0] == pytest.approx(fit_ols(d1).coefficients)


def test_sigma_shape_is_checked():
    d1, d2 = _correlated_system()
    with pytest.raises(EstimationError):
        fit_sur([d1, d2], sigma=np.eye(3))


def test_equations_must_share_dates():
    d1, d2 = _correlated_system()
    shifted = _design(d2.rows, d2.target, "B", start=date(2016, 1, 2))
    with pytest.raises(EstimationError):
        fit_sur([d1, shifted])
    with pytest.raises(EstimationError):
        fit_sur([])


def test_fit_on_synthetic_panel(synth_panel, synth_config):
    designs = build_designs(synth_panel, ar_spec(2, 1))
    fit = fit_sur(designs)
    assert fit.series_names == synth_panel.series_names
    assert fit.n_rows == synth_panel.n_days - 2
    assert fit.first_date == date(2014, 1, 3)
    assert fit.last_date == synth_panel.end_date
    assert fit.residuals.shape == (fit.n_rows, 4)
    assert fit.coef_covariance.shape == (20, 20)
    lag1 = [c[0] for c in fit.coefficients]
    assert np.mean(lag1) == pytest.approx(synth_config.sales_coefs[0][0], abs=0.15)
    assert r_squared(fit) == pytest.approx(list(fit.r_squared))
    assert all(r is not None and 0.0 <= r <= 1.0 for r in fit.ols_r_squared)


def test_coefficient_table_and_sigma_frame(synth_panel):
    fit = fit_sur(build_designs(synth_panel, ar_spec(1, 0)))
    table = fit.coefficient_table()
    assert list(table.columns) == ["series", "term", "estimate", "std_error"]
    assert len(table) == 4 * 2
    assert table["term"].tolist()[:2] == ["lag_y_1", "intercept"]
    assert (table["std_error"] > 0).all()
    frame = fit.sigma_frame()
    assert list(frame.index) == list(synth_panel.series_names)
    assert frame.to_numpy() == pytest.approx(frame.to_numpy().T)
