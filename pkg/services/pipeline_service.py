# =============================================================
# ImpactLens - Pipeline Service
#
# Wires the analysis stages together for the CLI:
#   ingest -> (select) -> fit -> forecast -> effects
#   plus classify-eval, describe and simulate
#
# Each stage writes its tables into the open ReportBundle. The
# bundle is published only if every requested stage succeeds.
# =============================================================

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Callable

import pandas as pd
from pydantic import ValidationError

from config.settings import RunConfig
from reports.models import (
    BreakevenRow,
    ClassifierSummary,
    EffectRow,
    EffectsReport,
    EquationSummary,
    FitSummary,
    HoldoutRow,
    HoldoutSummary,
    IngestionSummary,
    LagSelectionSummary,
    PanelSummary,
    SelectionSummary,
)
from reports.writer import ReportBundle
from services import classifier_eval, descriptives
from services.design_builder import CalendarBasis, ModelSpec, build_designs, load_holidays, time_effect_grid
from services.effect_service import (
    IMMEDIATE,
    SHORT_RUN,
    EffectEstimate,
    breakeven_by_series,
    effects_frame,
    estimate_effect,
    holdout_validation,
    summarize_effects,
)
from services.errors import ConfigError, DescriptivesError, ImpactLensError
from services.forward_bootstrap import ForecastResult, forecast_counterfactual
from services.panel_builder import (
    DailyPanel,
    FirearmType,
    IngestionResult,
    aggregate_daily,
    licenses_frame,
    load_licenses,
    load_transactions,
    transactions_frame,
)
from services.spec_selector import LagSelection, compare_time_specs, cv_table, select_specification
from services.sur_estimator import SurFit, fit_sur
from services.synth_generator import SynthConfig, generate_panel, panel_records

logger = logging.getLogger(__name__)

COMMANDS = ("ingest", "fit", "select", "forecast", "effects", "classify-eval", "describe", "simulate", "report")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_STAGE_ERROR = 2


@dataclass
class _Inputs:
    transactions: IngestionResult
    licenses: IngestionResult
    panel: DailyPanel


class ImpactPipeline:
    """Runs stages for one RunConfig; intermediate results are cached per instance."""

    def __init__(self, config: RunConfig, bundle: ReportBundle):
        self._cfg = config
        self._bundle = bundle
        self._inputs: _Inputs | None = None
        self._spec: ModelSpec | None = None
        self._fit: SurFit | None = None
        self._forecast: ForecastResult | None = None
        self._holidays: frozenset[date] | None = None
        self._holidays_loaded = False

    # ------------------------------------------------------------------ #
    # Shared inputs
    # ------------------------------------------------------------------ #

    def _require(self, value, name: str):
        if value is None:
            raise ConfigError(f"{name} is not configured")
        return value

    def inputs(self) -> _Inputs:
        if self._inputs is not None:
            return self._inputs
        paths = self._cfg.paths
        tx_path = self._require(paths.transactions, "TRANSACTIONS_PATH")
        lic_path = self._require(paths.licenses, "LICENSES_PATH")
        transactions = load_transactions(tx_path, self._cfg.study_start, self._cfg.study_end)
        licenses = load_licenses(lic_path)
        self._bundle.add_input(tx_path)
        self._bundle.add_input(lic_path)
        if not transactions.records:
            raise ConfigError(f"no usable transactions in {tx_path}")

        start = self._cfg.study_start or min(r.date for r in transactions.records)
        end = self._cfg.study_end or max(r.date for r in transactions.records)
        panel = aggregate_daily(transactions.records, licenses.records, start, end)
        self._inputs = _Inputs(transactions, licenses, panel)
        return self._inputs

    def holidays(self) -> frozenset[date] | None:
        if not self._holidays_loaded:
            path = self._cfg.paths.holidays
            if path:
                self._holidays = load_holidays(path)
                self._bundle.add_input(path)
            self._holidays_loaded = True
        return self._holidays

    def cutoff(self) -> date:
        cutoff = self._require(self._cfg.cutoff, "CUTOFF")
        panel = self.inputs().panel
        if not panel.start_date < cutoff <= panel.end_date:
            raise ConfigError(f"cutoff {cutoff} is outside the data range {panel.start_date}..{panel.end_date}")
        return cutoff

    def training_panel(self) -> DailyPanel:
        panel = self.inputs().panel
        return panel.before(self.cutoff()) if self._cfg.cutoff else panel

    # ------------------------------------------------------------------ #
    # Stages
    # ------------------------------------------------------------------ #

    def ingest(self) -> None:
        data = self.inputs()
        panel = data.panel
        for name, result, path in (
            ("ingest_transactions.json", data.transactions, self._cfg.paths.transactions),
            ("ingest_licenses.json", data.licenses, self._cfg.paths.licenses),
        ):
            self._bundle.write_json(name, IngestionSummary(**result.summary(path)))
        self._bundle.write_table("panel.csv", panel.to_frame())
        self._bundle.write_json("panel_summary.json", PanelSummary(
            start_date=panel.start_date.isoformat(),
            end_date=panel.end_date.isoformat(),
            n_days=panel.n_days,
            series=list(panel.series_names),
            totals={name: int(panel.counts[:, j].sum()) for j, name in enumerate(panel.series_names)},
            excluded=dict(panel.excluded),
        ))

    def select(self) -> ModelSpec:
        model = self._cfg.model
        panel = self.training_panel()
        base = model.spec(self.holidays())
        workers = self._cfg.bootstrap.workers
        chosen, sales, licenses = select_specification(
            panel, base, model.max_sales_lag, model.max_license_lag, k=model.cv_folds, workers=workers,
        )
        grid = [
            s.model_copy(update={"holiday_dates": chosen.holiday_dates})
            for s in time_effect_grid(chosen.sales_lags, chosen.license_lags)
        ]
        reports = compare_time_specs(
            panel, grid, k=model.cv_folds,
            seed=self._cfg.seed, workers=workers,
        )
        self._bundle.write_table("cv_table.csv", cv_table(reports), index=True)
        self._bundle.write_table("lag_path.csv", _lag_path_frame([sales, licenses]))
        self._bundle.write_json("selection.json", SelectionSummary(
            chosen_spec=chosen.label(),
            sales=LagSelectionSummary(**vars(sales)),
            license=LagSelectionSummary(**vars(licenses)),
        ))
        self._spec = chosen
        return chosen

    def spec(self) -> ModelSpec:
        if self._spec is None:
            self._spec = self.select() if self._cfg.model.auto_select else self._cfg.model.spec(self.holidays())
        return self._spec

    def fit(self) -> SurFit:
        if self._fit is not None:
            return self._fit
        panel = self.training_panel()
        spec = self.spec()
        fit = fit_sur(build_designs(panel, spec, CalendarBasis.for_panel(panel, spec)))
        self._bundle.write_table("coefficients.csv", fit.coefficient_table())
        self._bundle.write_table("sigma.csv", fit.sigma_frame(), index=True)
        self._bundle.write_json("fit_summary.json", FitSummary(
            spec=spec.label(),
            first_date=fit.first_date.isoformat(),
            last_date=fit.last_date.isoformat(),
            n_rows=fit.n_rows,
            n_columns=[len(c) for c in fit.coefficients],
            fell_back=fit.fell_back,
            equations=[
                EquationSummary(series=name, r_squared=r2, ols_r_squared=ols)
                for name, r2, ols in zip(fit.series_names, fit.r_squared, fit.ols_r_squared)
            ],
        ))
        self._fit = fit
        return fit

    def forecast(self) -> ForecastResult:
        if self._forecast is not None:
            return self._forecast
        cutoff = self.cutoff()
        fit = self.fit()
        boot = self._cfg.bootstrap
        result = forecast_counterfactual(
            fit,
            self.inputs().panel,
            cutoff,
            self._cfg.horizon,
            replicates=boot.replicates,
            seed=self._cfg.seed,
            workers=boot.workers,
        )
        self._bundle.write_table("forecast.csv", result.to_frame((boot.confidence,)))
        self._bundle.write_draws("forecast_draws.bin", result.draws)
        self._forecast = result
        return result

    def effects(self) -> list[EffectEstimate]:
        forecast = self.forecast()
        panel = self.inputs().panel
        level = self._cfg.bootstrap.confidence
        estimates: list[EffectEstimate] = []
        for window in self._cfg.windows:
            estimates.extend(estimate_effect(panel, forecast, window, level))

        by_label = {}
        for e in estimates:
            by_label.setdefault(e.window.label, []).append(e)
        breakeven = []
        if IMMEDIATE.label in by_label and SHORT_RUN.label in by_label:
            for series, value in breakeven_by_series(by_label[IMMEDIATE.label], by_label[SHORT_RUN.label]).items():
                breakeven.append(BreakevenRow(series=series, weeks=value.weeks, rounded_weeks=value.rounded))

        holdout = None
        if self._cfg.holdout_cutoff:
            report = holdout_validation(
                panel, self.spec(), self._cfg.holdout_cutoff, self._cfg.holdout_horizon,
                replicates=self._cfg.bootstrap.replicates, seed=self._cfg.seed,
            )
            self._bundle.write_table("holdout_daily.csv", report.daily)
            holdout = HoldoutSummary(
                cutoff=report.cutoff.isoformat(),
                horizon=report.horizon,
                pooled_cumulative_pct_error=report.pooled_cumulative_pct_error,
                series=[HoldoutRow(**vars(s)) for s in report.series],
            )

        frame = effects_frame(estimates)
        self._bundle.write_table("effects.csv", frame)
        self._bundle.write_text("effects_summary.txt", summarize_effects(estimates))
        self._bundle.write_json("effects.json", EffectsReport(
            cutoff=forecast.cutoff.isoformat(),
            replicates=forecast.n_replicates,
            level=level,
            effects=[_effect_row(e) for e in estimates],
            breakeven=breakeven,
            holdout=holdout,
        ))
        return estimates

    def classify_eval(self) -> None:
        path = self._require(self._cfg.paths.labels, "LABELS_PATH")
        items = classifier_eval.load_labels(path)
        self._bundle.add_input(path)
        report = classifier_eval.evaluate_classifier(items)
        frame = report.to_frame()
        self._bundle.write_table("classifier_metrics.csv", frame)
        self._bundle.write_json("classifier.json", ClassifierSummary(
            n_items=len(items),
            matrices=frame.astype(object).where(frame.notna(), None).to_dict("records"),
        ))

    def describe(self) -> None:
        data = self.inputs()
        records = data.transactions.records
        tx = transactions_frame(records)
        dcfg = self._cfg.describe
        write = self._bundle.write_table

        write("annual_totals.csv", descriptives.annual_totals(tx), index=True)
        write("annual_licenses.csv", descriptives.annual_license_totals(data.licenses.records), index=True)
        monthly = descriptives.monthly_series(tx)
        write("monthly_counts.csv", monthly)
        write("weekly_overlay.csv", descriptives.weekly_overlay(tx))

        newly = descriptives.newly_observed_purchasers(tx)
        write("newly_observed_weekly.csv", newly.weekly)
        new_only = newly.flags[newly.flags["newly_observed"]]
        write("newly_observed_weekly_overlay.csv", descriptives.weekly_overlay(new_only))

        if dcfg.spike_start and dcfg.spike_end:
            before = descriptives.preceding_window(dcfg.spike_start, dcfg.spike_end)
            rifles = (FirearmType.TAW_RIFLE, FirearmType.NON_TAW_RIFLE)
            reports = [
                descriptives.purchaser_concentration(tx, *window, firearm_types=rifles)
                for window in ((dcfg.spike_start, dcfg.spike_end), before)
            ]
            write("concentration.csv", descriptives.concentration_frame(reports))
            shares = newly.share_in_window(dcfg.spike_start, dcfg.spike_end)
            write("newly_observed_share.csv", pd.DataFrame(
                [{"firearm_type": k, "share": v} for k, v in shares.items()]
            ))

        if dcfg.ratio_year_from is not None and dcfg.ratio_year_to is not None:
            y0, y1 = dcfg.ratio_year_from, dcfg.ratio_year_to
            changes = [
                descriptives.monthly_change(monthly, name, y0, y1, months)
                for name in data.panel.series_names
                for months in (None, range(1, 7))
            ]
            write("monthly_change.csv", pd.DataFrame([vars(c) for c in changes]))
            ratios = descriptives.retailer_sales_ratios(tx, y0, y1, coverage=dcfg.ratio_coverage)
            write("retailer_ratios.csv", descriptives.ratios_frame(ratios))
            write("retailer_ratio_histogram.csv", descriptives.ratio_histogram(ratios))
            if self._cfg.paths.covariates:
                self._covariate_tables(ratios)

        if self._cfg.cutoff:
            panel = data.panel
            first = max(panel.start_date, self._cfg.cutoff - timedelta(days=60))
            last = min(panel.end_date, self._cfg.cutoff + timedelta(days=self._cfg.horizon))
            if first > last:
                raise DescriptivesError(
                    f"cutoff {self._cfg.cutoff} is more than 60 days outside the panel "
                    f"{panel.start_date}..{panel.end_date}"
                )
            window = panel.window(first, last).to_frame()
            write("licenses_around_cutoff.csv", window[["date", "new_licenses", "renewal_licenses"]])

    def _covariate_tables(self, ratios: list[descriptives.RetailerRatio]) -> None:
        covariates: dict[str, dict[str, float]] = {}
        for path in self._cfg.paths.covariates:
            for name, table in descriptives.load_covariates(path).items():
                if name in covariates:
                    raise DescriptivesError(f"covariate {name!r} appears in more than one covariate file")
                covariates[name] = table
            self._bundle.add_input(path)

        rows, scatters = [], []
        for name, table in covariates.items():
            for a in descriptives.covariate_association(ratios, table).values():
                rows.append({
                    "covariate": name, "firearm_type": a.firearm_type, "n": a.n, "r": a.r,
                    "slope": a.slope, "slope_stderr": a.slope_stderr,
                    "undefined_ratio_excluded": a.undefined_ratio_excluded,
                    "missing_covariate_excluded": a.missing_covariate_excluded,
                })
                scatters.append(a.scatter.assign(covariate=name, firearm_type=a.firearm_type))
        columns = [
            "covariate", "firearm_type", "n", "r", "slope", "slope_stderr",
            "undefined_ratio_excluded", "missing_covariate_excluded",
        ]
        self._bundle.write_table("covariate_association.csv", pd.DataFrame(rows, columns=columns))
        scatter = pd.concat(scatters, ignore_index=True) if scatters else pd.DataFrame(
            columns=["dealer_id", "zip", "value", "ratio", "covariate", "firearm_type"]
        )
        self._bundle.write_table("covariate_scatter.csv", scatter)

    def simulate(self) -> None:
        path = self._cfg.paths.synth_config
        if path:
            try:
                with open(path, "r") as f:
                    config = SynthConfig.model_validate_json(f.read())
            except OSError as e:
                raise ConfigError(f"cannot read synth config {path}: {e}") from e
            except ValidationError as e:
                raise ConfigError(f"invalid synth config {path}: {e}") from e
            self._bundle.add_input(path)
        else:
            config = SynthConfig()
        config = config.model_copy(update={"seed": self._cfg.seed})

        panel, truth = generate_panel(config)
        transactions, licenses = panel_records(panel, seed=self._cfg.seed)
        self._bundle.write_table("transactions.csv", transactions_frame(transactions))
        self._bundle.write_table("licenses.csv", licenses_frame(licenses))
        self._bundle.write_table("panel.csv", panel.to_frame())
        self._bundle.write_table("truth_effects.csv", truth.effects_frame())
        cf = pd.DataFrame(truth.counterfactual_counts, columns=list(panel.series_names))
        cf.insert(0, "date", panel.dates.strftime("%Y-%m-%d"))
        self._bundle.write_table("truth_counterfactual.csv", cf)
        self._bundle.write_json("synth_config.json", config.model_dump(mode="json"))

    def report(self) -> None:
        self.ingest()
        self.fit()
        if self._cfg.cutoff:
            self.effects()
        self.describe()
        if self._cfg.paths.labels:
            self.classify_eval()

    def run(self, command: str) -> None:
        stages: dict[str, Callable[[], object]] = {
            "ingest": self.ingest,
            "fit": self.fit,
            "select": self.select,
            "forecast": self.forecast,
            "effects": self.effects,
            "classify-eval": self.classify_eval,
            "describe": self.describe,
            "simulate": self.simulate,
            "report": self.report,
        }
        if command not in stages:
            raise ConfigError(f"unknown command {command!r}; expected one of {list(COMMANDS)}")
        stages[command]()


def _effect_row(e: EffectEstimate) -> EffectRow:
    return EffectRow(
        series=e.series,
        window=e.window.label,
        start_offset=e.window.start_offset,
        end_offset=e.window.end_offset,
        observed_cum=e.observed_cum,
        predicted_cum=e.predicted_cum,
        abs_diff=e.abs_diff,
        pct_diff=e.pct_diff,
        ci_low=e.ci_low,
        ci_high=e.ci_high,
        level=e.level,
        significant=e.significant,
    )


def _lag_path_frame(selections: list[LagSelection]) -> pd.DataFrame:
    return pd.DataFrame([
        {"which": s.which, "lag": lag, "mae": mae, "selected": lag == s.lag}
        for s in selections
        for lag, mae in sorted(s.mae_path.items())
    ])


def run_pipeline(config: RunConfig, command: str) -> int:
    """
    Runs one command and publishes its bundle. Returns the exit
    status: 0 on success, 2 on a stage error, 1 on anything else.
    """
    try:
        with ReportBundle(config.paths.output_dir, config.seed, command, config.as_dict()) as bundle:
            ImpactPipeline(config, bundle).run(command)
    except ImpactLensError as e:
        logger.error("%s failed | stage=%s | %s", command, e.stage, e.message)
        return EXIT_STAGE_ERROR
    except Exception:
        logger.exception("%s failed with an unexpected error", command)
        return EXIT_UNEXPECTED
    logger.info("%s complete | output=%s", command, config.paths.output_dir)
    return EXIT_OK
