# =============================================================
# ImpactLens - Synthetic Panel Generator
#
# Simulates daily panels from the same log-scale model the
# estimator fits, with known coefficients:
#   - licenses issued 35-40 days after Poisson applications
#   - multivariate normal errors with covariance Sigma
#   - a burn-in period that is simulated and then discarded
#   - interventions multiply the level path inside offset windows
#
# The factual and counterfactual paths share every random draw,
# so the true effect of an intervention is known exactly.
# =============================================================

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg

from services.design_builder import CalendarBasis, ModelSpec, calendar_block, calendar_labels
from services.errors import SynthConfigError
from services.forward_bootstrap import psd_factor
from services.panel_builder import (
    DEFAULT_OFFSET,
    SERIES_ORDER,
    DailyPanel,
    FirearmType,
    LicenseKind,
    LicenseRecord,
    TransactionRecord,
    inverse_log_offset,
)

logger = logging.getLogger(__name__)

_ALL_CALENDAR = set(calendar_labels(ModelSpec(use_week_of_year=True))) | set(
    calendar_labels(ModelSpec(use_week_of_year=False, use_day_of_year=True))
)


# ------------------------------------------------------------------ #
# Configuration
# ------------------------------------------------------------------ #

class Intervention(BaseModel):
    """Multiply `series` levels by `factor` on days start_offset..end_offset after the intervention date."""
    model_config = ConfigDict(frozen=True)

    series: str
    start_offset: int = Field(ge=0)
    end_offset: int = Field(ge=0)
    factor: float = Field(gt=0)
    label: str = ""

    @model_validator(mode="after")
    def _check_order(self) -> "Intervention":
        if self.end_offset < self.start_offset:
            raise ValueError(f"end_offset {self.end_offset} precedes start_offset {self.start_offset}")
        return self

    @property
    def name(self) -> str:
        return self.label or f"{self.start_offset}-{self.end_offset}"


class SynthConfig(BaseModel):
    """
    Coefficient lists are per series, in `series_names` order.
    `calendar_coefs` maps a calendar column label (dow_Sat, holiday,
    woy_27, trend, ...) to one coefficient per series.
    """
    model_config = ConfigDict(frozen=True)

    n_days: int = Field(default=730, ge=2)
    start_date: date = date(2014, 1, 1)
    series_names: tuple[str, ...] = SERIES_ORDER
    sales_coefs: list[list[float]] = [[0.4, 0.2]] * 4
    license_new_coefs: list[list[float]] = [[0.05]] * 4
    license_renew_coefs: list[list[float]] = [[0.02]] * 4
    intercepts: list[float] = [1.6, 0.8, 1.1, 0.7]
    calendar_coefs: dict[str, list[float]] = {}
    sigma: list[list[float]] = [
        [0.040, 0.010, 0.010, 0.005],
        [0.010, 0.050, 0.015, 0.005],
        [0.010, 0.015, 0.050, 0.005],
        [0.005, 0.005, 0.005, 0.060],
    ]
    new_application_rate: float = Field(default=20.0, ge=0)
    renewal_application_rate: float = Field(default=10.0, ge=0)
    delay_min: int = Field(default=35, ge=0)
    delay_max: int = Field(default=40, ge=0)
    burn_in: int = Field(default=200, ge=0)
    intervention_date: date | None = None
    interventions: list[Intervention] = []
    offset: float = Field(default=DEFAULT_OFFSET, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_shapes(self) -> "SynthConfig":
        j = len(self.series_names)
        if j < 1:
            raise ValueError("at least one series is required")
        for name in ("sales_coefs", "license_new_coefs", "license_renew_coefs", "intercepts", "sigma"):
            if len(getattr(self, name)) != j:
                raise ValueError(f"{name} needs one entry per series ({j}), got {len(getattr(self, name))}")
        if any(len(row) != j for row in self.sigma):
            raise ValueError(f"sigma must be {j}x{j}")
        for label, values in self.calendar_coefs.items():
            if label not in _ALL_CALENDAR:
                raise ValueError(f"unknown calendar column {label!r}")
            if len(values) != j:
                raise ValueError(f"calendar_coefs[{label!r}] needs {j} values")
        if self.delay_max < self.delay_min:
            raise ValueError("delay_max must be >= delay_min")
        unknown = {i.series for i in self.interventions} - set(self.series_names)
        if unknown:
            raise ValueError(f"interventions name unknown series {sorted(unknown)}")
        if self.interventions and self.intervention_date is None:
            raise ValueError("interventions need an intervention_date")
        return self

    @property
    def n_series(self) -> int:
        return len(self.series_names)

    @property
    def end_date(self) -> date:
        return self.start_date + timedelta(days=self.n_days - 1)

    def true_spec(self) -> ModelSpec:
        """The ModelSpec whose columns contain every nonzero coefficient of this config."""
        labels = set(self.calendar_coefs)
        return ModelSpec(
            sales_lags=max(len(row) for row in self.sales_coefs),
            license_lags=max(len(row) for row in self.license_new_coefs + self.license_renew_coefs),
            use_day_of_week=any(lab.startswith("dow_") for lab in labels),
            use_holiday="holiday" in labels,
            use_week_of_year=any(lab.startswith("woy_") for lab in labels),
            use_day_of_year=any(lab.startswith("doy_") for lab in labels),
            use_linear_trend="trend" in labels,
            use_quadratic_trend="trend_sq" in labels,
        )


# ------------------------------------------------------------------ #
# Truth record
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class SynthTruth:
    """Level paths are [T x J]; `*_counts` are the rounded integers the panel holds."""
    counterfactual: np.ndarray
    factual: np.ndarray
    counterfactual_counts: np.ndarray
    factual_counts: np.ndarray
    log_counterfactual: np.ndarray
    effects: dict[tuple[str, str], float]
    spec: ModelSpec

    def effects_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"series": s, "window": w, "true_effect": v} for (s, w), v in sorted(self.effects.items())]
        )


# ------------------------------------------------------------------ #
# Checks
# ------------------------------------------------------------------ #

def _padded(rows: Sequence[Sequence[float]]) -> np.ndarray:
    width = max((len(r) for r in rows), default=0)
    out = np.zeros((len(rows), width))
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


def companion_radius(coefs: Sequence[float]) -> float:
    """Largest |eigenvalue| of the AR companion matrix (0 for no lags)."""
    coefs = np.asarray(coefs, dtype=float)
    if coefs.size == 0:
        return 0.0
    companion = np.zeros((coefs.size, coefs.size))
    companion[0] = coefs
    companion[1:, :-1] = np.eye(coefs.size - 1)
    return float(np.max(np.abs(linalg.eigvals(companion))))


def check_config(config: SynthConfig) -> None:
    for name, row in zip(config.series_names, config.sales_coefs):
        radius = companion_radius(row)
        if radius >= 1.0:
            raise SynthConfigError(
                f"sales lags for {name} are not stable (companion spectral radius {radius:.4f} >= 1)"
            )
    sigma = np.asarray(config.sigma, dtype=float)
    if not np.allclose(sigma, sigma.T):
        raise SynthConfigError("sigma must be symmetric")
    eig = linalg.eigvalsh(sigma)
    if eig[0] < -1e-12 * max(abs(eig[-1]), 1.0):
        raise SynthConfigError(f"sigma is not positive semidefinite (min eigenvalue {eig[0]:.3e})")


# ------------------------------------------------------------------ #
# Interventions
# ------------------------------------------------------------------ #

def inject_intervention(
    path: np.ndarray,
    interventions: Sequence[Intervention],
    start_index: int,
    series_names: Sequence[str],
) -> np.ndarray:
    """
    Level path [T x J] with each intervention's window multiplied by
    its factor. Day offset 0 is row `start_index`.
    """
    out = np.array(path, dtype=float, copy=True)
    n_days = out.shape[0]
    taken: dict[str, list[tuple[int, int]]] = {}
    for iv in interventions:
        if iv.series not in series_names:
            raise SynthConfigError(f"unknown series {iv.series!r}")
        for a, b in taken.get(iv.series, []):
            if iv.start_offset <= b and a <= iv.end_offset:
                raise SynthConfigError(
                    f"intervention windows overlap on {iv.series}: [{a}, {b}] and "
                    f"[{iv.start_offset}, {iv.end_offset}]"
                )
        taken.setdefault(iv.series, []).append((iv.start_offset, iv.end_offset))

        first, last = start_index + iv.start_offset, start_index + iv.end_offset
        if start_index < 0 or last >= n_days:
            raise SynthConfigError(
                f"intervention window rows {first}..{last} fall outside the {n_days}-day path"
            )
        out[first:last + 1, list(series_names).index(iv.series)] *= iv.factor
    return out


def round_counts(levels: np.ndarray) -> np.ndarray:
    """Round half up to nonnegative integers."""
    return np.floor(np.maximum(levels, 0.0) + 0.5).astype(np.int64)


# ------------------------------------------------------------------ #
# Generation
# ------------------------------------------------------------------ #

def _licenses(config: SynthConfig, rng: np.random.Generator, n_total: int) -> tuple[np.ndarray, np.ndarray]:
    """Issued New / Renewal counts for each simulated day (burn-in included)."""
    lead = config.delay_max
    days = np.arange(-lead, n_total)
    issued = []
    for rate in (config.new_application_rate, config.renewal_application_rate):
        applications = rng.poisson(rate, size=days.size)
        when = np.repeat(days, applications) + rng.integers(
            config.delay_min, config.delay_max + 1, size=int(applications.sum()),
        )
        when = when[(when >= 0) & (when < n_total)]
        issued.append(np.bincount(when, minlength=n_total).astype(np.int64))
    return issued[0], issued[1]


def generate_panel(config: SynthConfig) -> tuple[DailyPanel, SynthTruth]:
    check_config(config)
    n_eq, n_days, burn = config.n_series, config.n_days, config.burn_in
    n_total = n_days + burn
    license_seq, error_seq = np.random.SeedSequence(config.seed).spawn(2)

    new_counts, renew_counts = _licenses(config, np.random.default_rng(license_seq), n_total)
    z_new = np.log(new_counts + config.offset)
    z_renew = np.log(renew_counts + config.offset)

    spec = config.true_spec()
    basis = CalendarBasis(origin=config.start_date, scale=n_days)
    sim_dates = pd.date_range(config.start_date - timedelta(days=burn), periods=n_total, freq="D")
    labels = calendar_labels(spec)
    beta = np.zeros((len(labels), n_eq))
    for label, values in config.calendar_coefs.items():
        beta[labels.index(label)] = values
    calendar_effect = calendar_block(sim_dates, spec, basis) @ beta if labels else np.zeros((n_total, n_eq))

    alpha = _padded(config.sales_coefs)
    gamma = _padded(config.license_new_coefs)
    delta = _padded(config.license_renew_coefs)
    c = np.asarray(config.intercepts, dtype=float)
    n_lags, n_zlags = alpha.shape[1], max(gamma.shape[1], delta.shape[1])
    gamma = np.pad(gamma, ((0, 0), (0, n_zlags - gamma.shape[1])))
    delta = np.pad(delta, ((0, 0), (0, n_zlags - delta.shape[1])))

    factor = psd_factor(np.asarray(config.sigma, dtype=float))
    errors = np.random.default_rng(error_seq).standard_normal((n_total, n_eq)) @ factor.T

    start = max(n_lags, n_zlags)
    y = np.empty((n_total, n_eq))
    y[:start] = c / np.maximum(1.0 - alpha.sum(axis=1), 1e-6)
    for t in range(start, n_total):
        value = c + calendar_effect[t] + errors[t]
        if n_lags:
            value += np.einsum("jk,kj->j", alpha, y[t - n_lags:t][::-1])
        if n_zlags:
            back_new = z_new[t - n_zlags:t][::-1]
            back_renew = z_renew[t - n_zlags:t][::-1]
            value += gamma @ back_new + delta @ back_renew
        y[t] = value
    if not np.all(np.isfinite(y)):
        raise SynthConfigError("simulated path diverged")

    log_cf = y[burn:]
    counterfactual = inverse_log_offset(log_cf, config.offset)
    if config.intervention_date is not None:
        start_index = (config.intervention_date - config.start_date).days
        factual = inject_intervention(counterfactual, config.interventions, start_index, config.series_names)
    else:
        start_index, factual = 0, counterfactual.copy()

    cf_counts, f_counts = round_counts(counterfactual), round_counts(factual)
    effects = {}
    for iv in config.interventions:
        j = config.series_names.index(iv.series)
        rows = slice(start_index + iv.start_offset, start_index + iv.end_offset + 1)
        effects[(iv.series, iv.name)] = float((f_counts[rows, j] - cf_counts[rows, j]).sum())

    panel = DailyPanel(
        start_date=config.start_date,
        counts=f_counts,
        new_licenses=new_counts[burn:],
        renewal_licenses=renew_counts[burn:],
        series_names=config.series_names,
        offset=config.offset,
    )
    truth = SynthTruth(
        counterfactual=counterfactual,
        factual=factual,
        counterfactual_counts=cf_counts,
        factual_counts=f_counts,
        log_counterfactual=log_cf,
        effects=effects,
        spec=spec,
    )
    logger.info(
        "generate_panel complete | days=%d | series=%d | interventions=%d | seed=%d",
        n_days, n_eq, len(config.interventions), config.seed,
    )
    return panel, truth


# ------------------------------------------------------------------ #
# Record export
# ------------------------------------------------------------------ #

def panel_records(
    panel: DailyPanel,
    seed: int = 0,
    n_dealers: int = 40,
    repeat_share: float = 0.3,
) -> tuple[list[TransactionRecord], list[LicenseRecord]]:
    """
    Expand daily counts into individual records with synthetic dealer
    and purchaser ids, so the loaders can read a generated panel back.
    A `repeat_share` of purchases reuse an earlier purchaser id.
    """
    if not all(name in SERIES_ORDER for name in panel.series_names):
        raise SynthConfigError(f"series {list(panel.series_names)} are not all firearm types")
    rng = np.random.default_rng(seed)
    zips = [f"{98001 + 7 * k:05d}" for k in range(n_dealers)]

    transactions: list[TransactionRecord] = []
    next_purchaser = 0
    for t, day in enumerate(panel.dates):
        current = day.date()
        for j, name in enumerate(panel.series_names):
            for _ in range(int(panel.counts[t, j])):
                dealer = int(rng.integers(n_dealers))
                if next_purchaser and rng.random() < repeat_share:
                    purchaser = int(rng.integers(next_purchaser))
                else:
                    purchaser, next_purchaser = next_purchaser, next_purchaser + 1
                transactions.append(TransactionRecord(
                    date=current,
                    firearm_type=FirearmType(name),
                    dealer_id=f"D{dealer:04d}",
                    dealer_zip=zips[dealer],
                    purchaser_id=f"P{purchaser:07d}",
                    make="Synthetic",
                    model=name,
                ))

    licenses = [
        LicenseRecord(issue_date=day.date(), kind=kind)
        for t, day in enumerate(panel.dates)
        for kind, counts in ((LicenseKind.NEW, panel.new_licenses), (LicenseKind.RENEWAL, panel.renewal_licenses))
        for _ in range(int(counts[t]))
    ]
    logger.info("panel_records | transactions=%d | licenses=%d", len(transactions), len(licenses))
    return transactions, licenses


def expected_level(intercept: float, offset: float = DEFAULT_OFFSET) -> int:
    """Fixed point of a model with only an intercept: exp(c) - offset, rounded."""
    return int(math.floor(max(math.exp(intercept) - offset, 0.0) + 0.5))
