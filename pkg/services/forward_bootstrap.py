# =============================================================
# ImpactLens - Forward Bootstrap Forecast
#
# Counterfactual paths for the H days starting at the cutoff.
# Each replicate b:
#   1. draws theta_b ~ N(theta_hat, coef_covariance)
#   2. walks forward day by day, feeding its own pseudo-values
#      back in as sales lags (observed values before the cutoff)
#   3. adds one centered fitted residual row per day, the same
#      date index for all J equations
#
# Replicate b uses its own SeedSequence child, so results do not
# depend on how replicates are batched across workers.
# =============================================================

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
import pandas as pd
from scipy import linalg

from services.design_builder import calendar_block, future_dates
from services.errors import ForecastError
from services.panel_builder import DailyPanel, inverse_log_offset, log_offset
from services.sur_estimator import SurFit

logger = logging.getLogger(__name__)

DEFAULT_REPLICATES = 1000
DEFAULT_LEVEL = 0.95

DRAWS_MAGIC = b"ILDRAWS1"
_DRAWS_HEADER = struct.Struct("<8sIII")

# Negative eigenvalues smaller than this share of the largest one are
# rounding noise and are clipped without a warning.
_PSD_RTOL = 1e-10


# ------------------------------------------------------------------ #
# Inputs / outputs
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class ExogenousFuture:
    """License issuances (counts) for each forecast day, first day = cutoff."""
    start: date
    new_licenses: np.ndarray
    renewal_licenses: np.ndarray

    def __post_init__(self):
        new = np.asarray(self.new_licenses, dtype=float)
        renew = np.asarray(self.renewal_licenses, dtype=float)
        if new.ndim != 1 or new.shape != renew.shape:
            raise ForecastError(
                f"license paths must be 1-D and equally long, got {new.shape} and {renew.shape}"
            )
        if np.any(new < 0) or np.any(renew < 0):
            raise ForecastError("future license counts must be nonnegative")
        object.__setattr__(self, "new_licenses", new)
        object.__setattr__(self, "renewal_licenses", renew)

    @property
    def horizon(self) -> int:
        return len(self.new_licenses)

    @classmethod
    def from_panel(cls, panel: DailyPanel, cutoff: date, horizon: int) -> "ExogenousFuture":
        """Issued licenses from the panel; sales columns are not read."""
        last = cutoff + timedelta(days=horizon - 1)
        if cutoff < panel.start_date or last > panel.end_date:
            raise ForecastError(
                f"panel ({panel.start_date}..{panel.end_date}) does not cover "
                f"license days {cutoff}..{last}"
            )
        i0 = panel.index_of(cutoff)
        return cls(
            start=cutoff,
            new_licenses=panel.new_licenses[i0:i0 + horizon],
            renewal_licenses=panel.renewal_licenses[i0:i0 + horizon],
        )


@dataclass(frozen=True)
class ForecastResult:
    """
    Level-scale forecasts. `draws` is [B x H x J]; `point_path` is the
    replicate mean, `plugin_path` the deterministic recursion at
    theta_hat with zero shocks.
    """
    dates: tuple[date, ...]
    series_names: tuple[str, ...]
    point_path: np.ndarray
    plugin_path: np.ndarray
    draws: np.ndarray
    seed: int
    cutoff: date

    @property
    def horizon(self) -> int:
        return len(self.dates)

    @property
    def n_replicates(self) -> int:
        return self.draws.shape[0]

    def interval(self, level: float = DEFAULT_LEVEL) -> tuple[np.ndarray, np.ndarray]:
        return prediction_interval(self.draws, level)

    def cumulative_interval(self, start_offset: int, end_offset: int, level: float = DEFAULT_LEVEL):
        return cumulative_interval(self.draws, start_offset, end_offset, level)

    def to_frame(self, levels: tuple[float, ...] = (DEFAULT_LEVEL,)) -> pd.DataFrame:
        """Long table: one row per (date, series, level)."""
        frames = []
        for level in levels:
            lower, upper = self.interval(level)
            for j, name in enumerate(self.series_names):
                frames.append(pd.DataFrame({
                    "date": [d.isoformat() for d in self.dates],
                    "series": name,
                    "point": self.point_path[:, j],
                    "plugin": self.plugin_path[:, j],
                    "level": level,
                    "lower": lower[:, j],
                    "upper": upper[:, j],
                }))
        return pd.concat(frames, ignore_index=True)


# ------------------------------------------------------------------ #
# Percentile intervals
# ------------------------------------------------------------------ #

def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ForecastError(f"level must lie in (0, 1), got {level}")


def prediction_interval(draws: np.ndarray, level: float = DEFAULT_LEVEL) -> tuple[np.ndarray, np.ndarray]:
    """
    Empirical percentile interval over axis 0.

    With k = floor(B * (1 - level) / 2) the bounds are the k-th and
    (B - k + 1)-th order statistics (25th and 976th for B=1000 at 95%).
    """
    _check_level(level)
    draws = np.asarray(draws, dtype=float)
    b = draws.shape[0]
    if b < 2:
        raise ForecastError(f"need at least 2 bootstrap replicates, got {b}")
    k = int(np.floor(b * (1.0 - level) / 2.0))
    ordered = np.sort(draws, axis=0)
    lower = ordered[max(k - 1, 0)]
    upper = ordered[min(b - k, b - 1)]
    return lower, upper


def cumulative_draws(draws: np.ndarray, start_offset: int, end_offset: int) -> np.ndarray:
    """Per-replicate sums over horizon days start_offset..end_offset (inclusive) -> [B x J]."""
    h = draws.shape[1]
    if not 0 <= start_offset <= end_offset < h:
        raise ForecastError(
            f"window [{start_offset}, {end_offset}] is outside the forecast horizon of {h} days"
        )
    return draws[:, start_offset:end_offset + 1].sum(axis=1)


def cumulative_interval(
    draws: np.ndarray, start_offset: int, end_offset: int, level: float = DEFAULT_LEVEL,
) -> tuple[np.ndarray, np.ndarray]:
    return prediction_interval(cumulative_draws(draws, start_offset, end_offset), level)


# ------------------------------------------------------------------ #
# Recursion
# ------------------------------------------------------------------ #

def psd_factor(cov: np.ndarray) -> np.ndarray:
    """F with F F' = cov projected onto the PSD cone (eigenvalues clipped at 0)."""
    sym = (cov + cov.T) / 2.0
    w, v = linalg.eigh(sym)
    scale = max(float(np.max(np.abs(w))), 0.0)
    if scale > 0 and w[0] < -_PSD_RTOL * scale:
        logger.warning(
            "forecast | coefficient covariance is not PSD (min eigenvalue %.3e); clipping", w[0],
        )
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class _History:
    sales: np.ndarray      # [L x J] log scale, last L observed days
    new_ext: np.ndarray    # [Lz + H] log scale, observed then future
    renew_ext: np.ndarray
    calendar: np.ndarray   # [H x C]


def _recurse(
    fit: SurFit,
    history: _History,
    thetas: list[np.ndarray],
    shocks: np.ndarray,
) -> np.ndarray:
    """
    Log-scale paths [B x H x J]. `thetas[j]` is [B x p_j]; `shocks`
    is [B x H x J] and already includes the shared date index.
    """
    spec = fit.spec
    lags, zlags = spec.sales_lags, spec.license_lags
    n_rep, horizon, n_eq = shocks.shape

    buffer = np.empty((n_rep, lags + horizon, n_eq))
    buffer[:, :lags, :] = history.sales
    sales_back = np.arange(1, lags + 1)
    lic_back = np.arange(1, zlags + 1)

    for t in range(horizon):
        new_row = history.new_ext[zlags + t - lic_back]
        renew_row = history.renew_ext[zlags + t - lic_back]
        for j in range(n_eq):
            own = buffer[:, lags + t - sales_back, j]
            rows = fit.layout.assemble(own, history.calendar[t][None, :], new_row[None, :], renew_row[None, :])
            buffer[:, lags + t, j] = np.einsum("bp,bp->b", rows, thetas[j]) + shocks[:, t, j]
    return buffer[:, lags:, :]


def _history(fit: SurFit, panel: DailyPanel, cutoff: date, exogenous: ExogenousFuture, horizon: int) -> _History:
    spec = fit.spec
    observed = panel.before(cutoff)
    if observed.end_date != cutoff - timedelta(days=1):
        raise ForecastError(f"panel ends {observed.end_date}; it must reach the day before cutoff {cutoff}")
    if observed.n_days < max(spec.max_lag, 1):
        raise ForecastError(f"need {spec.max_lag} observed days before {cutoff}, have {observed.n_days}")
    if observed.series_names != fit.series_names:
        raise ForecastError(
            f"panel series {list(observed.series_names)} do not match the fit {list(fit.series_names)}"
        )

    log_sales = observed.log_sales()
    zl = spec.license_lags
    new_hist = observed.log_new_licenses()[observed.n_days - zl:]
    renew_hist = observed.log_renewal_licenses()[observed.n_days - zl:]
    new_future = np.atleast_1d(log_offset(exogenous.new_licenses[:horizon], fit.offset))
    renew_future = np.atleast_1d(log_offset(exogenous.renewal_licenses[:horizon], fit.offset))

    dates = future_dates(cutoff - timedelta(days=1), horizon)
    return _History(
        sales=log_sales[observed.n_days - spec.sales_lags:],
        new_ext=np.concatenate([new_hist, new_future]),
        renew_ext=np.concatenate([renew_hist, renew_future]),
        calendar=calendar_block(dates, spec, fit.layout.basis),
    )


def _replicate_inputs(
    child: np.random.SeedSequence, factor: np.ndarray, n_resid: int, horizon: int,
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(child)
    z = rng.standard_normal(factor.shape[1])
    idx = rng.integers(0, n_resid, size=horizon)
    return factor @ z, idx


def forecast_counterfactual(
    fit: SurFit,
    panel: DailyPanel,
    cutoff: date,
    horizon: int,
    exogenous_future: ExogenousFuture | None = None,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    workers: int = 1,
) -> ForecastResult:
    """
    Forward bootstrap with fitted residuals.

    Only panel rows strictly before `cutoff` are read for sales; the
    license path for the horizon comes from `exogenous_future`
    (defaults to the panel's own issued licenses).
    """
    if horizon < 1:
        raise ForecastError(f"horizon must be >= 1, got {horizon}")
    if replicates < 2:
        raise ForecastError(f"need at least 2 bootstrap replicates, got {replicates}")
    if fit.last_date >= cutoff:
        raise ForecastError(f"fit uses data through {fit.last_date}, which is not before cutoff {cutoff}")
    if exogenous_future is None:
        exogenous_future = ExogenousFuture.from_panel(panel, cutoff, horizon)
    if exogenous_future.start != cutoff:
        raise ForecastError(f"exogenous path starts {exogenous_future.start}, expected cutoff {cutoff}")
    if horizon > exogenous_future.horizon:
        raise ForecastError(
            f"horizon {horizon} exceeds the {exogenous_future.horizon} days of exogenous licenses"
        )

    history = _history(fit, panel, cutoff, exogenous_future, horizon)
    theta_hat = fit.stacked_coefficients
    factor = psd_factor(fit.coef_covariance)
    residuals = fit.residuals - fit.residuals.mean(axis=0)
    n_resid = residuals.shape[0]
    bounds = fit.block_bounds

    children = np.random.SeedSequence(seed).spawn(replicates)

    def run(batch: list[np.random.SeedSequence]) -> np.ndarray:
        inputs = [_replicate_inputs(c, factor, n_resid, horizon) for c in batch]
        deltas = np.stack([d for d, _ in inputs])
        shocks = np.stack([residuals[idx] for _, idx in inputs])
        thetas = [theta_hat[a:b] + deltas[:, a:b] for a, b in bounds]
        return _recurse(fit, history, thetas, shocks)

    if workers > 1:
        batches = [list(chunk) for chunk in np.array_split(np.array(children, dtype=object), workers) if len(chunk)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            log_paths = np.concatenate(list(pool.map(run, batches)), axis=0)
    else:
        log_paths = run(children)

    plugin_log = _recurse(
        fit,
        history,
        [theta_hat[a:b][None, :] for a, b in bounds],
        np.zeros((1, horizon, fit.n_equations)),
    )[0]

    draws = inverse_log_offset(log_paths, fit.offset)
    result = ForecastResult(
        dates=tuple(future_dates(cutoff - timedelta(days=1), horizon)),
        series_names=fit.series_names,
        point_path=draws.mean(axis=0),
        plugin_path=inverse_log_offset(plugin_log, fit.offset),
        draws=draws,
        seed=seed,
        cutoff=cutoff,
    )
    logger.info(
        "forecast_counterfactual complete | cutoff=%s | horizon=%d | replicates=%d | seed=%d",
        cutoff, horizon, replicates, seed,
    )
    return result


# ------------------------------------------------------------------ #
# Draw persistence
# ------------------------------------------------------------------ #

def save_draws(path: str, draws: np.ndarray) -> None:
    """
    Header: 8-byte magic b"ILDRAWS1", then B, H, J as little-endian
    uint32. Body: row-major [B][H][J] little-endian float64.
    """
    draws = np.asarray(draws)
    if draws.ndim != 3:
        raise ForecastError(f"draws must be a B x H x J tensor, got shape {draws.shape}")
    with open(path, "wb") as f:
        f.write(_DRAWS_HEADER.pack(DRAWS_MAGIC, *draws.shape))
        f.write(np.ascontiguousarray(draws, dtype="<f8").tobytes())


def load_draws(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ForecastError(f"cannot read draws file {path}: {e}") from e
    if len(blob) < _DRAWS_HEADER.size:
        raise ForecastError(f"{path}: truncated header")
    magic, b, h, j = _DRAWS_HEADER.unpack_from(blob)
    if magic != DRAWS_MAGIC:
        raise ForecastError(f"{path}: not a draws file (magic {magic!r})")
    body = blob[_DRAWS_HEADER.size:]
    if len(body) != b * h * j * 8:
        raise ForecastError(f"{path}: expected {b * h * j} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(b, h, j).astype(float)
