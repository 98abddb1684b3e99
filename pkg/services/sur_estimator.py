# =============================================================
# ImpactLens - SUR Estimator
#
# Joint estimation of the J sales equations:
#   stage 1: per-equation least squares (QR, no normal equations)
#   stage 2: one-step feasible GLS with Sigma estimated from the
#            stage-1 residuals (divisor = usable rows)
#
# Stage 2 whitens each date's J-vector with L^-1 where
# Sigma = L L', so the (n*J) x (n*J) weight matrix is never formed.
# =============================================================

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from services.design_builder import DesignLayout, DesignMatrix, ModelSpec, check_full_rank
from services.errors import EstimationError

logger = logging.getLogger(__name__)

# Relative eigenvalue floor below which Sigma counts as singular.
_SINGULAR_RTOL = 1e-10


# ------------------------------------------------------------------ #
# Result models
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class OlsFit:
    series_name: str
    column_labels: tuple[str, ...]
    coefficients: np.ndarray
    residuals: np.ndarray
    coef_covariance: np.ndarray
    r_squared: float | None


@dataclass(frozen=True)
class SurFit:
    """
    Fitted system. `coef_covariance` covers the stacked coefficient
    vector (equation 0 first), `residuals` and `targets` are
    [usable_T x J] on the log scale.
    """
    series_names: tuple[str, ...]
    column_labels: tuple[tuple[str, ...], ...]
    coefficients: tuple[np.ndarray, ...]
    residuals: np.ndarray
    targets: np.ndarray
    sigma: np.ndarray
    coef_covariance: np.ndarray
    r_squared: tuple[float | None, ...]
    ols_r_squared: tuple[float | None, ...]
    spec: ModelSpec
    layout: DesignLayout
    first_date: date
    offset: float
    fell_back: bool = False

    @property
    def n_rows(self) -> int:
        return self.residuals.shape[0]

    @property
    def n_equations(self) -> int:
        return len(self.series_names)

    @property
    def last_date(self) -> date:
        return self.first_date + timedelta(days=self.n_rows - 1)

    @property
    def stacked_coefficients(self) -> np.ndarray:
        return np.concatenate(self.coefficients)

    @property
    def block_bounds(self) -> list[tuple[int, int]]:
        bounds, start = [], 0
        for coef in self.coefficients:
            bounds.append((start, start + len(coef)))
            start += len(coef)
        return bounds

    def standard_errors(self) -> list[np.ndarray]:
        se = np.sqrt(np.clip(np.diag(self.coef_covariance), 0.0, None))
        return [se[a:b] for a, b in self.block_bounds]

    def coefficient_table(self) -> pd.DataFrame:
        rows = []
        for name, labels, coef, se in zip(
            self.series_names, self.column_labels, self.coefficients, self.standard_errors(),
        ):
            for label, estimate, err in zip(labels, coef, se):
                rows.append((name, label, float(estimate), float(err)))
        return pd.DataFrame(rows, columns=["series", "term", "estimate", "std_error"])

    def sigma_frame(self) -> pd.DataFrame:
        names = list(self.series_names)
        return pd.DataFrame(self.sigma, index=names, columns=names)


# ------------------------------------------------------------------ #
# Least squares
# ------------------------------------------------------------------ #

def ols_solve(rows: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Least squares through a thin QR factorization.
    Returns (coefficients, R) with R the triangular factor.
    """
    q, r = linalg.qr(rows, mode="economic")
    coef = linalg.solve_triangular(r, q.T @ target)
    return coef, r


def _inverse_gram(r: np.ndarray) -> np.ndarray:
    """(X'X)^-1 = R^-1 R^-T from the QR triangular factor."""
    r_inv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    return r_inv @ r_inv.T


def _r_squared(target: np.ndarray, residuals: np.ndarray) -> float | None:
    centered = target - target.mean()
    sst = float(centered @ centered)
    if sst <= 0.0:
        return None
    value = 1.0 - float(residuals @ residuals) / sst
    return min(max(value, 0.0), 1.0)


def fit_ols(design: DesignMatrix) -> OlsFit:
    """Per-equation least squares; rank deficiency raises DesignError."""
    check_full_rank(design.rows, design.column_labels, context=f"series {design.series_name}")
    coef, r = ols_solve(design.rows, design.target)
    residuals = design.target - design.rows @ coef
    n, p = design.rows.shape
    dof = max(n - p, 1)
    s2 = float(residuals @ residuals) / dof
    return OlsFit(
        series_name=design.series_name,
        column_labels=design.column_labels,
        coefficients=coef,
        residuals=residuals,
        coef_covariance=s2 * _inverse_gram(r),
        r_squared=_r_squared(design.target, residuals),
    )


# ------------------------------------------------------------------ #
# SUR / FGLS
# ------------------------------------------------------------------ #

def _is_singular(sigma: np.ndarray) -> bool:
    eig = linalg.eigvalsh(sigma)
    return eig[-1] <= 0.0 or eig[0] <= _SINGULAR_RTOL * eig[-1]


def _validate_designs(designs: Sequence[DesignMatrix]) -> None:
    if not designs:
        raise EstimationError("fit_sur needs at least one equation")
    first = designs[0]
    for d in designs[1:]:
        if d.n_rows != first.n_rows or d.date_index != first.date_index:
            raise EstimationError(
                f"equations must share the usable date range: {first.series_name} starts "
                f"{first.date_index} with {first.n_rows} rows, {d.series_name} starts "
                f"{d.date_index} with {d.n_rows} rows"
            )


def _gls(designs: Sequence[DesignMatrix], sigma: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Stacked GLS with weight Sigma^-1 (x) I, solved on whitened data."""
    n = designs[0].n_rows
    n_eq = len(designs)
    widths = [d.n_columns for d in designs]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    chol = linalg.cholesky(sigma, lower=True)
    whiten = linalg.solve_triangular(chol, np.eye(n_eq), lower=True)

    x_tilde = np.zeros((n * n_eq, offsets[-1]))
    y_tilde = np.zeros(n * n_eq)
    for i in range(n_eq):
        block = slice(i * n, (i + 1) * n)
        for j in range(i + 1):
            w = whiten[i, j]
            if w == 0.0:
                continue
            x_tilde[block, offsets[j]:offsets[j + 1]] = w * designs[j].rows
            y_tilde[block] += w * designs[j].target

    theta, r = ols_solve(x_tilde, y_tilde)
    cov = _inverse_gram(r)
    coefs = [theta[offsets[j]:offsets[j + 1]] for j in range(n_eq)]
    return coefs, (cov + cov.T) / 2.0


def fit_sur(designs: Sequence[DesignMatrix], sigma: np.ndarray | None = None) -> SurFit:
    """
    One-step FGLS over all equations.

    `sigma` overrides the estimated residual covariance (identity
    reproduces per-equation least squares). A singular estimate
    falls back to per-equation least squares with `fell_back=True`.
    """
    _validate_designs(designs)
    n = designs[0].n_rows
    n_eq = len(designs)

    stage1 = [fit_ols(d) for d in designs]
    e1 = np.column_stack([f.residuals for f in stage1])
    sigma_hat = e1.T @ e1 / n
    weight = sigma_hat if sigma is None else np.asarray(sigma, dtype=float)
    if weight.shape != (n_eq, n_eq):
        raise EstimationError(f"sigma must be {n_eq}x{n_eq}, got {weight.shape}")

    fell_back = False
    if _is_singular(weight):
        logger.warning(
            "fit_sur | residual covariance is singular; falling back to per-equation least squares",
        )
        fell_back = True
        coefs = [f.coefficients for f in stage1]
        blocks = []
        for j, d in enumerate(designs):
            _, r = ols_solve(d.rows, d.target)
            blocks.append(sigma_hat[j, j] * _inverse_gram(r))
        cov = linalg.block_diag(*blocks)
    else:
        coefs, cov = _gls(designs, weight)

    targets = np.column_stack([d.target for d in designs])
    residuals = np.column_stack([d.target - d.rows @ c for d, c in zip(designs, coefs)])
    r2 = tuple(_r_squared(targets[:, j], residuals[:, j]) for j in range(n_eq))

    fit = SurFit(
        series_names=tuple(d.series_name for d in designs),
        column_labels=tuple(d.column_labels for d in designs),
        coefficients=tuple(coefs),
        residuals=residuals,
        targets=targets,
        sigma=sigma_hat,
        coef_covariance=cov,
        r_squared=r2,
        ols_r_squared=tuple(f.r_squared for f in stage1),
        spec=designs[0].layout.spec,
        layout=designs[0].layout,
        first_date=designs[0].date_index,
        offset=designs[0].offset,
        fell_back=fell_back,
    )
    logger.info(
        "fit_sur complete | equations=%d | rows=%d | columns=%d | fallback=%s",
        n_eq, n, cov.shape[0], fell_back,
    )
    return fit


def r_squared(fit: SurFit) -> list[float | None]:
    """1 - SSR/SST per equation on the log scale; None for a constant target."""
    return [_r_squared(fit.targets[:, j], fit.residuals[:, j]) for j in range(fit.n_equations)]
