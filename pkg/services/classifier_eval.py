# =============================================================
# ImpactLens - Classifier Evaluation
#
# Scores a predicted assault-weapon tagging of rifle make/models
# against truth fused from several human raters:
#   Median     majority of Assault vs NotAssault votes,
#              Indeterminate abstains, ties are Excluded
#   Unanimous  kept only when every rater gives the same
#              Assault / NotAssault label
#
# Each truth standard is scored unweighted and weighted by
# sales / mean(sales), giving four confusion matrices.
# =============================================================

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from services.errors import ClassifierEvalError

logger = logging.getLogger(__name__)

LABEL_COLUMNS = ("item_id", "predicted_label", "sales_count")
RATER_PREFIX = "rater"


class RaterLabel(str, Enum):
    ASSAULT = "Assault"
    NOT_ASSAULT = "NotAssault"
    INDETERMINATE = "Indeterminate"

    @classmethod
    def parse(cls, value: str) -> "RaterLabel":
        key = str(value).strip().lower().replace("_", "").replace(" ", "").replace("-", "")
        if key in ("a", "assault", "assaultweapon", "yes", "1"):
            return cls.ASSAULT
        if key in ("n", "notassault", "no", "0"):
            return cls.NOT_ASSAULT
        if key in ("i", "indeterminate", "unknown", "?"):
            return cls.INDETERMINATE
        raise ClassifierEvalError(f"unknown rater label {value!r}")


class Truth(str, Enum):
    ASSAULT = "Assault"
    NOT_ASSAULT = "NotAssault"
    EXCLUDED = "Excluded"


class Standard(str, Enum):
    MEDIAN = "Median"
    UNANIMOUS = "Unanimous"


def parse_predicted(value: str) -> bool:
    """True for a TAW / assault tag."""
    key = str(value).strip().lower().replace("_", "").replace(" ", "").replace("-", "")
    if key in ("taw", "tawrifle", "assault", "a", "1", "true", "yes"):
        return True
    if key in ("nontaw", "nontawrifle", "notassault", "n", "0", "false", "no"):
        return False
    raise ClassifierEvalError(f"unknown predicted label {value!r}")


# ------------------------------------------------------------------ #
# Types
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class RaterLabels:
    item_id: str
    labels: tuple[RaterLabel, ...]
    sales_count: int
    predicted_taw: bool | None = None

    def __post_init__(self):
        if not self.labels:
            raise ClassifierEvalError(f"item {self.item_id!r} has no rater labels")
        if self.sales_count < 0:
            raise ClassifierEvalError(f"item {self.item_id!r} has negative sales {self.sales_count}")
        object.__setattr__(self, "labels", tuple(RaterLabel(label) for label in self.labels))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Truth positive = Assault, predicted positive = TAW tag."""
    tn: float
    fp: float
    fn: float
    tp: float
    skipped: int = 0

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ClassifierEvalError("confusion cells must be nonnegative")

    @property
    def total(self) -> float:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def truth_totals(self) -> tuple[float, float]:
        """(truly negative, truly positive) row sums."""
        return self.tn + self.fp, self.fn + self.tp

    @property
    def predicted_totals(self) -> tuple[float, float]:
        """(predicted negative, predicted positive) column sums."""
        return self.tn + self.fn, self.fp + self.tp


@dataclass(frozen=True)
class Metrics:
    """
    `fnr` and `fpr` are per predicted class: fn / (fn + tn) and
    fp / (fp + tp). The usual per-truth-class rates are `miss_rate`
    fn / (fn + tp) and `fall_out` fp / (fp + tn).
    """
    accuracy: float
    fnr: float | None
    fpr: float | None
    miss_rate: float | None
    fall_out: float | None


# ------------------------------------------------------------------ #
# Operations
# ------------------------------------------------------------------ #

def _fuse_one(labels: Sequence[RaterLabel], standard: Standard) -> Truth:
    if standard is Standard.UNANIMOUS:
        first = labels[0]
        if first is not RaterLabel.INDETERMINATE and all(label is first for label in labels):
            return Truth.ASSAULT if first is RaterLabel.ASSAULT else Truth.NOT_ASSAULT
        return Truth.EXCLUDED
    yes = sum(label is RaterLabel.ASSAULT for label in labels)
    no = sum(label is RaterLabel.NOT_ASSAULT for label in labels)
    if yes > no:
        return Truth.ASSAULT
    if no > yes:
        return Truth.NOT_ASSAULT
    return Truth.EXCLUDED


def fuse_truth(items: Iterable[RaterLabels], standard: Standard | str) -> dict[str, Truth]:
    standard = Standard(standard)
    result = {}
    for item in items:
        if not item.labels:
            raise ClassifierEvalError(f"item {item.item_id!r} has no rater labels")
        result[item.item_id] = _fuse_one(item.labels, standard)
    return result


def sales_weights(items: Sequence[RaterLabels]) -> dict[str, float]:
    """weight_i = sales_i / mean(sales); the weights average to one."""
    if not items:
        raise ClassifierEvalError("sales_weights needs at least one item")
    sales = np.array([item.sales_count for item in items], dtype=float)
    mean = sales.mean()
    if mean <= 0:
        raise ClassifierEvalError("every item has zero sales; weights are undefined")
    return {item.item_id: float(s / mean) for item, s in zip(items, sales)}


def confusion(
    truth: Mapping[str, Truth],
    predicted: Mapping[str, bool],
    weights: Mapping[str, float] | None = None,
) -> ConfusionMatrix:
    """Accumulates weights (or ones); Excluded or unrated items are skipped and counted."""
    cells = {"tn": 0.0, "fp": 0.0, "fn": 0.0, "tp": 0.0}
    skipped = 0
    for item_id, tagged in predicted.items():
        label = truth.get(item_id, Truth.EXCLUDED)
        if label is Truth.EXCLUDED:
            skipped += 1
            continue
        w = 1.0 if weights is None else float(weights[item_id])
        positive = label is Truth.ASSAULT
        key = ("t" if positive == tagged else "f") + ("p" if tagged else "n")
        cells[key] += w

    missing = [i for i, t in truth.items() if t is not Truth.EXCLUDED and i not in predicted]
    if missing:
        raise ClassifierEvalError(f"{len(missing)} rated items have no prediction, e.g. {missing[:3]}")
    return ConfusionMatrix(skipped=skipped, **cells)


def _ratio(num: float, den: float) -> float | None:
    return num / den if den > 0 else None


def metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total <= 0:
        raise ClassifierEvalError("confusion matrix is empty")
    return Metrics(
        accuracy=(cm.tp + cm.tn) / cm.total,
        fnr=_ratio(cm.fn, cm.fn + cm.tn),
        fpr=_ratio(cm.fp, cm.fp + cm.tp),
        miss_rate=_ratio(cm.fn, cm.fn + cm.tp),
        fall_out=_ratio(cm.fp, cm.fp + cm.tn),
    )


# ------------------------------------------------------------------ #
# Margin check
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class MarginMismatch:
    axis: str
    label: str
    printed: float
    computed: float


def check_margins(
    cm: ConfusionMatrix,
    truth_totals: tuple[float, float] | None = None,
    predicted_totals: tuple[float, float] | None = None,
    tolerance: float = 0.051,
) -> list[MarginMismatch]:
    """Printed totals that disagree with the cell sums by more than `tolerance`."""
    issues = []
    checks = (
        ("truth", ("NotAssault", "Assault"), truth_totals, cm.truth_totals),
        ("predicted", ("NonTAW", "TAW"), predicted_totals, cm.predicted_totals),
    )
    for axis, names, printed, computed in checks:
        if printed is None:
            continue
        for name, p, c in zip(names, printed, computed):
            if abs(p - c) > tolerance:
                issues.append(MarginMismatch(axis=axis, label=name, printed=float(p), computed=float(c)))
    for issue in issues:
        logger.warning(
            "check_margins | axis=%s | label=%s | printed=%.1f | cell_sum=%.1f",
            issue.axis, issue.label, issue.printed, issue.computed,
        )
    return issues


# ------------------------------------------------------------------ #
# Four-matrix evaluation
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class MatrixResult:
    standard: Standard
    weighted: bool
    n_items: int
    matrix: ConfusionMatrix
    metrics: Metrics


@dataclass
class ClassifierReport:
    results: list[MatrixResult] = field(default_factory=list)

    def get(self, standard: Standard | str, weighted: bool) -> MatrixResult:
        standard = Standard(standard)
        for r in self.results:
            if r.standard is standard and r.weighted == weighted:
                return r
        raise KeyError((standard, weighted))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "truth_standard": r.standard.value,
                "weighting": "sales" if r.weighted else "none",
                "n_items": r.n_items,
                "tn": r.matrix.tn,
                "fp": r.matrix.fp,
                "fn": r.matrix.fn,
                "tp": r.matrix.tp,
                "skipped": r.matrix.skipped,
                "accuracy": r.metrics.accuracy,
                "fnr": r.metrics.fnr,
                "fpr": r.metrics.fpr,
                "miss_rate": r.metrics.miss_rate,
                "fall_out": r.metrics.fall_out,
            }
            for r in self.results
        ])


def evaluate_classifier(items: Sequence[RaterLabels]) -> ClassifierReport:
    """Median and Unanimous truth, each unweighted and sales-weighted."""
    if not items:
        raise ClassifierEvalError("no labelled items")
    if len({item.item_id for item in items}) != len(items):
        raise ClassifierEvalError("item ids must be unique")
    unpredicted = [item.item_id for item in items if item.predicted_taw is None]
    if unpredicted:
        raise ClassifierEvalError(f"{len(unpredicted)} items have no predicted label, e.g. {unpredicted[:3]}")

    predicted = {item.item_id: bool(item.predicted_taw) for item in items}
    weights = sales_weights(items)
    report = ClassifierReport()
    for standard in (Standard.MEDIAN, Standard.UNANIMOUS):
        truth = fuse_truth(items, standard)
        kept = sum(t is not Truth.EXCLUDED for t in truth.values())
        for weighted in (False, True):
            cm = confusion(truth, predicted, weights if weighted else None)
            report.results.append(MatrixResult(standard, weighted, kept, cm, metrics(cm)))
        logger.info(
            "evaluate_classifier | standard=%s | kept=%d | excluded=%d",
            standard.value, kept, len(items) - kept,
        )
    return report


def load_labels(path: str) -> list[RaterLabels]:
    """Delimited file: item_id, rater_1..rater_R, predicted_label, sales_count."""
    try:
        frame = pd.read_csv(path, dtype=str, sep=None, engine="python", keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ClassifierEvalError(f"cannot read labels file {path}: {e}") from e

    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in LABEL_COLUMNS if c not in frame.columns]
    raters = [c for c in frame.columns if c.lower().startswith(RATER_PREFIX)]
    if missing or not raters:
        raise ClassifierEvalError(
            f"{path}: need columns {list(LABEL_COLUMNS)} and at least one rater_* column; "
            f"found {list(frame.columns)}"
        )

    items = []
    for row_number, row in enumerate(frame.to_dict("records"), start=2):
        try:
            sales = int(float(row["sales_count"]))
            items.append(RaterLabels(
                item_id=row["item_id"].strip(),
                labels=tuple(RaterLabel.parse(row[c]) for c in raters),
                sales_count=sales,
                predicted_taw=parse_predicted(row["predicted_label"]),
            ))
        except ValueError as e:
            raise ClassifierEvalError(f"{path}:{row_number}: {getattr(e, 'message', e)}") from None
    logger.info("Loaded %d labelled items with %d raters from %s", len(items), len(raters), path)
    return items
