"""
IQR outlier removal, min-max scaling for reports, and per-column box-plot
statistics.
"""

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .dataset import COLUMNS, Dataset
from .errors import DataError, ScalingError

logger = logging.getLogger(__name__)

IQR_FACTOR = 1.5
FILTER_COLUMNS = COLUMNS[1:]


def quartiles(values: Sequence[float]) -> tuple[float, float]:
    """First and third quartile, linear interpolation at index p * (n - 1).

    Raises:
        DataError: fewer than two values or a non-finite value
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size < 2:
        raise DataError(f"quartiles need at least 2 values, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise DataError("quartiles undefined for non-finite values")
    q1, q3 = np.quantile(values, [0.25, 0.75], method="linear")
    return float(q1), float(q3)


@dataclass
class ColumnStats:
    column: str
    min: float
    q1: float
    median: float
    q3: float
    max: float
    iqr: float
    lower_fence: float
    upper_fence: float
    outlier_count: int

    @classmethod
    def of(cls, column: str, values: np.ndarray) -> "ColumnStats":
        values = np.asarray(values, dtype=float)
        q1, q3 = quartiles(values)
        iqr = q3 - q1
        lower, upper = q1 - IQR_FACTOR * iqr, q3 + IQR_FACTOR * iqr
        outside = int(np.count_nonzero((values < lower) | (values > upper)))
        return cls(column, float(values.min()), q1, float(np.median(values)), q3,
                   float(values.max()), iqr, lower, upper, outside)

    def outside(self, values: np.ndarray) -> np.ndarray:
        return (values < self.lower_fence) | (values > self.upper_fence)


@dataclass
class FilterResult:
    dataset: Dataset
    stats: list[ColumnStats]
    removed: np.ndarray

    def stats_frame(self) -> pd.DataFrame:
        return stats_frame(self.stats)


def stats_frame(stats: Sequence[ColumnStats]) -> pd.DataFrame:
    return pd.DataFrame([asdict(s) for s in stats])


def iqr_filter(dataset: Dataset, columns: Sequence[str] | None = None) -> FilterResult:
    """Drop every row with a value outside its column's fences.

    Fences are computed once on the input. The time column is never filtered.

    Raises:
        DataError: empty dataset or unknown column
    """
    if len(dataset) == 0:
        raise DataError("cannot filter an empty dataset")
    columns = [c for c in (FILTER_COLUMNS if columns is None else columns) if c != "t"]
    for name in columns:
        if name not in COLUMNS:
            raise DataError(f"unknown column '{name}'")

    stats = []
    remove = np.zeros(len(dataset), dtype=bool)
    for name in columns:
        values = dataset.column(name)
        column_stats = ColumnStats.of(name, values)
        stats.append(column_stats)
        remove |= column_stats.outside(values)

    removed = np.flatnonzero(remove)
    kept = dataset.take(~remove)
    kept.meta["iqr_removed"] = int(removed.size)
    logger.info("IQR filter removed %d of %d rows", removed.size, len(dataset))
    return FilterResult(kept, stats, removed)


@dataclass(frozen=True)
class MinMaxScaling:
    min: float
    max: float

    def apply(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.min) / (self.max - self.min)

    def inverse(self, scaled) -> np.ndarray:
        return np.asarray(scaled, dtype=float) * (self.max - self.min) + self.min


def minmax_scale(values, bounds: tuple[float, float] | None = None) -> tuple[np.ndarray, MinMaxScaling]:
    """Scale to [0, 1] using the value range, or ``bounds`` when given.

    Raises:
        ScalingError: the range is empty (constant column)
    """
    values = np.asarray(values, dtype=float)
    if bounds is None:
        if values.size == 0:
            raise ScalingError("cannot scale an empty column")
        bounds = (float(values.min()), float(values.max()))
    lo, hi = bounds
    if not hi > lo:
        raise ScalingError(f"cannot scale a constant column (min = max = {lo})")
    scaling = MinMaxScaling(lo, hi)
    return scaling.apply(values), scaling


def outlier_recall(result: FilterResult, mask: np.ndarray) -> tuple[float, float]:
    """(recall, false-positive rate) of removal against a tagged-outlier mask."""
    mask = np.asarray(mask, dtype=bool)
    removed = np.zeros(mask.size, dtype=bool)
    removed[result.removed] = True
    tagged = int(mask.sum())
    clean = int((~mask).sum())
    recall = float((removed & mask).sum() / tagged) if tagged else 1.0
    false_positive = float((removed & ~mask).sum() / clean) if clean else 0.0
    return recall, false_positive
