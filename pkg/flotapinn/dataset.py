"""
Flotation dataset table and its CSV format.

A dataset holds the 14 plant variables in a fixed column order: twelve model
inputs (time first) followed by the tailings and concentrate gold grades.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError, FormatError

COLUMNS = [
    "t", "Q_air", "h", "C_s", "R_s_feed", "C_feed", "R_Au_feed", "P80",
    "Q_feed", "F_s_feed", "Q_t", "Q_c", "C_p_tail", "C_f_conc",
]
INPUT_COLUMNS = COLUMNS[:12]
TARGET_COLUMNS = COLUMNS[12:]
FLOW_COLUMNS = ["Q_air", "Q_feed", "Q_t", "Q_c"]
PERCENT_COLUMNS = ["h", "C_s", "R_s_feed", "R_Au_feed"]


def check_columns(names: list[str]) -> None:
    """Raise FormatError naming the first column that breaks the fixed order."""
    names = [str(n) for n in names]
    for name in names:
        if name not in COLUMNS:
            raise FormatError(f"unexpected column '{name}'")
    for name in COLUMNS:
        if name not in names:
            raise FormatError(f"missing column '{name}'")
    if len(names) != len(COLUMNS):
        duplicated = sorted({n for n in names if names.count(n) > 1})
        raise FormatError(f"duplicated column '{duplicated[0]}'")
    for pos, (got, expected) in enumerate(zip(names, COLUMNS)):
        if got != expected:
            raise FormatError(f"column {pos} is '{got}', expected '{expected}'")


@dataclass
class Dataset:
    """Ordered flotation samples plus provenance metadata.

    ``outlier_mask`` tags rows corrupted by the simulator; it never reaches
    the CSV file.
    """

    frame: pd.DataFrame
    meta: dict = field(default_factory=dict)
    outlier_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        check_columns(list(self.frame.columns))
        self.frame = self.frame.astype(float).reset_index(drop=True)

    def __len__(self) -> int:
        return len(self.frame)

    def inputs(self) -> np.ndarray:
        return self.frame[INPUT_COLUMNS].to_numpy(dtype=float)

    def targets(self) -> np.ndarray:
        return self.frame[TARGET_COLUMNS].to_numpy(dtype=float)

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    def take(self, rows) -> "Dataset":
        """Rows by position (index array or boolean mask), metadata kept."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        mask = None if self.outlier_mask is None else self.outlier_mask[rows]
        return Dataset(self.frame.iloc[rows].copy(), dict(self.meta), mask)

    def equals(self, other: "Dataset") -> bool:
        return self.frame.equals(other.frame)


def export_csv(dataset: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.frame.to_csv(path, index=False, float_format="%.17g")
    return path


def import_csv(path: str | Path) -> Dataset:
    """Load a dataset CSV, enforcing the exact 14-column header.

    Raises:
        FormatError: header differs from the canonical columns, or a value
            is not numeric
        DataError: a flow is negative or a percentage leaves [0, 100]
    """
    from .physics import ExogenousInputs

    path = Path(path)
    if not path.exists():
        raise FormatError(f"dataset file {path} not found")
    frame = pd.read_csv(path, float_precision="round_trip")
    check_columns(list(frame.columns))
    try:
        frame = frame.astype(float)
    except ValueError as e:
        raise FormatError(f"non-numeric value in {path}: {e}") from e
    dataset = Dataset(frame, {"source": str(path)})
    try:
        ExogenousInputs.from_matrix(dataset.inputs()).check()
    except DataError as e:
        raise DataError(f"{path}: {e}") from e
    return dataset
