"""
Tests for IQR filtering, scaling and column statistics
"""

import numpy as np
import pandas as pd
import pytest

from flotapinn.dataset import COLUMNS, Dataset
from flotapinn.errors import DataError, ScalingError
from flotapinn.preprocess import (
    ColumnStats,
    iqr_filter,
    minmax_scale,
    outlier_recall,
    quartiles,
    stats_frame,
)
from flotapinn.simulator import SimConfig, simulate_split


def dataset_with(column, values):
    n = len(values)
    frame = pd.DataFrame({name: np.arange(n, dtype=float) * 0.0 + 1.0 for name in COLUMNS})
    frame["t"] = np.arange(n) * 5.0
    frame[column] = values
    return Dataset(frame)


def reference_quantile(values, p):
    ordered = sorted(values)
    position = p * (len(ordered) - 1)
    lo = int(np.floor(position))
    hi = min(lo + 1, len(ordered) - 1)
    return ordered[lo] + (position - lo) * (ordered[hi] - ordered[lo])


class TestQuartiles:
    """Test linear-interpolation quartiles"""

    def test_hand_example(self):
        q1, q3 = quartiles([1, 2, 3, 4, 5, 100])
        assert q1 == pytest.approx(2.25)
        assert q3 == pytest.approx(4.75)

    def test_constant(self):
        assert quartiles([5, 5, 5, 5]) == (5.0, 5.0)

    def test_against_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            values = rng.normal(size=int(rng.integers(2, 60))) * 10.0
            q1, q3 = quartiles(values)
            assert abs(q1 - reference_quantile(values, 0.25)) < 1e-12
            assert abs(q3 - reference_quantile(values, 0.75)) < 1e-12

    @pytest.mark.parametrize("values", [[1.0], [], [1.0, np.nan], [np.inf, 2.0]])
    def test_invalid(self, values):
        with pytest.raises(DataError):
            quartiles(values)


class TestIqrFilter:
    """Test single-pass row removal"""

    def test_single_column_example(self):
        result = iqr_filter(dataset_with("C_feed", [1, 2, 3, 4, 5, 100]), ["C_feed"])
        assert result.removed.tolist() == [5]
        stats = result.stats[0]
        assert (stats.lower_fence, stats.upper_fence) == (pytest.approx(-1.5), pytest.approx(8.5))
        assert stats.outlier_count == 1

    def test_degenerate_fences(self):
        result = iqr_filter(dataset_with("Q_c", [5, 5, 5, 5, 5, 5, 5, 9]), ["Q_c"])
        assert result.stats[0].iqr == 0.0
        assert result.removed.tolist() == [7]

    def test_no_outliers_is_identity(self):
        dataset = dataset_with("P80", [10, 11, 12, 13, 14])
        result = iqr_filter(dataset)
        assert result.dataset.equals(dataset)
        assert result.removed.size == 0

    def test_any_column_removes_row(self):
        dataset = dataset_with("Q_air", [1, 2, 3, 4, 5, 100])
        dataset.frame.loc[0, "C_f_conc"] = 1000.0
        result = iqr_filter(dataset)
        assert result.removed.tolist() == [0, 5]
        assert len(result.dataset) + result.removed.size == len(dataset)

    def test_time_column_never_filtered(self):
        dataset = dataset_with("h", [1, 1, 1, 1])
        dataset.frame.loc[3, "t"] = 1e9
        result = iqr_filter(dataset, ["t", "h"])
        assert result.removed.size == 0
        assert [s.column for s in result.stats] == ["h"]

    def test_empty_dataset(self):
        with pytest.raises(DataError) as exc_info:
            iqr_filter(Dataset(pd.DataFrame(columns=COLUMNS)))
        assert "empty" in str(exc_info.value)

    def test_unknown_column(self):
        with pytest.raises(DataError) as exc_info:
            iqr_filter(dataset_with("h", [1, 2, 3]), ["pH"])
        assert "pH" in str(exc_info.value)

    def test_stats_frame_columns(self):
        result = iqr_filter(dataset_with("h", [1, 2, 3, 4]))
        frame = stats_frame(result.stats)
        assert list(frame.columns) == list(ColumnStats.__dataclass_fields__)
        assert len(frame) == 13

    def test_recall_on_tagged_outliers(self):
        recalls, false_positives = [], []
        for seed in range(20):
            config = SimConfig(seed=seed, horizons={"train": 1000}, steady_start=True,
                               dt_substep=0.5)
            _, dataset = simulate_split(config, "train")
            recall, fp = outlier_recall(iqr_filter(dataset), dataset.outlier_mask)
            recalls.append(recall)
            false_positives.append(fp)
        assert np.mean(recalls) >= 0.9
        assert np.mean(false_positives) <= 0.05


class TestMinMaxScale:
    """Test report-only scaling"""

    def test_example(self):
        scaled, _ = minmax_scale([2, 4, 6])
        assert scaled.tolist() == [0.0, 0.5, 1.0]

    def test_inverse(self):
        values = np.random.default_rng(1).normal(size=50) * 7.0
        scaled, scaling = minmax_scale(values)
        assert np.max(np.abs(scaling.inverse(scaled) - values)) < 1e-12

    def test_constant_column(self):
        with pytest.raises(ScalingError) as exc_info:
            minmax_scale([3.0, 3.0])
        assert "constant" in str(exc_info.value)

    def test_explicit_bounds(self):
        scaled, _ = minmax_scale([5.0], bounds=(0.0, 10.0))
        assert scaled.tolist() == [0.5]
