"""
Tests for the synthetic cell simulator
"""

import os
import shutil
import tempfile

import numpy as np
import pytest
from scipy.linalg import expm

from flotapinn.dataset import export_csv, import_csv
from flotapinn.errors import ConfigurationError, SimulationError
from flotapinn.physics import ExogenousInputs
from flotapinn.preprocess import quartiles
from flotapinn.simulator import (
    SimConfig,
    SignalSpec,
    TrueParams,
    cell_matrices,
    default_signals,
    inject_noise_outliers,
    integrate_cell,
    simulate,
    steady_state,
    synth_inputs,
)


def constant_inputs(n, **overrides):
    values = {"t": np.arange(n) * 5.0}
    for name, spec in default_signals().items():
        values[name] = np.full(n, overrides.get(name, spec.baseline))
    return ExogenousInputs(**values)


def quiet_config(**kwargs):
    """Config without noise or outliers."""
    config = SimConfig(**kwargs)
    config.noise = {name: 0.0 for name in config.noise}
    config.outlier_rate = 0.0
    return config


class TestSynthInputs:
    """Test exogenous signal synthesis"""

    def test_degenerate_signal_is_constant(self):
        config = SimConfig(horizons={"train": 50})
        config.signals["Q_feed"] = SignalSpec(120.0)
        series = synth_inputs(config, "train").Q_feed
        assert np.all(series == 120.0)

    def test_deterministic(self):
        config = SimConfig(seed=3)
        a, b = synth_inputs(config, "val"), synth_inputs(config, "val")
        assert np.array_equal(a.to_matrix(), b.to_matrix())

    def test_regime_shift_between_splits(self):
        config = SimConfig(horizons={"train": 2000, "val": 1000, "test": 2000})
        train = synth_inputs(config, "train").Q_feed.mean()
        test = synth_inputs(config, "test").Q_feed.mean()
        assert train == pytest.approx(120.0, rel=0.02)
        assert test == pytest.approx(150.0, rel=0.02)

    def test_splits_do_not_overlap_in_time(self):
        config = SimConfig()
        train, val = synth_inputs(config, "train"), synth_inputs(config, "val")
        assert val.t[0] > train.t[-1] + config.split_gap - 1e-9

    def test_non_negative_and_percent_bounded(self):
        config = SimConfig(horizons={"train": 500})
        config.signals["h"] = SignalSpec(95.0, amplitudes=[20.0], periods=[100.0])
        config.signals["Q_c"] = SignalSpec(1.0, amplitudes=[5.0], periods=[100.0])
        inputs = synth_inputs(config, "train")
        assert np.all(inputs.h <= 100.0)
        assert np.all(inputs.Q_c >= 0.0)

    def test_unknown_split(self):
        with pytest.raises(ConfigurationError):
            synth_inputs(SimConfig(), "holdout")


class TestIntegrateCell:
    """Test RK4 integration of the bidirectional model"""

    def setup_method(self):
        self.params = TrueParams()

    def test_zero_feed_stays_at_origin(self):
        inputs = constant_inputs(20, C_feed=0.0)
        traj = integrate_cell(self.params, inputs, 20, 0.05)
        assert not np.any(traj.C_p) and not np.any(traj.C_f)

    def _exact(self, inputs, t_end):
        a, b = cell_matrices(self.params, inputs, 0)
        augmented = np.zeros((3, 3))
        augmented[:2, :2] = a
        augmented[:2, 2] = b
        return (expm(augmented * t_end) @ np.array([0.0, 0.0, 1.0]))[:2]

    def test_matches_matrix_exponential(self):
        inputs = constant_inputs(3)
        traj = integrate_cell(self.params, inputs, 3, 0.01)
        exact = self._exact(inputs, 10.0)
        assert np.max(np.abs(np.array([traj.C_p[2], traj.C_f[2]]) - exact)) < 1e-6

    def test_fourth_order_convergence(self):
        # coarse substeps keep the error well above round-off
        inputs = constant_inputs(3)
        exact = self._exact(inputs, 10.0)
        errors = []
        for dt in (2.5, 1.25, 0.625):
            traj = integrate_cell(self.params, inputs, 3, dt)
            errors.append(np.max(np.abs(np.array([traj.C_p[2], traj.C_f[2]]) - exact)))
        for coarse, fine in zip(errors[:-1], errors[1:]):
            assert 12.0 <= coarse / fine <= 20.0

    def test_halving_substep_changes_endpoint_little(self):
        inputs = synth_inputs(SimConfig(horizons={"train": 40}), "train")
        a = integrate_cell(self.params, inputs, 40, 0.02)
        b = integrate_cell(self.params, inputs, 40, 0.01)
        assert abs(a.C_f[-1] - b.C_f[-1]) < 1e-8

    def test_derivatives_are_right_hand_side(self):
        inputs = synth_inputs(SimConfig(horizons={"train": 30}), "train")
        traj = integrate_cell(self.params, inputs, 30, 0.05)
        a, b = cell_matrices(self.params, inputs, 7)
        expected = a @ np.array([traj.C_p[7], traj.C_f[7]]) + b
        assert np.allclose([traj.dC_p_dt[7], traj.dC_f_dt[7]], expected, rtol=0, atol=1e-15)

    def test_conservation(self):
        inputs = synth_inputs(SimConfig(horizons={"train": 200}), "train")
        traj = integrate_cell(self.params, inputs, 200, 0.05)
        lhs = traj.dC_f_dt * self.params.V_f + traj.dC_p_dt * self.params.V_p
        rhs = (inputs.per_minute("Q_feed") * inputs.C_feed - inputs.per_minute("Q_c") * traj.C_f
               - inputs.per_minute("Q_t") * traj.C_p)
        assert np.max(np.abs(lhs - rhs)) < 1e-3

    def test_non_negative_concentrations(self):
        inputs = synth_inputs(SimConfig(horizons={"train": 300}), "train")
        traj = integrate_cell(self.params, inputs, 300, 0.05)
        assert np.all(traj.C_p >= 0.0) and np.all(traj.C_f >= 0.0)

    def test_steady_start_has_zero_initial_derivative(self):
        inputs = constant_inputs(5)
        start = steady_state(self.params, inputs)
        traj = integrate_cell(self.params, inputs, 5, 0.05, initial_state=start)
        assert np.allclose(traj.dC_f_dt, 0.0, atol=1e-12)
        assert traj.C_f[0] > traj.C_p[0] > 0.0

    def test_blow_up_reports_time(self):
        inputs = constant_inputs(4)
        with pytest.raises(SimulationError) as exc_info:
            integrate_cell(self.params, inputs, 4, 0.05, initial_state=[np.inf, 0.0])
        assert "sample 0" in str(exc_info.value)

    def test_substep_larger_than_interval(self):
        with pytest.raises(ConfigurationError):
            integrate_cell(self.params, constant_inputs(2), 2, 6.0)


class TestNoiseAndOutliers:
    """Test measurement corruption"""

    def test_quiet_config_reproduces_trajectory(self):
        config = quiet_config(horizons={"train": 50})
        inputs = synth_inputs(config, "train")
        traj = integrate_cell(config.true_params, inputs, 50, config.dt_substep)
        dataset = inject_noise_outliers(traj, config, "train")
        assert np.array_equal(dataset.column("C_f_conc"), traj.C_f)
        assert np.array_equal(dataset.inputs(), inputs.to_matrix())

    def test_exact_outlier_count(self):
        config = SimConfig(horizons={"train": 10000}, outlier_rate=0.02)
        inputs = synth_inputs(config, "train")
        traj = integrate_cell(config.true_params, inputs, 10000, 1.0)
        dataset = inject_noise_outliers(traj, config, "train")
        assert int(dataset.outlier_mask.sum()) == 200

    def test_outliers_on_concentrate_leave_the_fences(self):
        hits = total = 0
        for seed in range(20):
            config = SimConfig(seed=seed, horizons={"train": 1000}, steady_start=True,
                               outlier_columns=["C_f_conc"])
            inputs = synth_inputs(config, "train")
            start = steady_state(config.true_params, inputs)
            traj = integrate_cell(config.true_params, inputs, 1000, 0.5, initial_state=start)
            dataset = inject_noise_outliers(traj, config, "train")
            q1, q3 = quartiles(traj.C_f)
            upper = q3 + 1.5 * (q3 - q1)
            values = dataset.column("C_f_conc")[dataset.outlier_mask]
            hits += int(np.sum(values > upper))
            total += values.size
        assert hits / total >= 0.95

    def test_outliers_respect_physical_ranges(self):
        config = SimConfig(seed=5, horizons={"train": 2000}, outlier_rate=0.05,
                           outlier_columns=["h", "C_s", "R_s_feed", "R_Au_feed", "C_f_conc"])
        inputs = synth_inputs(config, "train")
        traj = integrate_cell(config.true_params, inputs, 2000, 1.0)
        dataset = inject_noise_outliers(traj, config, "train")
        for name in ("h", "C_s", "R_s_feed", "R_Au_feed"):
            values = dataset.column(name)
            assert values.min() >= 0.0
            assert values.max() <= 100.0
        assert np.any(dataset.column("R_Au_feed")[dataset.outlier_mask] == 100.0)
        assert dataset.frame.drop(columns="t").to_numpy().min() >= 0.0

    def test_rate_above_limit(self):
        with pytest.raises(ConfigurationError) as exc_info:
            SimConfig(outlier_rate=0.2).validate()
        assert "outlier rate" in str(exc_info.value)


class TestSimulate:
    """Test the split pipeline"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_bitwise_identical_csv(self):
        config = SimConfig(horizons={"train": 60, "val": 30, "test": 30})
        paths = []
        for run in ("a", "b"):
            datasets = simulate(config)
            paths.append(export_csv(datasets["test"], os.path.join(self.temp_dir, f"{run}.csv")))
        with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
            assert a.read() == b.read()
        assert len(import_csv(paths[0])) == 30

    def test_from_dict_merges_defaults(self):
        config = SimConfig.from_dict({
            "seed": 2,
            "signals": {"Q_feed": {"baseline": 100.0}},
            "regimes": {"test": {"Q_feed": {"baseline": 140.0}}},
            "true_params": {"V_f": 1.5, "alpha_p": 0.004, "alpha_f": 0.002},
        })
        assert config.signals["Q_feed"].amplitudes == [12.0, 5.0]
        assert config.signal("test", "Q_feed").baseline == 140.0
        assert config.signal("val", "Q_feed").baseline == 135.0
        assert config.true_params.V_p == pytest.approx(25.2)

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigurationError) as exc_info:
            SimConfig.from_dict({"horizon": 10})
        assert "horizon" in str(exc_info.value)

    def test_froth_share_outside_bounds(self):
        with pytest.raises(ConfigurationError) as exc_info:
            SimConfig(true_params=TrueParams(V_f=3.0)).validate()
        assert "froth volume" in str(exc_info.value)
