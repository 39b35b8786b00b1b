"""
Tests for the MLP, Adam and the constrained volume transform
"""

import numpy as np
import pytest

from flotapinn.autodiff import Tape
from flotapinn.errors import ConfigurationError, TrainingError, UsageError
from flotapinn.nn import (
    AdamState,
    ConstrainedVolume,
    MlpModel,
    adam_step,
    constrained_volumes,
    mlp_forward,
    mlp_init,
    mlp_predict,
)


class TestMlpInit:
    """Test network initialization"""

    def test_full_scale_parameter_count(self):
        model = mlp_init([12, 256, 512, 256, 2], seed=0)
        assert model.parameter_count == 267522
        assert model.flat_parameters().size == 267522

    def test_same_seed_identical(self):
        a = mlp_init([12, 8, 2], seed=4)
        b = mlp_init([12, 8, 2], seed=4)
        assert np.array_equal(a.flat_parameters(), b.flat_parameters())

    def test_biases_zero_and_glorot_bound(self):
        model = mlp_init([12, 32, 2], seed=1)
        assert all(not np.any(b) for b in model.biases)
        bound = np.sqrt(6.0 / (12 + 32))
        assert np.all(np.abs(model.weights[0]) <= bound)

    @pytest.mark.parametrize("sizes", [[], [12], [12, 0, 2]])
    def test_invalid_layers(self, sizes):
        with pytest.raises(ConfigurationError):
            mlp_init(sizes, seed=0)


class TestMlpForward:
    """Test taped and untaped forward passes"""

    def test_odd_function_at_zero(self):
        model = MlpModel([1, 1, 1], [np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
        tape = Tape()
        out = mlp_forward(model, tape.lift(np.zeros((1, 1))), model.lift(tape))
        assert out.value[0, 0] == 0.0

    def test_zero_weights_give_output_bias(self):
        model = mlp_init([3, 4, 2], seed=0)
        model.set_parameters([np.zeros((3, 4)), np.zeros(4), np.zeros((4, 2)), np.array([1.5, -2.0])])
        x = np.random.default_rng(0).normal(size=(6, 3))
        assert np.array_equal(mlp_predict(model, x), np.tile([1.5, -2.0], (6, 1)))

    def test_taped_matches_untaped_with_standardization(self):
        model = mlp_init([3, 5, 2], seed=2)
        model.standardize([1.0, 2.0, 3.0], [0.5, 0.0, 2.0], [10.0, 1.0], [3.0, 0.5])
        x = np.random.default_rng(3).normal(size=(4, 3))
        tape = Tape()
        taped = mlp_forward(model, tape.lift(x), model.lift(tape)).value
        assert np.array_equal(taped, mlp_predict(model, x))

    def test_dimension_mismatch(self):
        model = mlp_init([3, 2], seed=0)
        with pytest.raises(UsageError) as exc_info:
            mlp_predict(model, np.zeros((2, 4)))
        assert "3 network inputs" in str(exc_info.value)

    def test_dict_round_trip(self):
        model = mlp_init([3, 4, 2], seed=9)
        model.standardize(np.ones(3), np.ones(3) * 2.0, np.zeros(2), np.ones(2))
        x = np.random.default_rng(4).normal(size=(5, 3))
        assert np.array_equal(MlpModel.from_dict(model.to_dict()).copy().parameters()[0],
                              model.parameters()[0])
        assert np.array_equal(mlp_predict(model.copy(), x), mlp_predict(model, x))


class TestAdam:
    """Test the Adam update"""

    def test_first_step_magnitude(self):
        for g in (3.0, -0.02, 1e-3):
            state = AdamState.for_parameters([0.0], lr=1e-5)
            (new,) = adam_step(state, [0.0], [g])
            assert abs(abs(new) - 1e-5) < 1e-9
            assert state.step == 1

    def test_zero_gradient_keeps_parameters(self):
        params = [np.array([1.0, -2.0]), 0.5]
        state = AdamState.for_parameters(params, lr=1e-2)
        for _ in range(5):
            params = adam_step(state, params, [np.zeros(2), 0.0])
        assert np.array_equal(params[0], [1.0, -2.0])
        assert params[1] == 0.5

    def test_zero_learning_rate(self):
        params = [np.array([0.3, 0.4])]
        state = AdamState.for_parameters(params, lr=0.0)
        out = adam_step(state, params, [np.array([5.0, -7.0])])
        assert np.array_equal(out[0], params[0])

    def test_non_finite_gradient_names_parameter(self):
        state = AdamState.for_parameters([0.0, 0.0], lr=1e-3)
        with pytest.raises(TrainingError) as exc_info:
            adam_step(state, [0.0, 0.0], [1.0, np.nan])
        assert exc_info.value.parameter_index == 1
        assert "parameter 1" in str(exc_info.value)

    def test_deterministic_runs(self):
        def run():
            rng = np.random.default_rng(7)
            params = [np.zeros(3)]
            state = AdamState.for_parameters(params, lr=1e-3)
            for _ in range(100):
                params = adam_step(state, params, [rng.normal(size=3)])
            return params[0]
        assert np.array_equal(run(), run())

    def test_state_dict_round_trip(self):
        state = AdamState.for_parameters([np.zeros((2, 2)), 0.0], lr=1e-3)
        adam_step(state, [np.zeros((2, 2)), 0.0], [np.ones((2, 2)), 2.0])
        restored = AdamState.from_dict(state.to_dict())
        assert restored.step == 1
        assert np.array_equal(restored.m[0], state.m[0])


class TestConstrainedVolume:
    """Test the froth/pulp volume parametrization"""

    def test_raw_zero(self):
        froth, pulp = ConstrainedVolume(raw=0.0).decode()
        assert froth == pytest.approx(1.4685, abs=1e-12)
        assert pulp == pytest.approx(25.2315, abs=1e-12)

    def test_bounds_over_wide_range(self):
        for raw in np.linspace(-1e6, 1e6, 101):
            froth, pulp = ConstrainedVolume(raw=float(raw)).decode()
            assert 0.04 - 1e-12 <= froth / 26.7 <= 0.07 + 1e-12
            assert 0.93 - 1e-12 <= pulp / 26.7 <= 0.96 + 1e-12
            assert abs(froth + pulp - 26.7) < 1e-12

    def test_saturation(self):
        froth, _ = ConstrainedVolume(raw=50.0).decode()
        assert froth == pytest.approx(1.869, abs=1e-9)

    def test_from_froth_volume_inverts_decode(self):
        cv = ConstrainedVolume.from_froth_volume(1.6)
        assert cv.decode()[0] == pytest.approx(1.6, abs=1e-12)

    def test_from_froth_volume_out_of_range(self):
        with pytest.raises(ConfigurationError):
            ConstrainedVolume.from_froth_volume(2.5)

    def test_gradient_matches_finite_difference(self):
        cv = ConstrainedVolume()
        for raw0 in (-2.0, 0.0, 0.7):
            tape = Tape()
            raw = tape.lift(raw0)
            froth, pulp = constrained_volumes(cv, raw)
            (grad,) = tape.gradients(froth * pulp, [raw])

            def f(r):
                v_f, v_p = ConstrainedVolume(raw=r).decode()
                return v_f * v_p
            h = 1e-6
            fd = (f(raw0 + h) - f(raw0 - h)) / (2.0 * h)
            assert abs(grad - fd) / abs(fd) < 1e-5
