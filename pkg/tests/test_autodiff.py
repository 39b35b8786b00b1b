"""
Tests for the reverse-mode tape with forward input tangents
"""

import numpy as np
import pytest

from flotapinn.autodiff import Tape, apply, backward, lift
from flotapinn.errors import AutodiffDomainError, UsageError
from flotapinn.nn import mlp_forward, mlp_init, mlp_predict


def _central_difference(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2.0 * h)


class TestLift:
    """Test leaf creation"""

    def setup_method(self):
        self.tape = Tape()

    def test_zero_leaf(self):
        x = lift(self.tape, 0.0, 0.0)
        assert x.value == 0.0
        assert x.tangent == 0.0
        assert x.adjoint == 0.0

    def test_seeded_time_input(self):
        x = lift(self.tape, 1.5, 1.0)
        assert x.value == 1.5
        assert x.tangent == 1.0

    def test_identity_gradient(self):
        x = lift(self.tape, 2.0, 0.0)
        grads = backward(x)
        assert grads[x.id] == 1.0
        assert x.adjoint == 1.0

    def test_array_leaf_tangent_broadcast(self):
        x = self.tape.lift(np.ones((3, 2)), 1.0)
        assert x.shape == (3, 2)
        assert np.array_equal(x.tangent, np.ones((3, 2)))


class TestApply:
    """Test recorded operations and their tangents"""

    def setup_method(self):
        self.tape = Tape()

    def test_tanh_at_zero(self):
        y = apply("tanh", self.tape.lift(0.0, 1.0))
        assert y.value == 0.0
        assert y.tangent == pytest.approx(1.0)

    def test_product_rule(self):
        a = self.tape.lift(2.0)
        b = self.tape.lift(3.0)
        y = apply("mul", a, b)
        grads = backward(y)
        assert grads[a.id] == 3.0
        assert grads[b.id] == 2.0

    def test_tanh_tangent_matches_finite_difference(self):
        y = apply("tanh", self.tape.lift(0.7, 1.0))
        expected = _central_difference(np.tanh, 0.7)
        assert abs(y.tangent - expected) / abs(expected) < 1e-8

    def test_scale_and_neg(self):
        x = self.tape.lift(2.0, 1.0)
        y = apply("neg", apply("scale", x, constant=3.0))
        assert y.value == -6.0
        assert y.tangent == -3.0

    def test_division_by_zero_names_node(self):
        a = self.tape.lift(1.0)
        b = self.tape.lift(0.0)
        with pytest.raises(AutodiffDomainError) as exc_info:
            apply("div", a, b)
        assert f"denominator node {b.id}" in str(exc_info.value)

    def test_unknown_op(self):
        with pytest.raises(UsageError) as exc_info:
            apply("exp", self.tape.lift(1.0))
        assert "unknown op" in str(exc_info.value)

    def test_operands_from_other_tape(self):
        other = Tape().lift(1.0)
        with pytest.raises(UsageError) as exc_info:
            self.tape.apply("add", self.tape.lift(1.0), other)
        assert "different tape" in str(exc_info.value)

    def test_incompatible_shapes(self):
        a = self.tape.lift(np.ones(3))
        b = self.tape.lift(np.ones(4))
        with pytest.raises(UsageError):
            a + b

    def test_tangent_linearity(self):
        a = self.tape.lift(np.array([1.0, 2.0]), np.array([0.3, -0.2]))
        b = self.tape.lift(np.array([0.5, 0.1]), np.array([1.1, 0.7]))
        assert np.array_equal((a + b).tangent, a.tangent + b.tangent)

    def test_numpy_scalar_on_left(self):
        x = self.tape.lift(2.0, 1.0)
        y = np.float64(3.0) * x
        assert y.value == 6.0
        assert y.tangent == 3.0


class TestBackward:
    """Test adjoint accumulation"""

    def setup_method(self):
        self.tape = Tape()

    def test_square(self):
        x = self.tape.lift(3.0)
        grads = backward(x * x)
        assert grads[x.id] == 6.0

    def test_forward_over_reverse(self):
        # u = w * t with t seeded: du/dt = w, loss = w^2
        w = self.tape.lift(1.7)
        t = self.tape.lift(0.4, 1.0)
        u = w * t
        du_dt = u.tangent_of()
        loss = du_dt * du_dt
        assert loss.value == pytest.approx(1.7 ** 2)
        grads = backward(loss)
        assert grads[w.id] == pytest.approx(2.0 * 1.7)

    def test_loss_not_on_tape(self):
        x = Tape().lift(1.0)
        with pytest.raises(UsageError) as exc_info:
            self.tape.backward(x)
        assert "not a node of this tape" in str(exc_info.value)

    def test_non_scalar_loss(self):
        x = self.tape.lift(np.ones(3))
        with pytest.raises(UsageError) as exc_info:
            self.tape.backward(x * 2.0)
        assert "scalar" in str(exc_info.value)

    def test_adjoints_of_composed_function(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a0, b0 = rng.uniform(0.5, 2.0, size=2)

            def f(a, b):
                return (a * b - a / b).tanh() + (a + 1.0).sigmoid() * b.softplus()

            def plain(x, y):
                tape = Tape()
                return f(tape.lift(x), tape.lift(y)).value

            tape = Tape()
            a, b = tape.lift(a0), tape.lift(b0)
            grads = tape.gradients(f(a, b), [a, b])

            da = _central_difference(lambda x: plain(x, b0), a0)
            db = _central_difference(lambda y: plain(a0, y), b0)
            assert abs(grads[0] - da) / abs(da) < 1e-5
            assert abs(grads[1] - db) / abs(db) < 1e-5

    def test_mlp_parameter_gradients_match_finite_differences(self):
        model = mlp_init([3, 5, 4, 2], seed=3)
        x = np.random.default_rng(1).normal(size=(4, 3))

        def loss_of(params):
            tape = Tape()
            leaves = [tape.lift(p) for p in params]
            return mlp_forward(model, tape.lift(x), leaves).sum(), tape, leaves

        params = model.parameters()
        loss, tape, leaves = loss_of(params)
        grads = tape.gradients(loss, leaves)
        h = 1e-6
        for i, p in enumerate(params):
            for index in [tuple(0 for _ in p.shape), tuple(s - 1 for s in p.shape)]:
                plus = [q.copy() for q in params]
                minus = [q.copy() for q in params]
                plus[i][index] += h
                minus[i][index] -= h
                fd = (loss_of(plus)[0].value - loss_of(minus)[0].value) / (2.0 * h)
                assert abs(grads[i][index] - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_mlp_time_tangent_matches_finite_difference(self):
        model = mlp_init([3, 6, 2], seed=5)
        x = np.random.default_rng(2).normal(size=(5, 3))
        seed = np.zeros_like(x)
        seed[:, 0] = 1.0
        tape = Tape()
        out = mlp_forward(model, tape.lift(x, seed), model.lift(tape))

        h = 1e-6
        shifted = [x.copy(), x.copy()]
        shifted[0][:, 0] += h
        shifted[1][:, 0] -= h
        values = [mlp_forward(model, t.lift(s), model.lift(t)).value
                  for t, s in ((Tape(), shifted[0]), (Tape(), shifted[1]))]
        fd = (values[0] - values[1]) / (2.0 * h)
        assert np.allclose(out.tangent, fd, rtol=1e-4, atol=1e-8)

    def test_directional_gradients_over_100_seeds(self):
        # loss includes the squared input tangent, so this covers forward-over-reverse
        h = 1e-6
        for seed in range(100):
            rng = np.random.default_rng(seed)
            model = mlp_init([3, 4, 2], seed=seed)
            x = rng.normal(size=(3, 3))
            x_tangent = rng.normal(size=(3, 3))
            direction = rng.normal(size=model.parameter_count)
            flat = model.flat_parameters()

            def loss_of(theta):
                model.load_flat_parameters(theta)
                tape = Tape()
                leaves = model.lift(tape)
                out = mlp_forward(model, tape.lift(x, x_tangent), leaves)
                rate = out.tangent_of()
                return (out * out).sum() + (rate * rate).sum(), tape, leaves

            loss, tape, leaves = loss_of(flat)
            grad = np.concatenate([np.ravel(g) for g in tape.gradients(loss, leaves)])
            fd = (loss_of(flat + h * direction)[0].value
                  - loss_of(flat - h * direction)[0].value) / (2.0 * h)
            assert abs(grad @ direction - fd) <= 1e-5 * max(1.0, abs(fd)), f"seed {seed}"

    def test_input_tangents_over_100_seeds(self):
        h = 1e-6
        for seed in range(100):
            rng = np.random.default_rng(seed)
            model = mlp_init([3, 5, 2], seed=seed)
            x = rng.normal(size=(4, 3))
            direction = rng.normal(size=(4, 3))
            tape = Tape()
            out = mlp_forward(model, tape.lift(x, direction), model.lift(tape))
            fd = (mlp_predict(model, x + h * direction) - mlp_predict(model, x - h * direction)) / (2.0 * h)
            assert np.allclose(out.tangent, fd, rtol=1e-5, atol=1e-7), f"seed {seed}"


class TestCheckpoint:
    """Test tape truncation between minibatches"""

    def test_truncate_restores_count_and_replays_identically(self):
        tape = Tape()
        w = tape.lift(np.array([[0.3], [-0.8]]))
        mark = tape.checkpoint()
        x = np.array([[1.0, 2.0], [3.0, -1.0]])

        first = ((tape.lift(x) @ w).tanh()).sum()
        tape.truncate(mark)
        assert len(tape) == mark
        second = ((tape.lift(x) @ w).tanh()).sum()
        assert first.value == second.value

    def test_truncated_node_cannot_be_reused(self):
        tape = Tape()
        mark = tape.checkpoint()
        stale = tape.lift(1.0)
        tape.truncate(mark)
        with pytest.raises(UsageError) as exc_info:
            stale + 1.0
        assert "truncated" in str(exc_info.value)

    def test_truncate_out_of_range(self):
        with pytest.raises(UsageError):
            Tape().truncate(5)
