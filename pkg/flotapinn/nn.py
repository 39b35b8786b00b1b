"""
Tanh multilayer perceptron, Adam, and the constrained parameter transforms
used for the physical parameters.
"""

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var
from .errors import ConfigurationError, TrainingError, UsageError

TOTAL_VOLUME = 26.7
FROTH_FRACTION_BOUNDS = (0.04, 0.07)


def _scalar_or_array(x: np.ndarray) -> float | np.ndarray:
    return float(x) if np.ndim(x) == 0 else x


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ConfigurationError(f"logit undefined for {p}")
    return float(np.log(p) - np.log1p(-p))


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y: float) -> float:
    """Raw value whose softplus equals ``y`` (y > 0)."""
    if y <= 0.0:
        raise ConfigurationError(f"softplus cannot reach non-positive value {y}")
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class MlpModel:
    """Fully connected network, tanh on hidden layers, identity on output.

    The optional shift/scale arrays form a fixed (non-learnable) standardization
    of inputs and de-standardization of outputs, so callers feed and receive
    raw plant units.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    output_shift: np.ndarray | None = None
    output_scale: np.ndarray | None = None

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def parameter_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != 2 * len(self.weights):
            raise UsageError(f"expected {2 * len(self.weights)} parameter arrays, got {len(arrays)}")
        self.weights = [np.array(a, dtype=float) for a in arrays[0::2]]
        self.biases = [np.array(a, dtype=float) for a in arrays[1::2]]

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def load_flat_parameters(self, flat: Sequence[float]) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.parameter_count:
            raise UsageError(f"expected {self.parameter_count} parameters, got {flat.size}")
        arrays, pos = [], 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            arrays.append(flat[pos:pos + n_in * n_out].reshape(n_in, n_out))
            pos += n_in * n_out
            arrays.append(flat[pos:pos + n_out].copy())
            pos += n_out
        self.set_parameters(arrays)

    def lift(self, tape: Tape) -> list[Var]:
        """Place the parameters on ``tape`` as leaves, in ``parameters()`` order."""
        return [tape.lift(p) for p in self.parameters()]

    def standardize(self, x_mean, x_std, y_mean=None, y_std=None) -> None:
        """Install fixed shift/scale layers; zero spreads are replaced by 1."""
        x_std = np.where(np.asarray(x_std) > 0.0, x_std, 1.0)
        self.input_shift = np.asarray(x_mean, dtype=float).copy()
        self.input_scale = np.asarray(x_std, dtype=float).copy()
        if y_mean is not None:
            y_std = np.where(np.asarray(y_std) > 0.0, y_std, 1.0)
            self.output_shift = np.asarray(y_mean, dtype=float).copy()
            self.output_scale = np.asarray(y_std, dtype=float).copy()

    def copy(self) -> "MlpModel":
        return MlpModel.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        def opt(a):
            return None if a is None else [float(x) for x in a]
        return {
            "layer_sizes": list(self.layer_sizes),
            "parameters": [float(x) for x in self.flat_parameters()],
            "input_shift": opt(self.input_shift),
            "input_scale": opt(self.input_scale),
            "output_shift": opt(self.output_shift),
            "output_scale": opt(self.output_scale),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpModel":
        def opt(a):
            return None if a is None else np.asarray(a, dtype=float)
        model = mlp_init(data["layer_sizes"], seed=0)
        model.load_flat_parameters(data["parameters"])
        model.input_shift = opt(data.get("input_shift"))
        model.input_scale = opt(data.get("input_scale"))
        model.output_shift = opt(data.get("output_shift"))
        model.output_scale = opt(data.get("output_scale"))
        return model


def mlp_init(layer_sizes: Sequence[int], seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    sizes = [int(n) for n in layer_sizes] if layer_sizes else []
    if len(sizes) < 2:
        raise ConfigurationError(f"an MLP needs at least 2 layer sizes, got {list(layer_sizes or [])}")
    if any(n < 1 for n in sizes):
        raise ConfigurationError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpModel(sizes, weights, biases)


def mlp_forward(model: MlpModel, x: Var, params: Sequence[Var]) -> Var:
    """Taped forward pass of a (batch, n_inputs) input.

    ``params`` are the lifted parameters from ``model.lift``. Tangents seeded on
    ``x`` propagate to the output.
    """
    if np.ndim(x.value) != 2 or x.shape[1] != model.n_inputs:
        raise UsageError(f"input of shape {x.shape} does not match {model.n_inputs} network inputs")
    if len(params) != 2 * len(model.weights):
        raise UsageError(f"expected {2 * len(model.weights)} lifted parameters, got {len(params)}")
    h = x
    if model.input_shift is not None:
        h = (h - model.input_shift) * (1.0 / model.input_scale)
    n_layers = len(model.weights)
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = h.tanh()
    if model.output_shift is not None:
        h = h * model.output_scale + model.output_shift
    return h


def mlp_predict(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Untaped forward pass with the same arithmetic as ``mlp_forward``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise UsageError(f"input of shape {x.shape} does not match {model.n_inputs} network inputs")
    h = x
    if model.input_shift is not None:
        h = (h - model.input_shift) * (1.0 / model.input_scale)
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < n_layers - 1:
            h = np.tanh(h)
    if model.output_shift is not None:
        h = h * model.output_scale + model.output_shift
    return h


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_parameters(cls, params: Sequence, lr: float, **kwargs) -> "AdamState":
        zeros = [np.zeros(np.shape(p)) for p in params]
        return cls(lr=lr, m=zeros, v=[z.copy() for z in zeros], **kwargs)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "step": self.step,
            "m": [np.ravel(a).tolist() for a in self.m],
            "v": [np.ravel(a).tolist() for a in self.v],
            "shapes": [list(np.shape(a)) for a in self.m],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdamState":
        shapes = [tuple(s) for s in data["shapes"]]
        return cls(
            lr=data["lr"], beta1=data["beta1"], beta2=data["beta2"], eps=data["eps"],
            step=data["step"],
            m=[np.asarray(a, dtype=float).reshape(s) for a, s in zip(data["m"], shapes)],
            v=[np.asarray(a, dtype=float).reshape(s) for a, s in zip(data["v"], shapes)],
        )


def adam_step(state: AdamState, params: Sequence, grads: Sequence) -> list:
    """One bias-corrected Adam update; returns the new parameters.

    Raises:
        TrainingError: a gradient holds NaN or inf
    """
    if len(grads) != len(params) or len(state.m) != len(params):
        raise UsageError(
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment slots")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {i}", parameter_index=i)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=float)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        new = np.asarray(p, dtype=float) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated.append(_scalar_or_array(new))
    return updated


@dataclass
class ConstrainedVolume:
    """Froth/pulp volume split with the froth share held inside its bounds.

    V_f = total * (lower + (upper - lower) * sigmoid(raw)), V_p = total - V_f.
    """

    raw: float = 0.0
    total: float = TOTAL_VOLUME
    lower: float = FROTH_FRACTION_BOUNDS[0]
    upper: float = FROTH_FRACTION_BOUNDS[1]

    @classmethod
    def from_froth_volume(cls, froth_volume: float, total: float = TOTAL_VOLUME,
                          lower: float = FROTH_FRACTION_BOUNDS[0],
                          upper: float = FROTH_FRACTION_BOUNDS[1]) -> "ConstrainedVolume":
        share = (froth_volume / total - lower) / (upper - lower)
        if not 0.0 < share < 1.0:
            raise ConfigurationError(
                f"froth volume {froth_volume} is outside the open range "
                f"({lower * total}, {upper * total})")
        return cls(raw=logit(share), total=total, lower=lower, upper=upper)

    def decode(self) -> tuple[float, float]:
        froth = self.total * (self.lower + (self.upper - self.lower) * float(sigmoid(self.raw)))
        return froth, self.total - froth


def constrained_volumes(cv: ConstrainedVolume, raw: Var) -> tuple[Var, Var]:
    """Taped (V_f, V_p) from the lifted raw parameter ``raw``."""
    share = raw.sigmoid().scale(cv.upper - cv.lower) + cv.lower
    froth = share.scale(cv.total)
    return froth, cv.total - froth
