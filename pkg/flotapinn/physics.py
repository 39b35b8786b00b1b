"""
Flotation residual models and the composite physics-informed loss.

Three first-principles models of a single rougher cell are expressed as
residuals of the network state (C_p, C_f) and its time derivative:

- bidirectional: pulp/froth balances with collection (alpha_p) and drainage
  (alpha_f) driven by the air flow
- unidirectional: pulp-to-froth transfer at an average flotation rate R
  estimated by an auxiliary network
- mass-balance: overall cell mineral balance, a single residual on C_f

Flows arrive in m3/h and are converted to m3/min so every term of a residual
is in g/(t*min).
"""

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import Tape, Var
from .dataset import FLOW_COLUMNS, INPUT_COLUMNS, PERCENT_COLUMNS
from .errors import DataError, FlotationError, UsageError
from .nn import (
    ConstrainedVolume,
    MlpModel,
    constrained_volumes,
    mlp_forward,
    softplus,
    softplus_inverse,
)

MINUTES_PER_HOUR = 60.0
DEFAULT_ALPHA_INIT = 0.003
TIME_TANGENTS = ("trajectory", "partial")


class ModelKind(str, Enum):
    BIDIRECTIONAL = "bidirectional"
    UNIDIRECTIONAL = "unidirectional"
    MASS_BALANCE = "mass-balance"


RESIDUAL_ARITY = {
    ModelKind.BIDIRECTIONAL: 2,
    ModelKind.UNIDIRECTIONAL: 2,
    ModelKind.MASS_BALANCE: 1,
}


@dataclass(frozen=True)
class ExogenousInputs:
    """Model inputs as column arrays, in the units of the dataset."""

    t: np.ndarray
    Q_air: np.ndarray
    h: np.ndarray
    C_s: np.ndarray
    R_s_feed: np.ndarray
    C_feed: np.ndarray
    R_Au_feed: np.ndarray
    P80: np.ndarray
    Q_feed: np.ndarray
    F_s_feed: np.ndarray
    Q_t: np.ndarray
    Q_c: np.ndarray

    @classmethod
    def from_matrix(cls, x: np.ndarray) -> "ExogenousInputs":
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != len(INPUT_COLUMNS):
            raise UsageError(f"expected a (N, {len(INPUT_COLUMNS)}) input matrix, got {x.shape}")
        return cls(**{name: x[:, i].copy() for i, name in enumerate(INPUT_COLUMNS)})

    def to_matrix(self) -> np.ndarray:
        return np.column_stack([np.asarray(getattr(self, name), dtype=float)
                                for name in INPUT_COLUMNS])

    def per_minute(self, name: str) -> np.ndarray:
        """A volumetric flow column converted from m3/h to m3/min."""
        if name not in FLOW_COLUMNS:
            raise UsageError(f"{name} is not a volumetric flow")
        return np.asarray(getattr(self, name), dtype=float) / MINUTES_PER_HOUR

    def check(self) -> None:
        """Raise DataError on a negative flow or a percentage outside [0, 100]."""
        for name in FLOW_COLUMNS:
            bad = np.flatnonzero(np.asarray(getattr(self, name)) < 0.0)
            if bad.size:
                raise DataError(f"negative flow in {name} at row {int(bad[0])}")
        for name in PERCENT_COLUMNS:
            values = np.asarray(getattr(self, name))
            bad = np.flatnonzero((values < 0.0) | (values > 100.0))
            if bad.size:
                raise DataError(f"percentage {name} outside [0, 100] at row {int(bad[0])}")


def tangent_seed(x: np.ndarray, mode: str = "trajectory") -> np.ndarray:
    """Forward-mode seed that makes the network tangent a time derivative.

    ``partial`` seeds t alone. ``trajectory`` also seeds every other input
    with its rate of change along the sampled series (central differences in
    time order), so the tangent of u is the total derivative du/dt along the
    operating trajectory.

    Raises:
        DataError: two rows share a time stamp
    """
    if mode not in TIME_TANGENTS:
        raise UsageError(f"unknown time tangent '{mode}', expected one of {list(TIME_TANGENTS)}")
    x = np.asarray(x, dtype=float)
    seed = np.zeros_like(x)
    seed[:, 0] = 1.0
    if mode == "partial" or x.shape[0] < 2:
        return seed
    order = np.argsort(x[:, 0], kind="stable")
    t = x[order, 0]
    repeated = np.flatnonzero(np.diff(t) <= 0.0)
    if repeated.size:
        raise DataError(f"repeated time stamp t={t[repeated[0]]:g}")
    seed[order, 1:] = np.gradient(x[order, 1:], t, axis=0)
    return seed


@dataclass
class StateOutputs:
    """Network state and its time tangents, all nodes of one tape."""

    C_p: Var
    C_f: Var
    dC_p_dt: Var
    dC_f_dt: Var

    @classmethod
    def from_network(cls, u: Var) -> "StateOutputs":
        """Split a (N, 2) network output whose tangent was seeded by ``tangent_seed``."""
        c_p, c_f = u.column(0), u.column(1)
        return cls(c_p, c_f, c_p.tangent_of(), c_f.tangent_of())

    @classmethod
    def lift(cls, tape: Tape, C_p, C_f, dC_p_dt, dC_f_dt) -> "StateOutputs":
        return cls(tape.lift(C_p), tape.lift(C_f), tape.lift(dC_p_dt), tape.lift(dC_f_dt))


@dataclass
class BoundLambdas:
    """Physical parameters decoded on a tape; ``raws`` are the leaves to optimize."""

    kind: ModelKind
    raws: dict[str, Var]
    V_p: Var
    V_f: Var
    alpha_f: Var | None = None
    alpha_p: Var | None = None

    @property
    def vector(self) -> tuple[Var, ...]:
        if self.kind is ModelKind.BIDIRECTIONAL:
            return (self.V_p, self.alpha_f, self.V_f, self.alpha_p)
        if self.kind is ModelKind.UNIDIRECTIONAL:
            return (self.V_p, self.V_f)
        return (self.V_f, self.V_p)


@dataclass
class LambdaSet:
    """Learnable physical parameters of one residual model.

    Volumes go through ConstrainedVolume; the bidirectional rate coefficients
    are softplus of their raw values.
    """

    kind: ModelKind
    volume: ConstrainedVolume = field(default_factory=ConstrainedVolume)
    alpha_f_raw: float | None = None
    alpha_p_raw: float | None = None

    def __post_init__(self) -> None:
        self.kind = ModelKind(self.kind)
        if self.kind is ModelKind.BIDIRECTIONAL:
            if self.alpha_f_raw is None:
                self.alpha_f_raw = softplus_inverse(DEFAULT_ALPHA_INIT)
            if self.alpha_p_raw is None:
                self.alpha_p_raw = softplus_inverse(DEFAULT_ALPHA_INIT)

    @classmethod
    def from_physical(cls, kind: ModelKind | str, V_f: float | None = None,
                      alpha_p: float | None = None, alpha_f: float | None = None,
                      total: float | None = None) -> "LambdaSet":
        kind = ModelKind(kind)
        volume = ConstrainedVolume() if total is None else ConstrainedVolume(total=total)
        if V_f is not None:
            volume = ConstrainedVolume.from_froth_volume(V_f, volume.total)
        if kind is not ModelKind.BIDIRECTIONAL:
            return cls(kind, volume)
        return cls(kind, volume,
                   alpha_f_raw=softplus_inverse(alpha_f if alpha_f is not None else DEFAULT_ALPHA_INIT),
                   alpha_p_raw=softplus_inverse(alpha_p if alpha_p is not None else DEFAULT_ALPHA_INIT))

    def raw_values(self) -> dict[str, float]:
        raws = {"volume_raw": float(self.volume.raw)}
        if self.kind is ModelKind.BIDIRECTIONAL:
            raws["alpha_f_raw"] = float(self.alpha_f_raw)
            raws["alpha_p_raw"] = float(self.alpha_p_raw)
        return raws

    def set_raw_values(self, raws: dict[str, float]) -> None:
        self.volume.raw = float(raws["volume_raw"])
        if self.kind is ModelKind.BIDIRECTIONAL:
            self.alpha_f_raw = float(raws["alpha_f_raw"])
            self.alpha_p_raw = float(raws["alpha_p_raw"])

    def decode(self) -> dict[str, float]:
        froth, pulp = self.volume.decode()
        out = {"V_p": pulp, "V_f": froth}
        if self.kind is ModelKind.BIDIRECTIONAL:
            out["alpha_f"] = float(softplus(self.alpha_f_raw))
            out["alpha_p"] = float(softplus(self.alpha_p_raw))
        return out

    def lift(self, tape: Tape) -> BoundLambdas:
        raws = {name: tape.lift(value) for name, value in self.raw_values().items()}
        froth, pulp = constrained_volumes(self.volume, raws["volume_raw"])
        bound = BoundLambdas(self.kind, raws, V_p=pulp, V_f=froth)
        if self.kind is ModelKind.BIDIRECTIONAL:
            bound.alpha_f = raws["alpha_f_raw"].softplus()
            bound.alpha_p = raws["alpha_p_raw"].softplus()
        return bound

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "total_volume": self.volume.total, **self.raw_values()}

    @classmethod
    def from_dict(cls, data: dict) -> "LambdaSet":
        lam = cls(ModelKind(data["kind"]), ConstrainedVolume(total=data.get("total_volume", 26.7)))
        lam.set_raw_values(data)
        return lam


def _require(lam: BoundLambdas, kind: ModelKind) -> None:
    if lam.kind is not kind:
        raise UsageError(f"parameters are for the {lam.kind.value} model, not {kind.value}")
    for name in ("V_p", "V_f"):
        if np.any(np.asarray(getattr(lam, name).value) <= 0.0):
            raise FlotationError(f"internal error: non-positive volume {name}")


def residual_bidirectional(inputs: ExogenousInputs, st: StateOutputs,
                           lam: BoundLambdas) -> tuple[Var, Var]:
    _require(lam, ModelKind.BIDIRECTIONAL)
    v_p, alpha_f, v_f, alpha_p = lam.vector
    q_air = inputs.per_minute("Q_air")
    feed = np.asarray(inputs.C_feed, dtype=float) * inputs.per_minute("Q_feed")
    q_t = inputs.per_minute("Q_t")
    q_c = inputs.per_minute("Q_c")

    f_cp = (st.dC_p_dt - feed / v_p
            - alpha_f * q_air * st.C_f * v_f / v_p
            + (alpha_p * q_air + q_t / v_p) * st.C_p)
    f_cf = (st.dC_f_dt - alpha_p * q_air * st.C_p * v_p / v_f
            + (alpha_f * q_air + q_c / v_f) * st.C_f)
    return f_cp, f_cf


def residual_unidirectional(inputs: ExogenousInputs, st: StateOutputs,
                            lam: BoundLambdas, rate: Var) -> tuple[Var, Var]:
    """Residuals of the pulp-to-froth model; ``rate`` is the flotation rate R."""
    _require(lam, ModelKind.UNIDIRECTIONAL)
    v_p, v_f = lam.vector
    feed = np.asarray(inputs.C_feed, dtype=float) * inputs.per_minute("Q_feed")
    q_t = inputs.per_minute("Q_t")
    q_c = inputs.per_minute("Q_c")

    f_cp = st.dC_p_dt - feed / v_p + q_t * st.C_p / v_p + rate / v_p
    f_cf = st.dC_f_dt + q_c * st.C_f / v_f - rate / v_f
    return f_cp, f_cf


def residual_mass_balance(inputs: ExogenousInputs, st: StateOutputs,
                          lam: BoundLambdas) -> Var:
    _require(lam, ModelKind.MASS_BALANCE)
    v_f, v_p = lam.vector
    feed = inputs.per_minute("Q_feed") * np.asarray(inputs.C_feed, dtype=float)
    q_t = inputs.per_minute("Q_t")
    q_c = inputs.per_minute("Q_c")

    return (st.dC_f_dt - feed / v_f + q_c * st.C_f / v_f + q_t * st.C_p / v_f
            + st.dC_p_dt * v_p / v_f)


def flotation_rate(model: MlpModel, params: Sequence[Var], x: Var, u: Var) -> Var:
    """Average flotation rate R(t, x, u), kept non-negative by softplus.

    The auxiliary network sees [t, the 12 model inputs, C_p, C_f].
    """
    features = x.tape.apply("concat", x.column(0), x, u)
    return mlp_forward(model, features, params).column(0).softplus()


def data_misfit(targets: np.ndarray, predictions: Var) -> Var:
    """(1/N) * sum_i ||u_i - u_hat_i||^2."""
    targets = np.asarray(targets, dtype=float)
    n = targets.shape[0] if targets.ndim else 0
    if n == 0:
        raise UsageError("empty batch")
    if predictions.shape != targets.shape:
        raise UsageError(f"predictions {predictions.shape} and targets {targets.shape} differ")
    diff = predictions - targets
    return (diff * diff).sum().scale(1.0 / n)


def residual_misfit(residuals: Sequence[Var], n: int) -> Var:
    """(1/N) * sum_i ||f_i||^2 over every residual component."""
    if n == 0:
        raise UsageError("empty batch")
    total = None
    for f in residuals:
        term = (f * f).sum()
        total = term if total is None else total + term
    return total.scale(1.0 / n)


def pinn_loss(targets: np.ndarray, predictions: Var, residuals: Sequence[Var],
              kind: ModelKind | str) -> Var:
    """L = MSE_u + MSE_f with collocation points at the data points."""
    kind = ModelKind(kind)
    residuals = list(residuals)
    if len(residuals) != RESIDUAL_ARITY[kind]:
        raise UsageError(
            f"{kind.value} model has {RESIDUAL_ARITY[kind]} residual components, got {len(residuals)}")
    n = int(np.shape(targets)[0]) if np.ndim(targets) else 0
    return data_misfit(targets, predictions) + residual_misfit(residuals, n)


@dataclass(frozen=True)
class ResidenceScale:
    """Turns per-volume residuals into concentrations (g/t).

    Each balance is multiplied by the residence time V/Q of its compartment:
    pulp by V_p / Q_t, froth by V_f / Q_c, the whole cell by
    V_f / (Q_t + Q_c). Q is the mean outflow in m3/min of the inputs the
    scale was built from.
    """

    q_t: float
    q_c: float

    @classmethod
    def from_inputs(cls, inputs: ExogenousInputs) -> "ResidenceScale":
        q_t = float(np.mean(inputs.per_minute("Q_t")))
        q_c = float(np.mean(inputs.per_minute("Q_c")))
        if not (q_t > 0.0 and q_c > 0.0):
            raise DataError(
                f"mean outflows must be positive to scale residuals, got Q_t={q_t:g}, Q_c={q_c:g}")
        return cls(q_t, q_c)

    def apply(self, residuals: Sequence[Var], lam: BoundLambdas) -> list[Var]:
        if lam.kind is ModelKind.MASS_BALANCE:
            (f,) = residuals
            return [(f * lam.V_f).scale(1.0 / (self.q_t + self.q_c))]
        f_cp, f_cf = residuals
        return [(f_cp * lam.V_p).scale(1.0 / self.q_t), (f_cf * lam.V_f).scale(1.0 / self.q_c)]

    def to_dict(self) -> dict:
        return {"q_t": self.q_t, "q_c": self.q_c}


def physics_residuals(kind: ModelKind, inputs: ExogenousInputs, st: StateOutputs,
                      lam: BoundLambdas, rate: Var | None = None) -> list[Var]:
    """Residual components of ``kind`` as a list."""
    if kind is ModelKind.BIDIRECTIONAL:
        return list(residual_bidirectional(inputs, st, lam))
    if kind is ModelKind.UNIDIRECTIONAL:
        if rate is None:
            raise UsageError("the unidirectional model needs the flotation rate R")
        return list(residual_unidirectional(inputs, st, lam, rate))
    return [residual_mass_balance(inputs, st, lam)]
