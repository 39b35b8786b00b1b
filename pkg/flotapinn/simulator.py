"""
Synthetic digital twin of a rougher flotation cell.

Exogenous signals are synthesized per dataset split (each split is its own
operating regime and collection period), the bidirectional pulp/froth model
is integrated with classic RK4 under a zero-order hold of the inputs, and
measurement noise plus gross outliers are injected before export.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .dataset import COLUMNS, INPUT_COLUMNS, PERCENT_COLUMNS, Dataset
from .errors import ConfigurationError, SimulationError
from .nn import FROTH_FRACTION_BOUNDS, TOTAL_VOLUME
from .physics import MINUTES_PER_HOUR, ExogenousInputs

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
EXOGENOUS_COLUMNS = INPUT_COLUMNS[1:]
MAX_OUTLIER_RATE = 0.05

# rng purposes, mixed into the seed so every stream is independent
_SIGNAL_STREAM = 1
_NOISE_STREAM = 2
_OUTLIER_STREAM = 3


@dataclass
class TrueParams:
    V_f: float = TOTAL_VOLUME * 0.055
    alpha_p: float = 0.004
    alpha_f: float = 0.002
    total: float = TOTAL_VOLUME

    @property
    def V_p(self) -> float:
        return self.total - self.V_f

    def validate(self) -> None:
        share = self.V_f / self.total
        lower, upper = FROTH_FRACTION_BOUNDS
        if not lower <= share <= upper:
            raise ConfigurationError(
                f"froth volume {self.V_f} is {share:.4f} of the cell, outside [{lower}, {upper}]")
        if self.alpha_p < 0.0 or self.alpha_f < 0.0:
            raise ConfigurationError("rate coefficients must be non-negative")

    def to_dict(self) -> dict:
        return {"V_p": self.V_p, "V_f": self.V_f, "alpha_p": self.alpha_p,
                "alpha_f": self.alpha_f, "total": self.total}


@dataclass
class SignalSpec:
    """baseline + drift * k + sum of sinusoids + AR(1) wander, k the sample index."""

    baseline: float
    drift: float = 0.0
    amplitudes: list[float] = field(default_factory=list)
    periods: list[float] = field(default_factory=list)
    wander: float = 0.0

    def merged(self, overrides: dict | None) -> "SignalSpec":
        if not overrides:
            return self
        unknown = set(overrides) - set(asdict(self))
        if unknown:
            raise ConfigurationError(f"unknown signal field '{sorted(unknown)[0]}'")
        return SignalSpec(**{**asdict(self), **overrides})


def default_signals() -> dict[str, SignalSpec]:
    return {
        "Q_air": SignalSpec(600.0, 0.0, [40.0, 20.0], [240.0, 55.0], 5.0),
        "h": SignalSpec(50.0, 0.0, [5.0], [180.0], 0.5),
        "C_s": SignalSpec(35.0, 0.0, [3.0], [300.0], 0.3),
        "R_s_feed": SignalSpec(80.0, 0.0, [4.0], [420.0], 0.4),
        "C_feed": SignalSpec(3.0, 0.0, [0.4, 0.2], [150.0, 40.0], 0.03),
        "R_Au_feed": SignalSpec(85.0, 0.0, [3.0], [360.0], 0.3),
        "P80": SignalSpec(120.0, 0.0, [10.0], [260.0], 1.0),
        "Q_feed": SignalSpec(120.0, 0.0, [12.0, 5.0], [200.0, 35.0], 1.0),
        "F_s_feed": SignalSpec(60.0, 0.0, [6.0], [230.0], 0.6),
        "Q_t": SignalSpec(110.0, 0.0, [10.0], [210.0], 1.0),
        "Q_c": SignalSpec(10.0, 0.0, [1.5], [170.0], 0.1),
    }


def default_regimes() -> dict[str, dict[str, dict]]:
    return {
        "train": {},
        "val": {
            "Q_air": {"baseline": 650.0}, "Q_feed": {"baseline": 135.0},
            "Q_t": {"baseline": 123.0}, "C_feed": {"baseline": 3.3, "drift": 1e-4},
        },
        "test": {
            "Q_air": {"baseline": 700.0}, "Q_feed": {"baseline": 150.0},
            "Q_t": {"baseline": 136.0}, "Q_c": {"baseline": 11.5},
            "C_feed": {"baseline": 3.6, "drift": 2e-4}, "P80": {"baseline": 135.0},
        },
    }


def default_noise() -> dict[str, float]:
    return {
        "t": 0.0, "Q_air": 3.0, "h": 0.3, "C_s": 0.2, "R_s_feed": 0.3,
        "C_feed": 0.02, "R_Au_feed": 0.3, "P80": 0.8, "Q_feed": 0.8,
        "F_s_feed": 0.4, "Q_t": 0.8, "Q_c": 0.08, "C_p_tail": 0.02, "C_f_conc": 0.1,
    }


@dataclass
class SimConfig:
    seed: int = 0
    horizons: dict[str, int] = field(
        default_factory=lambda: {"train": 2000, "val": 1000, "test": 1200})
    sample_interval: float = 5.0
    dt_substep: float = 0.05
    split_gap: float = 1440.0
    steady_start: bool = False
    true_params: TrueParams = field(default_factory=TrueParams)
    signals: dict[str, SignalSpec] = field(default_factory=default_signals)
    regimes: dict[str, dict[str, dict]] = field(default_factory=default_regimes)
    noise: dict[str, float] = field(default_factory=default_noise)
    outlier_rate: float = 0.02
    outlier_scale: float = 10.0
    outlier_columns: list[str] = field(default_factory=lambda: list(COLUMNS[1:]))

    def validate(self) -> None:
        self.true_params.validate()
        if self.sample_interval <= 0.0:
            raise ConfigurationError(f"sample interval must be positive, got {self.sample_interval}")
        if not 0.0 < self.dt_substep <= self.sample_interval:
            raise ConfigurationError(
                f"dt substep {self.dt_substep} must be in (0, {self.sample_interval}]")
        if not 0.0 <= self.outlier_rate <= MAX_OUTLIER_RATE:
            raise ConfigurationError(
                f"outlier rate {self.outlier_rate} outside [0, {MAX_OUTLIER_RATE}]")
        for split, n in self.horizons.items():
            if split not in SPLITS:
                raise ConfigurationError(f"unknown split '{split}'")
            if int(n) < 1:
                raise ConfigurationError(f"horizon of split '{split}' must be positive")
        for name in list(self.signals) + [c for r in self.regimes.values() for c in r]:
            if name not in EXOGENOUS_COLUMNS:
                raise ConfigurationError(f"unknown exogenous column '{name}'")
        for name in list(self.noise) + list(self.outlier_columns):
            if name not in COLUMNS:
                raise ConfigurationError(f"unknown column '{name}'")
        missing = [c for c in EXOGENOUS_COLUMNS if c not in self.signals]
        if missing:
            raise ConfigurationError(f"no signal configured for '{missing[0]}'")

    def signal(self, split: str, name: str) -> SignalSpec:
        return self.signals[name].merged(self.regimes.get(split, {}).get(name))

    def time_offset(self, split: str) -> float:
        """Start time of ``split``; splits follow each other separated by ``split_gap``."""
        offset = 0.0
        for previous in SPLITS[:SPLITS.index(split)]:
            offset += self.horizons.get(previous, 0) * self.sample_interval + self.split_gap
        return offset

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown sim config key '{sorted(unknown)[0]}'")
        if "true_params" in data and isinstance(data["true_params"], dict):
            params = {k: v for k, v in data["true_params"].items() if k != "V_p"}
            unknown = set(params) - set(TrueParams.__dataclass_fields__)
            if unknown:
                raise ConfigurationError(f"unknown true parameter '{sorted(unknown)[0]}'")
            data["true_params"] = TrueParams(**params)
        if "signals" in data:
            signals = default_signals()
            for name, spec in data["signals"].items():
                if name not in signals:
                    raise ConfigurationError(f"unknown exogenous column '{name}'")
                signals[name] = signals[name].merged(spec) if isinstance(spec, dict) else spec
            data["signals"] = signals
        if "regimes" in data:
            regimes = default_regimes()
            for split, columns in data["regimes"].items():
                regimes.setdefault(split, {}).update(columns or {})
            data["regimes"] = regimes
        if "noise" in data:
            data["noise"] = {**default_noise(), **data["noise"]}
        if "horizons" in data:
            data["horizons"] = {k: int(v) for k, v in data["horizons"].items()}
        config = cls(**data)
        config.validate()
        return config


@dataclass
class Trajectory:
    times: np.ndarray
    inputs: ExogenousInputs
    C_p: np.ndarray
    C_f: np.ndarray
    dC_p_dt: np.ndarray
    dC_f_dt: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.inputs.to_matrix(), columns=INPUT_COLUMNS)
        frame["C_p_tail"] = self.C_p
        frame["C_f_conc"] = self.C_f
        return frame


def _rng(seed: int, split: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLITS.index(split), stream])


def synth_inputs(config: SimConfig, split: str) -> ExogenousInputs:
    """Exogenous input series of one split, clipped to physical ranges."""
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split '{split}'")
    n = int(config.horizons[split])
    rng = _rng(config.seed, split, _SIGNAL_STREAM)
    k = np.arange(n, dtype=float)
    times = config.time_offset(split) + k * config.sample_interval
    columns = {"t": times}
    for name in EXOGENOUS_COLUMNS:
        spec = config.signal(split, name)
        series = spec.baseline + spec.drift * k
        for amplitude, period in zip(spec.amplitudes, spec.periods):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            series = series + amplitude * np.sin(2.0 * np.pi * times / period + phase)
        if spec.wander > 0.0:
            # stationary AR(1) with standard deviation ``wander``
            phi = 0.9
            shocks = rng.normal(0.0, spec.wander * np.sqrt(1.0 - phi * phi), size=n)
            wander = np.empty(n)
            wander[0] = rng.normal(0.0, spec.wander)
            for i in range(1, n):
                wander[i] = phi * wander[i - 1] + shocks[i]
            series = series + wander
        series = np.maximum(series, 0.0)
        if name in PERCENT_COLUMNS:
            series = np.minimum(series, 100.0)
        columns[name] = series
    return ExogenousInputs(**columns)


def cell_matrices(params: TrueParams, inputs: ExogenousInputs, k: int) -> tuple[np.ndarray, np.ndarray]:
    """A, b of dC/dt = A C + b for sample ``k``, C = (C_p, C_f), flows per minute."""
    q_air = inputs.Q_air[k] / MINUTES_PER_HOUR
    q_feed = inputs.Q_feed[k] / MINUTES_PER_HOUR
    q_t = inputs.Q_t[k] / MINUTES_PER_HOUR
    q_c = inputs.Q_c[k] / MINUTES_PER_HOUR
    v_p, v_f = params.V_p, params.V_f
    a = np.array([
        [-(params.alpha_p * q_air + q_t / v_p), params.alpha_f * q_air * v_f / v_p],
        [params.alpha_p * q_air * v_p / v_f, -(params.alpha_f * q_air + q_c / v_f)],
    ])
    b = np.array([inputs.C_feed[k] * q_feed / v_p, 0.0])
    return a, b


def rk4_step(rhs, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


def rk4_propagator(a: np.ndarray, b: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """One RK4 step of y' = A y + b written as y -> P y + q.

    RK4 is affine in y for an affine right-hand side, so stepping the identity
    (homogeneous part) and the zero state recovers P and q exactly.
    """
    p = rk4_step(lambda y: a @ y, np.eye(2), h)
    q = rk4_step(lambda y: a @ y + b, np.zeros(2), h)
    return p, q


def steady_state(params: TrueParams, inputs: ExogenousInputs, k: int = 0) -> np.ndarray:
    a, b = cell_matrices(params, inputs, k)
    return np.linalg.solve(a, -b)


def integrate_cell(params: TrueParams, inputs: ExogenousInputs, horizon: int,
                   dt_substep: float, sample_interval: float = 5.0,
                   initial_state=None) -> Trajectory:
    """Integrate the bidirectional cell model over ``horizon`` samples.

    Inputs are held constant between samples. The interval is split into
    ceil(interval / dt_substep) equal RK4 substeps. Derivatives are the model
    right-hand side at each sample.

    Raises:
        SimulationError: the state stops being finite
    """
    if not 0.0 < dt_substep <= sample_interval:
        raise ConfigurationError(f"dt substep {dt_substep} must be in (0, {sample_interval}]")
    n_sub = int(np.ceil(sample_interval / dt_substep - 1e-9))
    h = sample_interval / n_sub
    state = np.zeros(2) if initial_state is None else np.asarray(initial_state, dtype=float).copy()
    concentrations = np.empty((horizon, 2))
    derivatives = np.empty((horizon, 2))
    for k in range(horizon):
        a, b = cell_matrices(params, inputs, k)
        if not np.all(np.isfinite(state)):
            raise SimulationError(f"non-finite state at sample {k} (t={inputs.t[k]})")
        concentrations[k] = state
        derivatives[k] = a @ state + b
        if k == horizon - 1:
            break
        p, q = rk4_propagator(a, b, h)
        for _ in range(n_sub):
            state = p @ state + q
    if not np.all(np.isfinite(derivatives)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(derivatives), axis=1))[0])
        raise SimulationError(f"non-finite state at sample {bad} (t={inputs.t[bad]})")
    return Trajectory(
        times=np.asarray(inputs.t, dtype=float)[:horizon],
        inputs=inputs,
        C_p=concentrations[:, 0], C_f=concentrations[:, 1],
        dC_p_dt=derivatives[:, 0], dC_f_dt=derivatives[:, 1],
    )


def inject_noise_outliers(traj: Trajectory, config: SimConfig, split: str = "train") -> Dataset:
    """Measurement noise on every column, then gross outliers on a row subset.

    Values are clipped to their physical range once both corruptions are in:
    nothing below 0, percentages at most 100. The corrupted rows are tagged
    in ``Dataset.outlier_mask``.
    """
    frame = traj.to_frame()
    n = len(frame)
    rng = _rng(config.seed, split, _NOISE_STREAM)
    for name in COLUMNS:
        sigma = float(config.noise.get(name, 0.0))
        if sigma > 0.0:
            frame[name] = frame[name].to_numpy() + rng.normal(0.0, sigma, size=n)

    mask = np.zeros(n, dtype=bool)
    count = int(round(config.outlier_rate * n))
    if count > 0:
        rng = _rng(config.seed, split, _OUTLIER_STREAM)
        rows = np.sort(rng.choice(n, size=count, replace=False))
        picks = rng.integers(0, len(config.outlier_columns), size=count)
        for row, pick in zip(rows, picks):
            name = config.outlier_columns[pick]
            frame.loc[row, name] = frame.loc[row, name] * config.outlier_scale
        mask[rows] = True

    measured = COLUMNS[1:]
    frame[measured] = frame[measured].clip(lower=0.0)
    frame[PERCENT_COLUMNS] = frame[PERCENT_COLUMNS].clip(upper=100.0)
    return Dataset(frame, {"split": split, "seed": config.seed}, mask)


def simulate_split(config: SimConfig, split: str) -> tuple[Trajectory, Dataset]:
    inputs = synth_inputs(config, split)
    initial = steady_state(config.true_params, inputs) if config.steady_start else None
    traj = integrate_cell(config.true_params, inputs, config.horizons[split],
                          config.dt_substep, config.sample_interval, initial)
    dataset = inject_noise_outliers(traj, config, split)
    logger.info("Simulated %s split: %d rows, %d tagged outliers",
                split, len(dataset), int(dataset.outlier_mask.sum()))
    return traj, dataset


def simulate(config: SimConfig) -> dict[str, Dataset]:
    """All configured splits, in train/val/test order."""
    config.validate()
    return {split: simulate_split(config, split)[1] for split in SPLITS if split in config.horizons}


def sim_truth(config: SimConfig) -> dict:
    return {"true_params": config.true_params.to_dict(), "sim_config": config.to_dict()}
