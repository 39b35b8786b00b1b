"""
Training loops for the data-driven and physics-informed networks, baseline
fitting, early stopping, MSE/MRE evaluation and run artifacts.
"""

import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from .autodiff import Tape, Var
from .baselines import BASELINE_KINDS, BaselineGrid, model_from_dict, select_baseline
from .dataset import INPUT_COLUMNS, TARGET_COLUMNS, Dataset, import_csv
from .errors import ConfigurationError, DataError, EvaluationError, FormatError, TrainingError
from .nn import AdamState, MlpModel, adam_step, mlp_forward, mlp_init, mlp_predict
from .physics import (
    TIME_TANGENTS,
    ExogenousInputs,
    LambdaSet,
    ModelKind,
    ResidenceScale,
    StateOutputs,
    data_misfit,
    flotation_rate,
    physics_residuals,
    residual_misfit,
    tangent_seed,
)
from .preprocess import minmax_scale

logger = logging.getLogger(__name__)

PINN_KINDS = {
    "pinn-bidirectional": ModelKind.BIDIRECTIONAL,
    "pinn-unidirectional": ModelKind.UNIDIRECTIONAL,
    "pinn-massbalance": ModelKind.MASS_BALANCE,
}
NEURAL_KINDS = ["datadriven", *PINN_KINDS]
MODEL_KINDS = [*NEURAL_KINDS, *BASELINE_KINDS]

MRE_FLOOR = 1e-9
RESIDUAL_SCALES = ("residence", "none")
CHECKPOINT_FORMAT = "flotapinn-checkpoint"
CHECKPOINT_VERSION = 2
R_NET_INPUTS = 1 + len(INPUT_COLUMNS) + len(TARGET_COLUMNS)


@dataclass
class TrainConfig:
    kind: str = "datadriven"
    u_layers: list[int] = field(default_factory=lambda: [12, 32, 64, 32, 2])
    r_layers: list[int] = field(default_factory=lambda: [15, 32, 1])
    lr: float = 1e-3
    batch_size: int = 128
    patience: int = 50
    tolerance: float = 1e-5
    max_steps: int = 20000
    seed: int = 0
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    standardize: bool = True
    freeze_physics: bool = False
    V_f_init: float | None = None
    alpha_init: float = 0.003
    log_every: int = 10
    trace_rows: int = 300
    grid: dict = field(default_factory=dict)
    workers: int = 1
    lambda_lr: float | None = None
    time_tangent: str = "trajectory"
    residual_scale: str = "residence"
    collocation: list[str] = field(default_factory=lambda: ["train", "val"])
    calibration_steps: int = 1000

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind '{self.kind}', expected one of {MODEL_KINDS}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be at least 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be at least 1, got {self.patience}")
        if not self.tolerance > 0.0:
            raise ConfigurationError(f"tolerance must be positive, got {self.tolerance}")
        if self.lr < 0.0:
            raise ConfigurationError(f"learning rate must be non-negative, got {self.lr}")
        if self.max_steps < 1:
            raise ConfigurationError(f"max steps must be at least 1, got {self.max_steps}")
        if self.u_layers[0] != len(INPUT_COLUMNS) or self.u_layers[-1] != len(TARGET_COLUMNS):
            raise ConfigurationError(
                f"u-net must map {len(INPUT_COLUMNS)} inputs to {len(TARGET_COLUMNS)} outputs, "
                f"got {self.u_layers}")
        if self.r_layers[0] != R_NET_INPUTS or self.r_layers[-1] != 1:
            raise ConfigurationError(
                f"R-net must map {R_NET_INPUTS} inputs to 1 output, got {self.r_layers}")
        unknown = set(self.grid) - set(BaselineGrid.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown baseline grid key '{sorted(unknown)[0]}'")
        if self.lambda_lr is not None and self.lambda_lr < 0.0:
            raise ConfigurationError(
                f"physical-parameter learning rate must be non-negative, got {self.lambda_lr}")
        if self.time_tangent not in TIME_TANGENTS:
            raise ConfigurationError(
                f"unknown time tangent '{self.time_tangent}', expected one of {list(TIME_TANGENTS)}")
        if self.residual_scale not in RESIDUAL_SCALES:
            raise ConfigurationError(
                f"unknown residual scale '{self.residual_scale}', expected one of {list(RESIDUAL_SCALES)}")
        if "train" not in self.collocation or not set(self.collocation) <= {"train", "val"}:
            raise ConfigurationError(
                f"collocation splits must include train and may add val, got {self.collocation}")
        if self.calibration_steps < 0:
            raise ConfigurationError(f"calibration steps must be non-negative, got {self.calibration_steps}")

    @property
    def baseline_grid(self) -> BaselineGrid:
        return BaselineGrid(**self.grid)

    @property
    def physics_lr(self) -> float:
        return self.lr if self.lambda_lr is None else self.lambda_lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config key '{sorted(unknown)[0]}'")
        config = cls(**data)
        config.validate()
        return config


class EarlyStopDecision(NamedTuple):
    stop: bool
    best_index: int
    best_loss: float


class EarlyStopping:
    """Patience counter over validation evaluations.

    An evaluation improves only when ``best - loss > tolerance``.
    """

    def __init__(self, patience: int, tolerance: float) -> None:
        self.patience = patience
        self.tolerance = tolerance
        self.best_loss = math.inf
        self.best_index = -1
        self.counter = 0
        self.evaluations = 0

    def update(self, loss: float) -> bool:
        """Record one evaluation; True when it improved on the best so far."""
        index = self.evaluations
        self.evaluations += 1
        if self.best_loss - loss > self.tolerance:
            self.best_loss = loss
            self.best_index = index
            self.counter = 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience

    def to_dict(self) -> dict:
        return {"best_loss": self.best_loss, "best_index": self.best_index,
                "counter": self.counter, "evaluations": self.evaluations}

    def load(self, data: dict) -> None:
        """Restore the counters; patience and tolerance stay as configured."""
        self.best_loss = float(data["best_loss"])
        self.best_index = int(data["best_index"])
        self.counter = int(data["counter"])
        self.evaluations = int(data["evaluations"])


def early_stop(history: Sequence[float], patience: int, tolerance: float) -> EarlyStopDecision:
    """Replay ``history`` through EarlyStopping; best index is 0-based."""
    if len(history) == 0:
        raise ConfigurationError("early stopping needs at least one evaluation")
    stopper = EarlyStopping(patience, tolerance)
    for loss in history:
        stopper.update(float(loss))
        if stopper.should_stop:
            break
    return EarlyStopDecision(stopper.should_stop, stopper.best_index, stopper.best_loss)


@dataclass
class Metrics:
    """Per-output MSE ((g/t)^2) and MRE, with the count of samples left out of MRE."""

    mse: list[float]
    mre: list[float]
    excluded: list[int]
    n: int

    @property
    def mse_u(self) -> float:
        return float(sum(self.mse))

    def for_output(self, index: int) -> dict:
        return {"mse": self.mse[index], "mre": self.mre[index], "excluded": self.excluded[index]}

    def to_dict(self) -> dict:
        out = {"n": self.n, "mse_u": self.mse_u}
        for i, name in enumerate(TARGET_COLUMNS[:len(self.mse)]):
            out[name] = self.for_output(i)
        return out


def regression_metrics(predictions, actual) -> Metrics:
    """MSE and MRE per output column.

    MRE is mean(|pred - actual| / |actual|) over samples with
    |actual| >= 1e-9.

    Raises:
        EvaluationError: no samples, shape mismatch, or every sample of an
            output excluded from MRE
    """
    pred = np.asarray(predictions, dtype=float)
    act = np.asarray(actual, dtype=float)
    if pred.ndim == 1:
        pred = pred[:, None]
    if act.ndim == 1:
        act = act[:, None]
    if pred.shape != act.shape:
        raise EvaluationError(f"predictions {pred.shape} and actual values {act.shape} differ")
    if act.shape[0] == 0:
        raise EvaluationError("no samples to evaluate")
    mse, mre, excluded = [], [], []
    for j in range(act.shape[1]):
        error = pred[:, j] - act[:, j]
        mse.append(float(np.mean(error * error)))
        usable = np.abs(act[:, j]) >= MRE_FLOOR
        if not np.any(usable):
            raise EvaluationError(f"every sample of output {j} has a near-zero actual value")
        mre.append(float(np.mean(np.abs(error[usable]) / np.abs(act[usable, j]))))
        excluded.append(int(np.count_nonzero(~usable)))
    return Metrics(mse, mre, excluded, int(act.shape[0]))


def validation_mse(predictor, dataset: Dataset) -> float:
    """MSE_u = (1/N) * sum_i ||u_i - u_hat_i||^2, the model-selection metric."""
    diff = predictor.predict(dataset.inputs()) - dataset.targets()
    return float(np.mean(np.sum(diff * diff, axis=1)))


@dataclass
class NeuralPredictor:
    kind: str
    u_model: MlpModel
    lambdas: LambdaSet | None = None
    r_model: MlpModel | None = None

    def predict(self, X) -> np.ndarray:
        return mlp_predict(self.u_model, X)

    def copy(self) -> "NeuralPredictor":
        return NeuralPredictor.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "u_net": self.u_model.to_dict(),
            "lambdas": None if self.lambdas is None else self.lambdas.to_dict(),
            "r_net": None if self.r_model is None else self.r_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NeuralPredictor":
        return cls(
            data["kind"],
            MlpModel.from_dict(data["u_net"]),
            None if data.get("lambdas") is None else LambdaSet.from_dict(data["lambdas"]),
            None if data.get("r_net") is None else MlpModel.from_dict(data["r_net"]),
        )


@dataclass
class BaselinePredictor:
    kind: str
    model: object
    hyperparameters: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        return self.model.predict(X)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "model": self.model.to_dict(),
                "hyperparameters": self.hyperparameters}

    @classmethod
    def from_dict(cls, data: dict) -> "BaselinePredictor":
        return cls(data["kind"], model_from_dict(data["model"]), data.get("hyperparameters", {}))


@dataclass
class TrainingState:
    """Where a neural run stopped: the optimizer moments, the shuffling RNG,
    the patience counters and both the current and the best networks.

    ``best`` is the selected network before physical calibration, so a
    resumed run calibrates it again when it finishes.
    """

    kind: str
    seed: int
    step: int
    epoch: int
    rng_state: dict
    optimizer: dict
    stopper: dict
    current: dict
    best: dict
    history: list[dict]
    best_step: int
    best_epoch: int
    best_val_mse: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingState":
        missing = set(cls.__dataclass_fields__) - set(data)
        if missing:
            raise FormatError(f"training state lacks '{sorted(missing)[0]}'")
        return cls(**{name: data[name] for name in cls.__dataclass_fields__})


def save_checkpoint(predictor, path: str | Path, training: TrainingState | None = None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **extra,
               "predictor": predictor.to_dict()}
    if training is not None:
        payload["training"] = training.to_dict()
    path.write_text(json.dumps(payload, indent=1))
    return path


def _read_checkpoint(path: str | Path) -> tuple[Path, dict]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint {path} not found")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint {path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a flotapinn checkpoint")
    return path, payload


def load_training_state(path: str | Path) -> TrainingState:
    """Training state stored next to the predictor of a neural checkpoint.

    Raises:
        FormatError: not a checkpoint, or one written without training state
    """
    path, payload = _read_checkpoint(path)
    if "training" not in payload:
        raise FormatError(f"checkpoint {path} has no training state to resume from")
    return TrainingState.from_dict(payload["training"])


def load_checkpoint(path: str | Path):
    """Predictor stored by ``save_checkpoint``.

    Raises:
        FormatError: missing file or not a flotapinn checkpoint
    """
    path, payload = _read_checkpoint(path)
    data = payload["predictor"]
    if data.get("kind") in NEURAL_KINDS:
        return NeuralPredictor.from_dict(data)
    if data.get("kind") in BASELINE_KINDS:
        return BaselinePredictor.from_dict(data)
    raise FormatError(f"checkpoint {path} has unknown model kind '{data.get('kind')}'")


@dataclass
class Evaluation:
    metrics: Metrics
    predictions: np.ndarray


def evaluate(predictor, dataset: Dataset) -> Evaluation:
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    predictions = predictor.predict(dataset.inputs())
    return Evaluation(regression_metrics(predictions, dataset.targets()), predictions)


def prediction_traces(dataset: Dataset, predictions: np.ndarray, rows: int) -> pd.DataFrame:
    """First ``rows`` test samples with actual and predicted C_f scaled by the actual range."""
    rows = min(rows, len(dataset))
    actual = dataset.column("C_f_conc")[:rows]
    lo, hi = float(actual.min()), float(actual.max())
    if hi <= lo:
        lo, hi = float(actual.min()) - 0.5, float(actual.max()) + 0.5
    scaled_actual, scaling = minmax_scale(actual, (lo, hi))
    return pd.DataFrame({
        "t": dataset.column("t")[:rows],
        "C_f_actual": scaled_actual,
        "C_f_predicted": scaling.apply(predictions[:rows, 1]),
    })


@dataclass
class RunReport:
    kind: str
    config: dict
    history: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_epoch: int = 0
    best_val_mse: float = math.nan
    stop_reason: str = ""
    steps: int = 0
    epochs: int = 0
    val_metrics: dict = field(default_factory=dict)
    test_metrics: dict = field(default_factory=dict)
    lambdas: dict | None = None
    calibration: dict | None = None
    hyperparameters: dict = field(default_factory=dict)
    traces: pd.DataFrame | None = None
    training_state: TrainingState | None = None
    wall_clock: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        data = {
            "kind": self.kind, "best_step": self.best_step, "best_epoch": self.best_epoch,
            "best_val_mse": self.best_val_mse, "stop_reason": self.stop_reason,
            "steps": self.steps, "epochs": self.epochs,
            "val_metrics": self.val_metrics, "test_metrics": self.test_metrics,
            "lambdas": self.lambdas, "calibration": self.calibration,
            "hyperparameters": self.hyperparameters,
            "history": self.history, "config": self.config,
        }
        if timing:
            data["wall_clock"] = self.wall_clock
        return data

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["epoch", "step", "train_loss", "val_mse_u"])


def load_datasets(config: TrainConfig) -> dict[str, Dataset]:
    paths = {"train": config.train_path, "val": config.val_path, "test": config.test_path}
    missing = [split for split, p in paths.items() if not p]
    if missing:
        raise ConfigurationError(f"no dataset path configured for the {missing[0]} split")
    return {split: import_csv(p) for split, p in paths.items()}


def _network_values(p: NeuralPredictor) -> list:
    values = list(p.u_model.parameters())
    if p.r_model is not None:
        values += p.r_model.parameters()
    return values


def _assign_network(p: NeuralPredictor, values: list) -> None:
    n_u = len(p.u_model.parameters())
    p.u_model.set_parameters(values[:n_u])
    if p.r_model is not None:
        p.r_model.set_parameters(values[n_u:])


def _physics_values(p: NeuralPredictor) -> list:
    return list(p.lambdas.raw_values().values())


def _assign_physics(p: NeuralPredictor, values: list) -> None:
    p.lambdas.set_raw_values(dict(zip(p.lambdas.raw_values(), values)))


@dataclass
class _Collocation:
    """Unlabeled inputs whose residuals join every minibatch.

    Rows come in a fixed seeded order cycled by step number, so a resumed run
    sees the same points.
    """

    inputs: np.ndarray
    seed: np.ndarray
    order: np.ndarray
    size: int

    @classmethod
    def build(cls, X: np.ndarray, config: TrainConfig) -> "_Collocation":
        order = np.random.default_rng([config.seed, 1]).permutation(X.shape[0])
        return cls(X, tangent_seed(X, config.time_tangent), order, min(config.batch_size, X.shape[0]))

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        rows = self.order[(step * self.size + np.arange(self.size)) % self.order.size]
        return self.inputs[rows], self.seed[rows]


class _PinnStep:
    """Builds one minibatch loss on a fresh tape and applies Adam.

    Network weights (u-net and R-net) and the physical parameters are two
    Adam groups; the second one steps with ``config.physics_lr``.
    """

    def __init__(self, config: TrainConfig, predictor: NeuralPredictor,
                 scale: ResidenceScale | None = None) -> None:
        self.config = config
        self.predictor = predictor
        self.pinn_kind = PINN_KINDS.get(config.kind)
        self.train_physics = self.pinn_kind is not None and not config.freeze_physics
        self.scale = scale
        self.state = AdamState.for_parameters(_network_values(predictor), config.lr)
        self.physics_state = None
        if self.train_physics:
            self.physics_state = AdamState.for_parameters(_physics_values(predictor), config.physics_lr)

    def optimizer_dict(self) -> dict:
        return {"network": self.state.to_dict(),
                "physics": None if self.physics_state is None else self.physics_state.to_dict()}

    def load_optimizer(self, data: dict) -> None:
        """Restore Adam moments; learning rates follow the current config."""
        self.state = AdamState.from_dict(data["network"])
        self.state.lr = self.config.lr
        if self.physics_state is not None:
            if data.get("physics") is None:
                raise FormatError("training state has no optimizer moments for the physical parameters")
            self.physics_state = AdamState.from_dict(data["physics"])
            self.physics_state.lr = self.config.physics_lr

    def _residuals(self, x: Var, u: Var, X: np.ndarray, bound, r_leaves) -> list[Var]:
        p = self.predictor
        rate = None
        if r_leaves is not None:
            rate = flotation_rate(p.r_model, r_leaves, x, u)
        residuals = physics_residuals(self.pinn_kind, ExogenousInputs.from_matrix(X),
                                      StateOutputs.from_network(u), bound, rate)
        if self.config.residual_scale == "residence":
            if self.scale is None:
                self.scale = ResidenceScale.from_inputs(ExogenousInputs.from_matrix(X))
            residuals = self.scale.apply(residuals, bound)
        return residuals

    def __call__(self, X: np.ndarray, Y: np.ndarray, step: int, seed: np.ndarray | None = None,
                 collocation: tuple[np.ndarray, np.ndarray] | None = None) -> float:
        p = self.predictor
        tape = Tape()
        if self.pinn_kind is not None and seed is None:
            seed = tangent_seed(X, self.config.time_tangent)
        x = tape.lift(X, seed)
        u_leaves = p.u_model.lift(tape)
        u = mlp_forward(p.u_model, x, u_leaves)
        data = data_misfit(Y, u)
        if not np.isfinite(data.value):
            raise TrainingError(f"data term of the loss is not finite at step {step}",
                                step=step, term="data")
        loss = data
        leaves, physics_leaves = list(u_leaves), []
        if self.pinn_kind is not None:
            bound = p.lambdas.lift(tape)
            r_leaves = None
            if p.r_model is not None:
                r_leaves = p.r_model.lift(tape)
                leaves += r_leaves
            if self.train_physics:
                physics_leaves = list(bound.raws.values())
            residuals = self._residuals(x, u, X, bound, r_leaves)
            n = X.shape[0]
            if collocation is not None:
                X_c, seed_c = collocation
                x_c = tape.lift(X_c, seed_c)
                u_c = mlp_forward(p.u_model, x_c, u_leaves)
                residuals += self._residuals(x_c, u_c, X_c, bound, r_leaves)
                n += X_c.shape[0]
            physics = residual_misfit(residuals, n)
            if not np.isfinite(physics.value):
                raise TrainingError(f"residual term of the loss is not finite at step {step}",
                                    step=step, term="residual")
            loss = data + physics
        grads = tape.gradients(loss, leaves + physics_leaves)
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {i} at step {step}",
                                    step=step, parameter_index=i)
        _assign_network(p, adam_step(self.state, _network_values(p), grads[:len(leaves)]))
        if self.physics_state is not None:
            _assign_physics(p, adam_step(self.physics_state, _physics_values(p), grads[len(leaves):]))
        return float(loss.value)


def _init_predictor(config: TrainConfig, train: Dataset) -> NeuralPredictor:
    X, Y = train.inputs(), train.targets()
    u_model = mlp_init(config.u_layers, config.seed)
    if config.standardize:
        u_model.standardize(X.mean(axis=0), X.std(axis=0), Y.mean(axis=0), Y.std(axis=0))
    pinn_kind = PINN_KINDS.get(config.kind)
    lambdas = r_model = None
    if pinn_kind is not None:
        lambdas = LambdaSet.from_physical(pinn_kind, V_f=config.V_f_init,
                                          alpha_p=config.alpha_init, alpha_f=config.alpha_init)
    if pinn_kind is ModelKind.UNIDIRECTIONAL:
        r_model = mlp_init(config.r_layers, config.seed + 1)
        if config.standardize:
            features = np.column_stack([X[:, :1], X, Y])
            r_model.standardize(features.mean(axis=0), features.std(axis=0))
    return NeuralPredictor(config.kind, u_model, lambdas, r_model)


def _calibrate_physics(config: TrainConfig, predictor: NeuralPredictor, X: np.ndarray,
                       seed: np.ndarray, scale: ResidenceScale | None) -> dict:
    """Refit the physical parameters, and the R-net if there is one, to a frozen u-net.

    Full-batch Adam on the residual misfit at the training inputs. The
    network state and its time tangents are evaluated once.
    """
    pinn_kind = PINN_KINDS[predictor.kind]
    tape = Tape()
    u = mlp_forward(predictor.u_model, tape.lift(X, seed), predictor.u_model.lift(tape))
    frozen = StateOutputs.from_network(u)
    state = [np.asarray(v.value) for v in (frozen.C_p, frozen.C_f, frozen.dC_p_dt, frozen.dC_f_dt)]
    U = np.asarray(u.value)
    inputs = ExogenousInputs.from_matrix(X)
    n_lambda = len(_physics_values(predictor))

    def values() -> list:
        out = _physics_values(predictor)
        if predictor.r_model is not None:
            out += predictor.r_model.parameters()
        return out

    def misfit() -> tuple[Tape, list[Var], Var]:
        tape = Tape()
        bound = predictor.lambdas.lift(tape)
        leaves = list(bound.raws.values())
        rate = None
        if predictor.r_model is not None:
            r_leaves = predictor.r_model.lift(tape)
            leaves += r_leaves
            rate = flotation_rate(predictor.r_model, r_leaves, tape.lift(X), tape.lift(U))
        residuals = physics_residuals(pinn_kind, inputs, StateOutputs.lift(tape, *state), bound, rate)
        if scale is not None:
            residuals = scale.apply(residuals, bound)
        return tape, leaves, residual_misfit(residuals, X.shape[0])

    adam = AdamState.for_parameters(values(), config.physics_lr)
    before = float(misfit()[2].value)
    for step in range(config.calibration_steps):
        tape, leaves, loss = misfit()
        if not np.isfinite(loss.value):
            raise TrainingError(f"residual term is not finite at calibration step {step}",
                                step=step, term="residual")
        updated = adam_step(adam, values(), tape.gradients(loss, leaves))
        _assign_physics(predictor, updated[:n_lambda])
        if predictor.r_model is not None:
            predictor.r_model.set_parameters(updated[n_lambda:])
    after = float(misfit()[2].value)
    logger.info("%s calibration: residual misfit %.6g -> %.6g in %d steps",
                predictor.kind, before, after, config.calibration_steps)
    return {"steps": config.calibration_steps, "residual_before": before, "residual_after": after}


def _train_neural(config: TrainConfig, data: dict[str, Dataset], report: RunReport,
                  resume: TrainingState | None = None) -> NeuralPredictor:
    train, val = data["train"], data["val"]
    X, Y = train.inputs(), train.targets()
    seed = scale = collocation = None
    if config.kind in PINN_KINDS:
        seed = tangent_seed(X, config.time_tangent)
        if config.residual_scale == "residence":
            scale = ResidenceScale.from_inputs(ExogenousInputs.from_matrix(X))
        if "val" in config.collocation:
            collocation = _Collocation.build(val.inputs(), config)

    if resume is None:
        predictor = _init_predictor(config, train)
    else:
        if resume.kind != config.kind or resume.seed != config.seed:
            raise ConfigurationError(
                f"cannot resume a {resume.kind} run with seed {resume.seed} "
                f"as {config.kind} with seed {config.seed}")
        predictor = NeuralPredictor.from_dict(resume.current)
    step_fn = _PinnStep(config, predictor, scale)
    stopper = EarlyStopping(config.patience, config.tolerance)
    rng = np.random.default_rng(config.seed)
    best = predictor.copy()
    step = epoch = 0
    if resume is not None:
        step_fn.load_optimizer(resume.optimizer)
        stopper.load(resume.stopper)
        rng.bit_generator.state = resume.rng_state
        best = NeuralPredictor.from_dict(resume.best)
        step, epoch = resume.step, resume.epoch
        report.history = [dict(row) for row in resume.history]
        report.best_step, report.best_epoch = resume.best_step, resume.best_epoch
        report.best_val_mse = resume.best_val_mse
        logger.info("Resuming %s at step %d, epoch %d", config.kind, step, epoch)

    while step < config.max_steps and not stopper.should_stop:
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            if step >= config.max_steps:
                break
            rows = order[start:start + config.batch_size]
            extra = None if collocation is None else collocation.batch(step)
            losses.append(step_fn(X[rows], Y[rows], step, None if seed is None else seed[rows], extra))
            step += 1
        epoch += 1
        val_mse = validation_mse(predictor, val)
        report.history.append({"epoch": epoch, "step": step,
                               "train_loss": float(np.mean(losses)), "val_mse_u": val_mse})
        if stopper.update(val_mse):
            best = predictor.copy()
            report.best_step, report.best_epoch, report.best_val_mse = step, epoch, val_mse
        if config.log_every and epoch % config.log_every == 0:
            logger.info("%s epoch %d step %d: train loss %.6g, val MSE_u %.6g",
                        config.kind, epoch, step, report.history[-1]["train_loss"], val_mse)

    report.stop_reason = "early-stopping" if stopper.should_stop else "max-steps"
    report.steps, report.epochs = step, epoch
    report.training_state = TrainingState(
        kind=config.kind, seed=config.seed, step=step, epoch=epoch,
        rng_state=rng.bit_generator.state, optimizer=step_fn.optimizer_dict(),
        stopper=stopper.to_dict(), current=predictor.to_dict(), best=best.to_dict(),
        history=[dict(row) for row in report.history], best_step=report.best_step,
        best_epoch=report.best_epoch, best_val_mse=report.best_val_mse)
    if step_fn.train_physics and config.calibration_steps > 0:
        report.calibration = _calibrate_physics(config, best, X, seed, scale)
    if best.lambdas is not None:
        report.lambdas = best.lambdas.decode()
    return best


def train_model(config: TrainConfig, datasets: dict[str, Dataset] | None = None,
                resume: TrainingState | None = None):
    """Fit ``config.kind`` and keep the checkpoint with the lowest validation MSE_u.

    ``resume`` continues a neural run from the state saved in its checkpoint;
    raise ``max_steps`` or ``patience`` in ``config`` to train further.

    Returns:
        (RunReport, predictor) with the predictor restored to the best checkpoint

    Raises:
        TrainingError: the loss or a gradient became non-finite
        FormatError: a dataset file does not have the canonical layout
        DataError: a split is empty or has a negative flow or a percentage
            outside [0, 100]
        ConfigurationError: ``resume`` belongs to another kind or seed
    """
    config.validate()
    if resume is not None and config.kind not in NEURAL_KINDS:
        raise ConfigurationError(f"only neural runs can resume, not {config.kind}")
    data = datasets if datasets is not None else load_datasets(config)
    for split in ("train", "val", "test"):
        if split not in data or len(data[split]) == 0:
            raise DataError(f"the {split} dataset is empty")
        try:
            ExogenousInputs.from_matrix(data[split].inputs()).check()
        except DataError as e:
            raise DataError(f"the {split} dataset has {e}") from e

    started = time.perf_counter()
    report = RunReport(config.kind, config.to_dict())
    if config.kind in BASELINE_KINDS:
        train, val = data["train"], data["val"]
        model, params, search = select_baseline(
            config.kind, train.inputs(), train.targets(), val.inputs(), val.targets(),
            config.baseline_grid, seed=config.seed, workers=config.workers)
        predictor = BaselinePredictor(config.kind, model, params)
        report.hyperparameters = {"selected": params, "search": search}
        report.best_val_mse = validation_mse(predictor, val)
        report.stop_reason = "fitted"
    else:
        predictor = _train_neural(config, data, report, resume)

    report.val_metrics = evaluate(predictor, data["val"]).metrics.to_dict()
    test = evaluate(predictor, data["test"])
    report.test_metrics = test.metrics.to_dict()
    report.traces = prediction_traces(data["test"], test.predictions, config.trace_rows)
    report.wall_clock = time.perf_counter() - started
    logger.info("%s finished (%s) after %d steps: best val MSE_u %.6g at step %d, test C_f MSE %.6g",
                config.kind, report.stop_reason, report.steps, report.best_val_mse,
                report.best_step, test.metrics.mse[1])
    return report, predictor


def write_run(report: RunReport, predictor, out_dir: str | Path, timing: bool = False) -> dict[str, Path]:
    """Persist report JSON, best checkpoint (with training state for neural runs),
    loss history and C_f traces."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out_dir / "report.json",
        "checkpoint": out_dir / "checkpoint.json",
        "history": out_dir / "loss_history.csv",
        "traces": out_dir / "traces.csv",
    }
    paths["report"].write_text(json.dumps(report.to_dict(timing), indent=1))
    save_checkpoint(predictor, paths["checkpoint"], training=report.training_state,
                    best_step=report.best_step, best_val_mse=report.best_val_mse)
    report.history_frame().to_csv(paths["history"], index=False, float_format="%.17g")
    if report.traces is not None:
        report.traces.to_csv(paths["traces"], index=False, float_format="%.17g")
    return paths
