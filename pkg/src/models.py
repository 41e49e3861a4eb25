"""Data models for the ensemble federated learning simulator using Pydantic."""
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.exceptions import ConfigError

# Dense model index in [0, K), stable for an experiment's lifetime.
ModelId = int


def _frozen_array(value, ndim: int, name: str) -> np.ndarray:
    array = np.array(value, dtype=float)
    if array.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    array.setflags(write=False)
    return array


class DataSample(BaseModel):
    """One normalized observation (x, y)."""
    model_config = ConfigDict(frozen=True)

    features: Tuple[float, ...] = Field(description="Normalized feature vector, each coordinate in [0, 1]")
    target: float = Field(ge=0.0, le=1.0, description="Normalized regression target")

    @field_validator("features")
    def validate_features(cls, v):
        if any(not 0.0 <= x <= 1.0 for x in v):
            raise ValueError("every feature must lie in [0, 1] after normalization")
        return v


class Budget(BaseModel):
    """Per-round transmission budget B_t (constant across rounds)."""
    model_config = ConfigDict(frozen=True)

    per_round: float = Field(gt=0, description="Budget B_t in normalized cost units")

    def check_covers(self, costs: Sequence[float]) -> None:
        """Raise ConfigError unless B_t >= c_k for every model."""
        worst = max(costs) if len(costs) else 0.0
        if self.per_round < worst:
            raise ConfigError(
                f"budget {self.per_round} is below the largest model cost {worst}; "
                "every single model must fit in the budget",
                key="budget",
            )


class Dataset(BaseModel):
    """Tabular regression data; rows keep file order."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str = Field(description="Dataset name")
    features: np.ndarray = Field(description="Feature matrix of shape (n, d)")
    targets: np.ndarray = Field(description="Target vector of shape (n,)")
    feature_names: Tuple[str, ...] = Field(default=(), description="Column names of the features")
    target_name: str = Field(default="target", description="Column name of the target")

    @field_validator("features", mode="before")
    def validate_feature_matrix(cls, v):
        return _frozen_array(v, 2, "features")

    @field_validator("targets", mode="before")
    def validate_target_vector(cls, v):
        return _frozen_array(v, 1, "targets")

    @model_validator(mode="after")
    def check_shapes(self):
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.targets.shape[0]} targets"
            )
        return self

    @property
    def feature_count(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def sample(self, index: int) -> DataSample:
        """Row ``index`` as a DataSample (dataset must be normalized)."""
        return DataSample(features=tuple(self.features[index].tolist()), target=float(self.targets[index]))

    @property
    def samples(self) -> List[DataSample]:
        return [self.sample(i) for i in range(len(self))]


class SplitPlan(BaseModel):
    """How a dataset is split into a pretraining set and a T x N client stream."""
    model_config = ConfigDict(frozen=True)

    pretrain_fraction: float = Field(gt=0, lt=1, default=0.1, description="Share of samples used for pretraining")
    seed: int = Field(ge=0, default=0, description="Experiment seed")
    rounds: int = Field(ge=0, description="Number of learning rounds T")
    clients: int = Field(ge=1, description="Number of clients N")


class SyntheticFamily(str, Enum):
    """Ground-truth function family of the synthetic generator."""
    LINEAR = "linear"
    SINE = "sine"


class SyntheticSpec(BaseModel):
    """Generator parameters for a synthetic regression stream.

    Features are uniform on [0, 1]^d. With a = slope * 1/d the target is
    <a, x> (linear) or sin(2*pi*frequency*<a, x>) (sine), plus Gaussian noise.
    Sizes are checked by the generator, which raises SizingError.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    feature_count: int = Field(description="Feature dimension d")
    sample_count: int = Field(description="Number of samples n")
    noise: float = Field(ge=0, default=0.0, description="Noise standard deviation sigma")
    family: SyntheticFamily = Field(default=SyntheticFamily.LINEAR, description="Ground-truth family")
    slope: float = Field(default=1.0, description="Scale of the linear coefficient vector")
    frequency: float = Field(gt=0, default=1.0, description="Frequency of the sine family")


class ModelFamily(str, Enum):
    """Pre-trained predictor families of the model zoo."""
    GAUSSIAN = "gaussian-kernel"
    LAPLACIAN = "laplacian-kernel"
    POLYNOMIAL = "polynomial-kernel"
    SIGMOID = "sigmoid-kernel"
    MLP = "mlp"

    @property
    def is_kernel(self) -> bool:
        return self is not ModelFamily.MLP


class ModelSpec(BaseModel):
    """Recipe for one pre-trained model."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    family: ModelFamily
    hyperparameter: Optional[float] = Field(
        default=None,
        gt=0,
        description="Bandwidth (gaussian/laplacian), slope (sigmoid) or degree (polynomial)",
    )
    hidden_layers: Optional[Tuple[int, ...]] = Field(default=None, description="Hidden layer widths (mlp)")
    ridge: float = Field(gt=0, default=1e-3, description="Ridge term added to the Gram diagonal")
    max_anchors: int = Field(ge=1, le=2000, default=2000, description="Anchor cap for kernel models")
    epochs: int = Field(ge=0, default=500, description="Full-batch gradient steps (mlp)")
    step_size: float = Field(gt=0, default=0.05, description="Gradient step size (mlp)")

    @model_validator(mode="after")
    def check_family_fields(self):
        if self.family.is_kernel:
            if self.hyperparameter is None:
                raise ValueError(f"{self.family.value} needs a hyperparameter")
            if self.family is ModelFamily.POLYNOMIAL and float(self.hyperparameter) != int(self.hyperparameter):
                raise ValueError("polynomial degree must be an integer")
        else:
            if not self.hidden_layers or any(width < 1 for width in self.hidden_layers):
                raise ValueError("mlp needs at least one hidden layer of positive width")
        return self

    @property
    def label(self) -> str:
        if self.family is ModelFamily.MLP:
            return f"mlp[{'x'.join(str(w) for w in self.hidden_layers)}]"
        return f"{self.family.value}({self.hyperparameter:g})"


KERNEL_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
POLYNOMIAL_DEGREES = (1, 2, 3, 4, 5)
HIDDEN_WIDTH = 25


def default_zoo_specs() -> List[ModelSpec]:
    """The 22-model zoo: 5 each of gaussian, laplacian, polynomial and sigmoid
    kernel regressors plus mlps with one and two hidden layers of 25 units."""
    specs: List[ModelSpec] = []
    for family in (ModelFamily.GAUSSIAN, ModelFamily.LAPLACIAN):
        specs.extend(ModelSpec(family=family, hyperparameter=h) for h in KERNEL_GRID)
    specs.extend(ModelSpec(family=ModelFamily.POLYNOMIAL, hyperparameter=d) for d in POLYNOMIAL_DEGREES)
    specs.extend(ModelSpec(family=ModelFamily.SIGMOID, hyperparameter=s) for s in KERNEL_GRID)
    specs.append(ModelSpec(family=ModelFamily.MLP, hidden_layers=(HIDDEN_WIDTH,)))
    specs.append(ModelSpec(family=ModelFamily.MLP, hidden_layers=(HIDDEN_WIDTH, HIDDEN_WIDTH)))
    return specs


class DatasetPreset(BaseModel):
    """Documented shape of a public regression dataset."""
    name: str = Field(description="Preset name")
    description: str = Field(description="What the target measures")
    samples: int = Field(description="Number of rows")
    features: int = Field(description="Number of feature columns")
    target_column: str = Field(description="Default target column")


DATASET_PRESETS: Dict[str, DatasetPreset] = {
    "bias-correction": DatasetPreset(
        name="bias-correction",
        description="Next-day minimum air temperature",
        samples=7750,
        features=21,
        target_column="Next_Tmin",
    ),
    "ccpp": DatasetPreset(
        name="ccpp",
        description="Hourly electrical energy output of a combined cycle power plant",
        samples=9568,
        features=4,
        target_column="PE",
    ),
    "energy": DatasetPreset(
        name="energy",
        description="Energy use of household appliances",
        samples=19735,
        features=27,
        target_column="Appliances",
    ),
}


class Algorithm(str, Enum):
    """Learners the runner can simulate."""
    EFL_FG = "efl-fg"
    FEDBOOST_SURROGATE = "fedboost-surrogate"
    FULL_ENSEMBLE = "full-ensemble"


class RateSchedule(str, Enum):
    """Named schedules for the learning rate eta and exploration rate xi."""
    ONE_OVER_SQRT_T = "one-over-sqrt-T"
    THEOREM_1 = "theorem-1"


def _optional_frozen(value):
    if value is None:
        return None
    array = np.array(value, dtype=float)
    array.setflags(write=False)
    return array


class RoundRecord(BaseModel):
    """Everything observed and decided in one learning round."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    t: int = Field(ge=1, description="Learning round")
    algorithm: Algorithm
    drawn: Optional[ModelId] = Field(default=None, description="Drawn node I_t (feedback-graph learner only)")
    transmitted: Tuple[ModelId, ...] = Field(description="Models sent to the clients, S_t")
    clients: Tuple[int, ...] = Field(description="Selected client ids C_t, ascending")
    transmitted_cost: float = Field(ge=0, description="Sum of c_k over S_t")
    budget: float = Field(gt=0, description="Budget B_t")
    client_predictions: np.ndarray = Field(description="Ensemble prediction per client")
    client_targets: np.ndarray = Field(description="Normalized target per client")
    client_ensemble_losses: np.ndarray = Field(description="Clipped ensemble loss per client")
    member_losses: Dict[ModelId, float] = Field(default_factory=dict, description="Summed clipped loss per transmitted model")
    model_estimates: np.ndarray = Field(description="Loss estimates for all K models")
    ensemble_estimates: Optional[np.ndarray] = Field(default=None, description="Node ensemble-loss estimates")
    realized_ensemble_loss: float = Field(ge=0, description="Summed clipped ensemble loss over C_t")
    expected_ensemble_loss: float = Field(ge=0, description="Ensemble loss in expectation over the server's draw")
    dominating_set_size: Optional[int] = Field(default=None, ge=1)
    alpha: Optional[int] = Field(default=None, ge=1, description="Independence number of G_t")
    mean_out_degree: Optional[float] = Field(default=None)
    pmf: Optional[np.ndarray] = Field(default=None)
    inverse_q_bar: Optional[np.ndarray] = Field(default=None, description="Per vertex k: sum_j w_j / (q_j W_k)")
    out_degrees: Optional[Tuple[int, ...]] = Field(default=None)
    oracle_losses: Optional[np.ndarray] = Field(default=None, description="Summed clipped loss of every model on C_t")

    @field_validator("client_predictions", "client_targets", "client_ensemble_losses", "model_estimates", mode="before")
    def freeze_arrays(cls, v):
        return _frozen_array(v, 1, "round array")

    @field_validator("ensemble_estimates", "pmf", "inverse_q_bar", "oracle_losses", mode="before")
    def freeze_optional_arrays(cls, v):
        return _optional_frozen(v)

    @model_validator(mode="after")
    def check_clients(self):
        if len(self.clients) == 0:
            raise ValueError("a round needs at least one client")
        if not len(self.client_predictions) == len(self.client_targets) == len(self.clients):
            raise ValueError("per-client arrays must match the client count")
        return self

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def squared_error_mean(self) -> float:
        """Mean unclipped squared error of the ensemble over this round's clients."""
        return float(np.mean((self.client_predictions - self.client_targets) ** 2))

    @property
    def over_budget(self) -> bool:
        return self.transmitted_cost > self.budget


class ExperimentTrace(BaseModel):
    """Ordered round records of one (algorithm, seed) run."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    algorithm: Algorithm
    seed: int = Field(ge=0)
    dataset: str = Field(description="Dataset name")
    config: Dict = Field(default_factory=dict, description="Snapshot of the experiment configuration")
    records: Tuple[RoundRecord, ...] = Field(default=())
    oracle_losses: Optional[np.ndarray] = Field(default=None, description="Full-information losses, shape (T, K)")
    costs: np.ndarray = Field(description="Model costs c_k")
    budget: float = Field(gt=0)
    eta: float = Field(gt=0)
    xi: float = Field(ge=0, lt=1)

    @field_validator("costs", mode="before")
    def freeze_costs(cls, v):
        return _frozen_array(v, 1, "costs")

    @field_validator("oracle_losses", mode="before")
    def freeze_oracle(cls, v):
        if v is None:
            return None
        array = np.array(v, dtype=float)
        if array.size == 0:
            array = array.reshape(0, array.shape[-1] if array.ndim == 2 else 0)
        if array.ndim != 2:
            raise ValueError(f"oracle losses must be a (T, K) matrix, got shape {array.shape}")
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def check_lengths(self):
        if self.oracle_losses is not None and self.oracle_losses.shape[0] != len(self.records):
            raise ValueError(
                f"oracle channel has {self.oracle_losses.shape[0]} rounds, trace has {len(self.records)}"
            )
        return self

    @property
    def rounds(self) -> int:
        return len(self.records)

    @property
    def model_count(self) -> int:
        return int(self.costs.shape[0])
