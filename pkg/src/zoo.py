"""Model zoo: kernel ridge regressors and small feedforward networks."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.distance import cdist

from src.data import PretrainSet
from src.exceptions import EflError, InvalidInputError, NumericStateError, TrainingError
from src.models import ModelFamily, ModelId, ModelSpec, default_zoo_specs
from src.rng import substream

logger = logging.getLogger(__name__)

CATALOG_FORMAT = "efl-fg-catalog"
CATALOG_VERSION = 1


def _frozen(value) -> np.ndarray:
    array = np.array(value, dtype=float)
    array.setflags(write=False)
    return array


class KernelParameters(BaseModel):
    """Anchors and dual coefficients of a kernel regressor."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    anchors: np.ndarray
    coefficients: np.ndarray

    @field_validator("anchors", "coefficients", mode="before")
    def freeze(cls, v):
        return _frozen(v)


class MlpParameters(BaseModel):
    """Weight matrices and bias vectors, input layer first."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @field_validator("weights", "biases", mode="before")
    def freeze(cls, v):
        return tuple(_frozen(a) for a in v)


class PretrainedModel(BaseModel):
    """A fixed predictor f_k with its parameter count."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: ModelId = Field(ge=0)
    spec: ModelSpec
    parameters: Union[KernelParameters, MlpParameters]
    input_dim: int = Field(ge=1)
    param_count: int = Field(ge=1)

    def predict(self, x) -> float:
        return predict(self, x)

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        return predict_batch(self, features)


def kernel_matrix(family: ModelFamily, hyperparameter: float, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Kernel evaluations between the rows of ``left`` and ``right``."""
    if family is ModelFamily.GAUSSIAN:
        return np.exp(-cdist(left, right, "sqeuclidean") / (2.0 * hyperparameter ** 2))
    if family is ModelFamily.LAPLACIAN:
        return np.exp(-cdist(left, right, "cityblock") / hyperparameter)
    if family is ModelFamily.POLYNOMIAL:
        return (left @ right.T + 1.0) ** int(hyperparameter)
    if family is ModelFamily.SIGMOID:
        return np.tanh(hyperparameter * (left @ right.T))
    raise InvalidInputError(f"{family.value} is not a kernel family")


def mlp_param_count(input_dim: int, hidden_layers: Sequence[int]) -> int:
    widths = [input_dim, *hidden_layers, 1]
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(widths[:-1], widths[1:]))


def _as_matrix(model: PretrainedModel, features) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    if features.ndim != 2 or features.shape[1] != model.input_dim:
        raise InvalidInputError(
            f"model {model.id} expects {model.input_dim} features, got shape {features.shape}"
        )
    if not np.all(np.isfinite(features)):
        raise InvalidInputError(f"model {model.id} received non-finite features")
    return features


def _mlp_forward(
    weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], features: np.ndarray
) -> Tuple[List[np.ndarray], np.ndarray]:
    """ReLU hidden layers, linear output; returns the layer inputs and the flat output."""
    activations = [features]
    hidden = features
    for weight, bias in zip(weights[:-1], biases[:-1]):
        hidden = np.maximum(hidden @ weight + bias, 0.0)
        activations.append(hidden)
    output = hidden @ weights[-1] + biases[-1]
    return activations, output.ravel()


def predict_batch(model: PretrainedModel, features) -> np.ndarray:
    """Predictions for every row of ``features``."""
    features = _as_matrix(model, features)
    params = model.parameters
    if isinstance(params, KernelParameters):
        gram = kernel_matrix(model.spec.family, model.spec.hyperparameter, features, params.anchors)
        return gram @ params.coefficients
    _, output = _mlp_forward(params.weights, params.biases, features)
    return output


def predict(model: PretrainedModel, x) -> float:
    """f_k(x) for a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidInputError(f"predict expects one feature vector, got shape {x.shape}")
    return float(predict_batch(model, x)[0])


def model_cost(model: PretrainedModel, max_params: int) -> float:
    """Transmission cost: parameter count relative to the largest model."""
    if not max_params >= model.param_count >= 1:
        raise InvalidInputError(f"need max_params >= param_count >= 1, got {max_params} and {model.param_count}")
    return model.param_count / max_params


def _solve_dual(spec: ModelSpec, gram: np.ndarray, targets: np.ndarray) -> np.ndarray:
    system = gram + spec.ridge * np.eye(gram.shape[0])
    assume = "sym" if spec.family is ModelFamily.SIGMOID else "pos"
    try:
        coefficients = scipy.linalg.solve(system, targets, assume_a=assume)
    except (np.linalg.LinAlgError, ValueError) as exc:
        # tanh kernels are not PSD; fall back so training stays total.
        logger.warning("%s: factorization failed (%s); using least squares", spec.label, exc)
        coefficients, *_ = scipy.linalg.lstsq(system, targets)
    return coefficients


def _train_kernel(spec: ModelSpec, features: np.ndarray, targets: np.ndarray, rng: np.random.Generator) -> KernelParameters:
    if len(targets) > spec.max_anchors:
        logger.warning("%s: subsampling %d of %d anchors", spec.label, spec.max_anchors, len(targets))
        rows = np.sort(rng.choice(len(targets), size=spec.max_anchors, replace=False))
        features, targets = features[rows], targets[rows]
    gram = kernel_matrix(spec.family, spec.hyperparameter, features, features)
    coefficients = _solve_dual(spec, gram, targets)
    if not np.all(np.isfinite(coefficients)):
        raise NumericStateError(f"{spec.label}: dual coefficients are not finite")
    return KernelParameters(anchors=features, coefficients=coefficients)


def _train_mlp(spec: ModelSpec, features: np.ndarray, targets: np.ndarray, rng: np.random.Generator) -> MlpParameters:
    widths = [features.shape[1], *spec.hidden_layers, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-scale, scale, size=fan_out))

    n = len(targets)
    for epoch in range(spec.epochs):
        activations, output = _mlp_forward(weights, biases, features)
        residual = (output - targets).reshape(-1, 1)
        loss = float(np.mean(residual ** 2))
        if not np.isfinite(loss):
            raise TrainingError(f"{spec.label} diverged at epoch {epoch}")

        grad = 2.0 * residual / n
        for layer in range(len(weights) - 1, -1, -1):
            grad_weight = activations[layer].T @ grad
            grad_bias = grad.sum(axis=0)
            if layer > 0:
                grad = (grad @ weights[layer].T) * (activations[layer] > 0)
            weights[layer] = weights[layer] - spec.step_size * grad_weight
            biases[layer] = biases[layer] - spec.step_size * grad_bias

    params = MlpParameters(weights=tuple(weights), biases=tuple(biases))
    _, output = _mlp_forward(params.weights, params.biases, features)
    if not np.all(np.isfinite(output)):
        raise TrainingError(f"{spec.label} produced non-finite predictions after training")
    return params


def train_model(spec: ModelSpec, pretrain: PretrainSet, seed: int, model_id: ModelId = 0) -> PretrainedModel:
    """
    Train one zoo member on the pretraining set.

    Kernel families solve (K + ridge*I) alpha = y on at most ``max_anchors``
    seeded anchors; mlps run full-batch gradient descent on squared loss.
    Identical (spec, pretrain, seed, model_id) give identical parameters.
    """
    if len(pretrain) == 0:
        raise TrainingError("pretraining set is empty", model_id, spec.family.value)
    features = np.asarray(pretrain.features, dtype=float)
    targets = np.asarray(pretrain.targets, dtype=float)
    rng = substream(seed, "model_training", model_id)

    if spec.family.is_kernel:
        params = _train_kernel(spec, features, targets, rng)
        param_count = len(params.coefficients) + 1
    else:
        params = _train_mlp(spec, features, targets, rng)
        param_count = mlp_param_count(features.shape[1], spec.hidden_layers)

    logger.debug("Trained model %d %s with %d parameters", model_id, spec.label, param_count)
    return PretrainedModel(
        id=model_id,
        spec=spec,
        parameters=params,
        input_dim=features.shape[1],
        param_count=param_count,
    )


class ModelCatalog(BaseModel):
    """The K pre-trained models with normalized transmission costs."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    models: Tuple[PretrainedModel, ...]
    costs: np.ndarray

    @field_validator("costs", mode="before")
    def freeze_costs(cls, v):
        return _frozen(v)

    @model_validator(mode="after")
    def check_costs(self):
        if len(self.models) == 0:
            raise ValueError("catalog needs at least one model")
        if len(self.models) != len(self.costs):
            raise ValueError(f"{len(self.models)} models but {len(self.costs)} costs")
        if np.any(self.costs <= 0) or np.any(self.costs > 1):
            raise ValueError("costs must lie in (0, 1]")
        if self.costs.max() != 1.0:
            raise ValueError("the most expensive model must cost exactly 1")
        if any(model.id != index for index, model in enumerate(self.models)):
            raise ValueError("model ids must be dense and ordered")
        return self

    @classmethod
    def from_models(cls, models: Sequence[PretrainedModel]) -> "ModelCatalog":
        max_params = max(model.param_count for model in models)
        return cls(models=tuple(models), costs=[model_cost(m, max_params) for m in models])

    @property
    def size(self) -> int:
        return len(self.models)

    @property
    def input_dim(self) -> int:
        return self.models[0].input_dim

    def predict_matrix(self, features: np.ndarray) -> np.ndarray:
        """Predictions of every model on every row, shape (K, n)."""
        return np.vstack([model.predict_batch(features) for model in self.models])


def build_catalog(
    specs: Optional[Sequence[ModelSpec]],
    pretrain: PretrainSet,
    seed: int,
    max_workers: int = 1,
) -> ModelCatalog:
    """Train every spec (the default 22-model zoo when ``specs`` is None) and price it."""
    specs = list(specs) if specs is not None else default_zoo_specs()

    def train(indexed: Tuple[int, ModelSpec]) -> PretrainedModel:
        index, spec = indexed
        try:
            return train_model(spec, pretrain, seed, model_id=index)
        except TrainingError:
            raise
        except (EflError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            raise TrainingError(str(exc), index, spec.family.value) from exc

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            models = list(pool.map(train, enumerate(specs)))
    else:
        models = [train(item) for item in enumerate(specs)]

    catalog = ModelCatalog.from_models(models)
    logger.info("Trained %d models on %d pretraining samples", catalog.size, len(pretrain))
    return catalog


def save_catalog(catalog: ModelCatalog, path: Union[str, Path]) -> None:
    """Write the catalog as self-describing JSON."""
    entries = []
    for model, cost in zip(catalog.models, catalog.costs):
        params = model.parameters
        if isinstance(params, KernelParameters):
            coefficients = {"anchors": params.anchors.tolist(), "coefficients": params.coefficients.tolist()}
        else:
            coefficients = {
                "weights": [w.tolist() for w in params.weights],
                "biases": [b.tolist() for b in params.biases],
            }
        entries.append({
            "id": model.id,
            "spec": model.spec.model_dump(mode="json"),
            "input_dim": model.input_dim,
            "param_count": model.param_count,
            "cost": float(cost),
            "parameters": coefficients,
        })
    document = {"format": CATALOG_FORMAT, "version": CATALOG_VERSION, "models": entries}
    Path(path).write_text(json.dumps(document))
    logger.info("Saved %d models to %s", catalog.size, path)


def load_catalog(path: Union[str, Path]) -> ModelCatalog:
    """Read a catalog written by :func:`save_catalog`."""
    document = json.loads(Path(path).read_text())
    if document.get("format") != CATALOG_FORMAT or document.get("version") != CATALOG_VERSION:
        raise InvalidInputError(f"{path} is not a version {CATALOG_VERSION} model catalog")
    models = []
    for entry in document["models"]:
        spec = ModelSpec.model_validate(entry["spec"])
        raw = entry["parameters"]
        if spec.family.is_kernel:
            params = KernelParameters(anchors=raw["anchors"], coefficients=raw["coefficients"])
        else:
            params = MlpParameters(weights=tuple(raw["weights"]), biases=tuple(raw["biases"]))
        models.append(PretrainedModel(
            id=entry["id"],
            spec=spec,
            parameters=params,
            input_dim=entry["input_dim"],
            param_count=entry["param_count"],
        ))
    return ModelCatalog.from_models(models)
