"""Shared fixtures: hand-built catalogs and prepared experiments."""
from typing import Optional, Sequence

import pytest

from src.data import normalize_minmax, synthetic_dataset
from src.models import ModelFamily, ModelSpec, SplitPlan, SyntheticSpec
from src.simulation import PreparedExperiment, SimulationSettings, prepare_experiment
from src.zoo import KernelParameters, ModelCatalog, PretrainedModel


def offset_model(index: int, offset: float, param_count: int = 10) -> PretrainedModel:
    """Degree-1 polynomial kernel model computing f(x) = x + offset on 1-d inputs.

    With anchors 1 and 0 the prediction is a0 * (x + 1) + a1, so a0 = 1 and
    a1 = offset - 1.
    """
    return PretrainedModel(
        id=index,
        spec=ModelSpec(family=ModelFamily.POLYNOMIAL, hyperparameter=1),
        parameters=KernelParameters(anchors=[[1.0], [0.0]], coefficients=[1.0, offset - 1.0]),
        input_dim=1,
        param_count=param_count,
    )


def offset_catalog(offsets: Sequence[float], param_counts: Optional[Sequence[int]] = None) -> ModelCatalog:
    param_counts = param_counts or [10] * len(offsets)
    return ModelCatalog.from_models(
        [offset_model(k, b, p) for k, (b, p) in enumerate(zip(offsets, param_counts))]
    )


def linear_experiment(
    catalog: ModelCatalog,
    seed: int = 0,
    rounds: int = 50,
    clients: int = 20,
    samples: int = 400,
) -> PreparedExperiment:
    """Noise-free y = x stream on [0, 1] scored by ``catalog``."""
    dataset = normalize_minmax(synthetic_dataset(SyntheticSpec(feature_count=1, sample_count=samples), seed))
    plan = SplitPlan(pretrain_fraction=0.1, seed=seed, rounds=rounds, clients=clients)
    return prepare_experiment(dataset, plan, catalog=catalog)


def settings_for(budget: float, clients: int = 20, n_max: int = 5, **overrides) -> SimulationSettings:
    values = dict(budget=budget, clients=clients, n_max=n_max, bandwidth=1000.0, loss_bandwidth=1.0)
    values.update(overrides)
    return SimulationSettings(**values)


@pytest.fixture
def make_catalog():
    return offset_catalog


@pytest.fixture
def make_experiment():
    return linear_experiment


@pytest.fixture
def make_settings():
    return settings_for


def default_zoo_experiment(
    feature_count: int,
    seed: int = 0,
    rounds: int = 2000,
    clients: int = 100,
    samples: int = 4000,
) -> PreparedExperiment:
    """Noisy linear stream scored by the default 22-model zoo trained on it."""
    spec = SyntheticSpec(feature_count=feature_count, sample_count=samples, noise=0.05)
    dataset = normalize_minmax(synthetic_dataset(spec, seed))
    plan = SplitPlan(pretrain_fraction=0.1, seed=seed, rounds=rounds, clients=clients)
    return prepare_experiment(dataset, plan)


@pytest.fixture
def make_zoo_experiment():
    return default_zoo_experiment
