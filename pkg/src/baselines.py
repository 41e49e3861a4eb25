"""Comparators: the full ensemble, an expected-budget FedBoost surrogate and the best fixed model."""
import logging
import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import brentq

from src.exceptions import EflError, InvalidInputError, NumericStateError, TraceUnavailableError
from src.feedback_graph import WEIGHT_FLOOR
from src.losses import clipped_squared_losses
from src.models import Algorithm, ExperimentTrace, ModelId, RoundRecord
from src.rng import substream
from src.server import combine
from src.simulation import (
    PreparedExperiment,
    SimulationSettings,
    build_trace,
    check_jensen,
    client_count,
    gather_clients,
    oracle_losses,
    report_progress,
)

logger = logging.getLogger(__name__)

BISECTION_MAX_ITERATIONS = 100
# Clients fall back to this prediction when no model was sampled.
EMPTY_ENSEMBLE_PREDICTION = 0.5


class BaselineState(BaseModel):
    """Mixture weights of a baseline learner."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray = Field(description="Positive mixture weights over the K models")
    eta: float = Field(gt=0, description="Learning rate")
    inclusion: Optional[np.ndarray] = Field(default=None, description="Last inclusion probabilities (fedboost)")
    round: int = Field(ge=1, default=1)

    @field_validator("weights", "inclusion", mode="before")
    def freeze(cls, v):
        if v is None:
            return None
        array = np.array(v, dtype=float)
        if not np.all(np.isfinite(array)) or np.any(array <= 0):
            raise ValueError("weights and inclusion probabilities must be positive and finite")
        array.setflags(write=False)
        return array

    @classmethod
    def initial(cls, model_count: int, eta: float) -> "BaselineState":
        return cls(weights=np.ones(model_count), eta=eta)


def _updated_weights(weights: np.ndarray, estimates: np.ndarray, eta: float) -> np.ndarray:
    log_weights = np.log(weights) - eta * estimates
    if not np.all(np.isfinite(log_weights)):
        raise NumericStateError("baseline weight update produced a non-finite value")
    # Normalizing keeps the mixture identical and the weights representable.
    return np.maximum(np.exp(log_weights - log_weights.max()), WEIGHT_FLOOR)


def inclusion_probabilities(weights: np.ndarray, costs: np.ndarray, budget: float) -> np.ndarray:
    """
    pi_k = min(1, gamma * w_k / sum(w)) with gamma chosen so that the expected
    transmitted cost sum(pi_k c_k) equals the budget.

    Every model is always included when the whole zoo fits the budget.
    """
    weights = np.asarray(weights, dtype=float)
    costs = np.asarray(costs, dtype=float)
    if budget < costs.max():
        raise InvalidInputError(f"budget {budget} is below the largest model cost {costs.max()}")
    if math.fsum(costs) <= budget:
        return np.ones_like(costs)
    shares = weights / weights.sum()

    def excess(gamma: float) -> float:
        return math.fsum(np.minimum(1.0, gamma * shares) * costs) - budget

    # excess is piecewise linear with kinks at 1/share; bracket the root between kinks.
    kinks = np.sort(1.0 / shares)
    lower, upper = 0.0, kinks[-1]
    for kink in kinks:
        if excess(kink) >= 0:
            upper = kink
            break
        lower = kink
    try:
        gamma = brentq(excess, lower, upper, xtol=1e-14, maxiter=BISECTION_MAX_ITERATIONS)
    except (RuntimeError, ValueError) as exc:
        raise NumericStateError(f"inclusion-probability search did not converge: {exc}") from exc
    return np.clip(gamma * shares, WEIGHT_FLOOR, 1.0)


def _baseline_record(
    algorithm: Algorithm,
    t: int,
    transmitted: List[ModelId],
    batch,
    predictions: np.ndarray,
    costs: np.ndarray,
    settings: SimulationSettings,
    member_losses: Dict[ModelId, float],
    estimates: np.ndarray,
    oracle: Optional[np.ndarray],
) -> RoundRecord:
    client_losses = clipped_squared_losses(predictions, batch.targets)
    realized = math.fsum(client_losses)
    return RoundRecord(
        t=t,
        algorithm=algorithm,
        transmitted=tuple(transmitted),
        clients=batch.clients,
        transmitted_cost=math.fsum(costs[k] for k in transmitted),
        budget=settings.budget,
        client_predictions=predictions,
        client_targets=batch.targets,
        client_ensemble_losses=client_losses,
        member_losses=member_losses,
        model_estimates=estimates,
        realized_ensemble_loss=realized,
        # Single realization; there is no server draw to average over.
        expected_ensemble_loss=realized,
        oracle_losses=oracle,
    )


def full_ensemble_round(
    state: BaselineState,
    experiment: PreparedExperiment,
    t: int,
    settings: SimulationSettings,
    rng: np.random.Generator,
) -> Tuple[BaselineState, RoundRecord]:
    """Send every model; predict with the weighted mixture; update on full information."""
    size = experiment.model_count
    transmitted = list(range(size))
    n_t = client_count(settings.bandwidth, settings.loss_bandwidth, size, settings.n_max)
    batch = gather_clients(experiment, t, n_t, settings, rng)
    mixture = state.weights / math.fsum(state.weights)
    predictions = combine(mixture, batch.predictions)
    check_jensen(mixture, batch.predictions, batch.targets, t)

    losses = oracle_losses(batch)
    record = _baseline_record(
        Algorithm.FULL_ENSEMBLE, t, transmitted, batch, predictions, experiment.costs, settings,
        {k: float(losses[k]) for k in transmitted}, losses,
        losses if settings.oracle else None,
    )
    weights = _updated_weights(state.weights, losses, state.eta)
    return state.model_copy(update={"weights": weights, "round": state.round + 1}), record


def fedboost_round(
    state: BaselineState,
    experiment: PreparedExperiment,
    budget: float,
    t: int,
    settings: SimulationSettings,
    rng: np.random.Generator,
) -> Tuple[BaselineState, RoundRecord]:
    """
    Include each model independently with probability pi_k, so the budget
    holds only in expectation. Sampled members are mixed with normalized
    weights; loss estimates use inverse-propensity weighting.
    """
    costs = experiment.costs
    inclusion = inclusion_probabilities(state.weights, costs, budget)
    transmitted = [int(k) for k in np.flatnonzero(rng.random(len(costs)) < inclusion)]
    n_t = client_count(settings.bandwidth, settings.loss_bandwidth, max(len(transmitted), 1), settings.n_max)
    batch = gather_clients(experiment, t, n_t, settings, rng)

    estimates = np.zeros(len(costs))
    member_losses: Dict[ModelId, float] = {}
    if transmitted:
        mixture = state.weights[transmitted] / math.fsum(state.weights[transmitted])
        predictions = combine(mixture, batch.predictions[transmitted])
        member_clipped = clipped_squared_losses(batch.predictions[transmitted], batch.targets)
        for k, row in zip(transmitted, member_clipped):
            member_losses[k] = math.fsum(row)
            estimates[k] = member_losses[k] / inclusion[k]
    else:
        predictions = np.full(len(batch.clients), EMPTY_ENSEMBLE_PREDICTION)

    record = _baseline_record(
        Algorithm.FEDBOOST_SURROGATE, t, transmitted, batch, predictions, costs, settings,
        member_losses, estimates,
        oracle_losses(batch) if settings.oracle else None,
    )
    weights = _updated_weights(state.weights, estimates, state.eta)
    new_state = state.model_copy(update={"weights": weights, "inclusion": inclusion, "round": state.round + 1})
    return new_state, record


def run_baseline(
    experiment: PreparedExperiment,
    settings: SimulationSettings,
    algorithm: Algorithm,
    eta: float,
    xi: float = 0.0,
    records: Optional[List[RoundRecord]] = None,
    progress_callback: Optional[Callable[[Dict], None]] = None,
) -> ExperimentTrace:
    """Run a baseline for T rounds. ``xi`` is recorded only."""
    if algorithm is Algorithm.EFL_FG:
        raise InvalidInputError("efl-fg is not a baseline")
    rounds = experiment.stream.rounds
    records = records if records is not None else []
    state = BaselineState.initial(experiment.model_count, eta)
    rng = substream(experiment.seed, "baseline")
    logger.info("Running %s on %s (seed %d) for %d rounds", algorithm.value, experiment.dataset, experiment.seed, rounds)
    for t in range(1, rounds + 1):
        try:
            if algorithm is Algorithm.FULL_ENSEMBLE:
                state, record = full_ensemble_round(state, experiment, t, settings, rng)
            else:
                state, record = fedboost_round(state, experiment, settings.budget, t, settings, rng)
        except EflError as exc:
            if exc.round_index is None:
                exc.round_index = t
            raise
        records.append(record)
        report_progress(progress_callback, t, rounds, algorithm)
    return build_trace(experiment, algorithm, records, settings, eta, xi)


def best_fixed_model(oracle_losses: Optional[np.ndarray]) -> Tuple[ModelId, np.ndarray]:
    """k* = argmin_k of the summed full-information loss (lowest index on ties),
    with its cumulative loss series."""
    if oracle_losses is None:
        raise TraceUnavailableError("best fixed model needs the oracle loss channel")
    losses = np.asarray(oracle_losses, dtype=float)
    if losses.ndim != 2 or losses.shape[1] == 0:
        raise InvalidInputError(f"oracle losses must be a (T, K) matrix with K >= 1, got shape {losses.shape}")
    totals = np.array([math.fsum(losses[:, k]) for k in range(losses.shape[1])])
    best = int(np.argmin(totals))
    return best, np.cumsum(losses[:, best])
