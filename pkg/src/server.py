"""Server-side decision core: node sampling, ensembles, loss estimates and weight updates."""
import logging
import math
from typing import Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.exceptions import ContractViolationError, InvalidInputError, NumericStateError
from src.feedback_graph import WEIGHT_FLOOR, FeedbackGraph
from src.losses import clipped_squared_losses
from src.models import ModelId, RateSchedule
from src.zoo import ModelCatalog

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-12
# Below this maximum a weight vector is rescaled so its largest entry is 1.
RESCALE_THRESHOLD = 1e-100


def _positive_vector(value, name: str) -> np.ndarray:
    array = np.array(value, dtype=float)
    if array.ndim != 1 or array.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(array)) or np.any(array <= 0):
        raise ValueError(f"{name} must be strictly positive and finite")
    array.setflags(write=False)
    return array


class ServerState(BaseModel):
    """Model-confidence weights w, node-confidence weights u and the rates."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    w: np.ndarray = Field(description="Model-confidence weights w_{k,t}")
    u: np.ndarray = Field(description="Node-confidence weights u_{k,t}")
    eta: float = Field(gt=0, description="Learning rate")
    xi: float = Field(ge=0, lt=1, description="Exploration rate")
    round: int = Field(ge=1, default=1, description="Round t the weights belong to")

    @field_validator("w", mode="before")
    def validate_w(cls, v):
        return _positive_vector(v, "w")

    @field_validator("u", mode="before")
    def validate_u(cls, v):
        return _positive_vector(v, "u")

    @classmethod
    def initial(cls, model_count: int, eta: float, xi: float) -> "ServerState":
        """All weights start at 1 in round 1."""
        if model_count < 1:
            raise InvalidInputError(f"need at least one model, got {model_count}")
        return cls(w=np.ones(model_count), u=np.ones(model_count), eta=eta, xi=xi, round=1)

    @property
    def size(self) -> int:
        return int(self.w.shape[0])


class RoundDecision(BaseModel):
    """What the server sends in round t."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pmf: np.ndarray = Field(description="Node sampling distribution p_t")
    drawn: ModelId = Field(ge=0, description="Drawn node I_t")
    transmitted: Tuple[ModelId, ...] = Field(description="S_t, the out-neighborhood of I_t")
    ensemble_weights: np.ndarray = Field(description="w_k / W_t over S_t, aligned with transmitted")

    @field_validator("pmf", "ensemble_weights", mode="before")
    def freeze(cls, v):
        array = np.array(v, dtype=float)
        array.setflags(write=False)
        return array


def compute_pmf(state: ServerState, dominating: Sequence[ModelId]) -> np.ndarray:
    """p_k = (1 - xi) u_k / U_t + xi / |D_t| for k in D_t."""
    if len(dominating) == 0:
        raise ContractViolationError("dominating set is empty")
    total = math.fsum(state.u)
    if not math.isfinite(total) or total <= 0:
        raise NumericStateError(f"node weights sum to {total}", state.round)
    pmf = (1.0 - state.xi) * state.u / total
    pmf[list(dominating)] += state.xi / len(dominating)
    mass = math.fsum(pmf)
    if abs(mass - 1.0) > NORMALIZATION_TOLERANCE:
        raise NumericStateError(f"sampling distribution sums to {mass}", state.round)
    return pmf


def draw_node(pmf: np.ndarray, rng: np.random.Generator) -> ModelId:
    """Inverse-CDF draw of one node; consumes one uniform from ``rng``."""
    cdf = np.cumsum(pmf)
    # Scaling by cdf[-1] keeps rounding in the last entry from leaving a gap.
    position = rng.random() * cdf[-1]
    index = int(np.searchsorted(cdf, position, side="right"))
    return min(index, len(pmf) - 1)


def observation_probability(graph: FeedbackGraph, pmf: np.ndarray, k: ModelId) -> float:
    """q_k: probability that model k is transmitted, summed over its in-neighbors."""
    return math.fsum(pmf[j] for j in graph.in_neighbors[k])


def observation_probabilities(graph: FeedbackGraph, pmf: np.ndarray) -> np.ndarray:
    return np.array([observation_probability(graph, pmf, k) for k in range(graph.size)])


def ensemble_weights(weights: np.ndarray, transmitted: Sequence[ModelId]) -> np.ndarray:
    """w_k / W over ``transmitted``, in the order given."""
    if len(transmitted) == 0:
        raise ContractViolationError("cannot build an ensemble from no models")
    selected = np.asarray(weights, dtype=float)[list(transmitted)]
    total = math.fsum(selected)
    if not total > 0:
        raise NumericStateError(f"ensemble weights sum to {total}")
    return selected / total


def combine(mixture: np.ndarray, member_predictions: np.ndarray) -> np.ndarray:
    """Convex combination of member predictions; rows of ``member_predictions``
    follow the order of ``mixture``."""
    return mixture @ member_predictions


def ensemble_predict(state: ServerState, transmitted: Sequence[ModelId], catalog: ModelCatalog, x) -> float:
    """Prediction of the weighted ensemble over the transmitted models."""
    mixture = ensemble_weights(state.w, transmitted)
    predictions = np.array([catalog.models[k].predict(x) for k in transmitted])
    return float(combine(mixture, predictions))


def decide(state: ServerState, graph: FeedbackGraph, rng: np.random.Generator) -> RoundDecision:
    """Draw I_t from p_t and fix S_t with its ensemble weights."""
    pmf = compute_pmf(state, graph.dominating_set)
    drawn = draw_node(pmf, rng)
    transmitted = graph.out_neighbors[drawn]
    mixture = ensemble_weights(state.w, transmitted)
    return RoundDecision(pmf=pmf, drawn=drawn, transmitted=transmitted, ensemble_weights=mixture)


def estimate_model_loss(summed_loss: float, q_k: float, in_s: bool) -> float:
    """Importance-sampling estimate: summed loss over q_k when observed, else 0."""
    if not q_k > 0:
        raise NumericStateError(f"observation probability {q_k} is not positive")
    return summed_loss / q_k if in_s else 0.0


def estimate_ensemble_loss(summed_loss: float, p_k: float, is_drawn: bool) -> float:
    """Importance-sampling estimate of node k's ensemble loss."""
    if not p_k > 0:
        raise NumericStateError(f"sampling probability {p_k} is not positive")
    return summed_loss / p_k if is_drawn else 0.0


def estimate_losses(
    graph: FeedbackGraph,
    decision: RoundDecision,
    member_losses: np.ndarray,
    drawn_ensemble_loss: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Estimates for all K models and nodes.

    ``member_losses[k]`` is the summed client loss of model k; only entries in
    S_t are read. Returns (model estimates, ensemble estimates).
    """
    size = graph.size
    q = observation_probabilities(graph, decision.pmf)
    transmitted = set(decision.transmitted)
    model_estimates = np.array([
        estimate_model_loss(float(member_losses[k]) if k in transmitted else 0.0, q[k], k in transmitted)
        for k in range(size)
    ])
    ensemble_estimates = np.array([
        estimate_ensemble_loss(drawn_ensemble_loss if k == decision.drawn else 0.0, decision.pmf[k], k == decision.drawn)
        for k in range(size)
    ])
    return model_estimates, ensemble_estimates


def _multiplicative_step(weights: np.ndarray, estimates: np.ndarray, eta: float) -> np.ndarray:
    log_weights = np.log(weights) - eta * estimates
    updated = np.exp(log_weights)
    if not np.all(np.isfinite(log_weights)):
        raise NumericStateError("weight update produced a non-finite value")
    if updated.max() < RESCALE_THRESHOLD:
        # A common factor leaves every ratio of weights unchanged.
        updated = np.exp(log_weights - log_weights.max())
        logger.debug("Rescaled weights after underflow toward %g", RESCALE_THRESHOLD)
    return np.maximum(updated, WEIGHT_FLOOR)


def update_weights(state: ServerState, losses: np.ndarray, ensemble_losses: np.ndarray) -> ServerState:
    """w <- w exp(-eta l), u <- u exp(-eta l_hat); advances the round counter."""
    losses = np.asarray(losses, dtype=float)
    ensemble_losses = np.asarray(ensemble_losses, dtype=float)
    for name, values in (("model", losses), ("ensemble", ensemble_losses)):
        if values.shape != state.w.shape:
            raise ContractViolationError(f"{name} estimates have shape {values.shape}, expected {state.w.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise NumericStateError(f"{name} loss estimates must be finite and non-negative", state.round)
    try:
        w = _multiplicative_step(state.w, losses, state.eta)
        u = _multiplicative_step(state.u, ensemble_losses, state.eta)
    except NumericStateError as exc:
        exc.round_index = state.round
        raise
    return state.model_copy(update={"w": _freeze(w), "u": _freeze(u), "round": state.round + 1})


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def node_ensemble_losses(
    weights: np.ndarray,
    graph: FeedbackGraph,
    member_predictions: np.ndarray,
    targets: np.ndarray,
) -> np.ndarray:
    """Summed clipped client loss of every node's ensemble f_hat_k over N^out_k.

    ``member_predictions`` has shape (K, n) over the round's client samples.
    """
    losses = np.empty(graph.size)
    for k, row in enumerate(graph.out_neighbors):
        prediction = combine(ensemble_weights(weights, row), member_predictions[list(row)])
        losses[k] = math.fsum(clipped_squared_losses(prediction, targets))
    return losses


def expected_round_loss(pmf: np.ndarray, per_node_ensemble_losses: np.ndarray) -> float:
    """Conditional expectation of the ensemble loss over the node draw."""
    return math.fsum(np.asarray(pmf) * np.asarray(per_node_ensemble_losses))


def inverse_q_bar(weights: np.ndarray, graph: FeedbackGraph, q: np.ndarray) -> np.ndarray:
    """Per vertex k: sum over N^out_k of w_j / (q_j W_k)."""
    values = np.empty(graph.size)
    for k, row in enumerate(graph.out_neighbors):
        selected = np.asarray(weights)[list(row)]
        values[k] = math.fsum(selected / q[list(row)]) / math.fsum(selected)
    return values


def resolve_rates(
    eta: Union[float, RateSchedule, str],
    xi: Union[float, RateSchedule, str],
    rounds: int,
    model_count: int,
) -> Tuple[float, float]:
    """Turn explicit rates or schedule names into numbers for horizon T.

    ``one-over-sqrt-T`` gives 1/sqrt(T), with T >= 2 for xi. ``theorem-1`` gives
    eta = sqrt(ln K / T) and xi = min(0.5, (ln K)^(3/4) T^(-1/4)); with a
    single model ln K = 0 and eta falls back to 1/sqrt(T).
    """
    horizon = max(rounds, 1)
    log_k = math.log(model_count) if model_count > 1 else 0.0

    def resolve(value, which: str) -> float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        schedule = RateSchedule(value)
        if schedule is RateSchedule.ONE_OVER_SQRT_T:
            if which == "xi":
                # xi must stay below 1, which 1/sqrt(T) reaches at T = 1.
                return 1.0 / math.sqrt(max(horizon, 2))
            return 1.0 / math.sqrt(horizon)
        if which == "eta":
            return math.sqrt(log_k / horizon) if log_k > 0 else 1.0 / math.sqrt(horizon)
        return min(0.5, log_k ** 0.75 * horizon ** -0.25)

    resolved_eta, resolved_xi = resolve(eta, "eta"), resolve(xi, "xi")
    if not resolved_eta > 0:
        raise InvalidInputError(f"learning rate must be positive, got {resolved_eta}")
    if not 0 <= resolved_xi < 1:
        raise InvalidInputError(f"exploration rate must lie in [0, 1), got {resolved_xi}")
    return resolved_eta, resolved_xi
