"""Round loop of the feedback-graph ensemble learner and the trace CSV format."""
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.data import ClientStream, partition
from src.exceptions import (
    BandwidthInfeasibleError,
    ConfigError,
    ContractViolationError,
    EflError,
    InvalidInputError,
    NumericStateError,
    SizingError,
)
from src.feedback_graph import (
    MAX_ALPHA_VERTICES,
    FeedbackGraph,
    check_graph_invariants,
    generate_feedback_graph,
    independence_number,
)
from src.losses import clipped_squared_losses
from src.models import Algorithm, Dataset, ExperimentTrace, ModelSpec, RoundRecord, SplitPlan
from src.rng import substream
from src.server import (
    ServerState,
    combine,
    decide,
    estimate_losses,
    expected_round_loss,
    inverse_q_bar,
    node_ensemble_losses,
    observation_probabilities,
    update_weights,
)
from src.zoo import ModelCatalog, build_catalog

logger = logging.getLogger(__name__)

JENSEN_TOLERANCE = 1e-12
FLOAT_FORMAT = "%.9g"
TRACE_COLUMNS = [
    "t",
    "algorithm",
    "drawn",
    "transmitted",
    "cost",
    "n_clients",
    "realized_ensemble_loss_mean",
    "expected_ensemble_loss",
    "mse_t",
    "dom_set_size",
    "alpha",
    "mean_out_degree",
]


class SimulationSettings(BaseModel):
    """Round-level parameters shared by every learner."""
    model_config = ConfigDict(frozen=True)

    budget: float = Field(gt=0, description="Per-round transmission budget B_t")
    clients: int = Field(ge=1, description="Total number of clients N")
    n_max: int = Field(ge=1, description="Cap on clients queried per round")
    bandwidth: float = Field(gt=0, description="Client-to-server bandwidth b_t")
    loss_bandwidth: float = Field(gt=0, description="Bandwidth b_l needed per reported loss")
    oracle: bool = Field(default=True, description="Record every model's loss for regret")
    alpha_diagnostic: bool = Field(default=True, description="Compute the independence number per round")
    check_invariants: bool = Field(default=True, description="Re-check graph guarantees every round")

    @model_validator(mode="after")
    def check_client_cap(self):
        if self.n_max > self.clients:
            raise ValueError(f"n_max={self.n_max} exceeds the {self.clients} available clients")
        return self


class PreparedExperiment(BaseModel):
    """Trained catalog plus the client stream and its precomputed predictions."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    seed: int = Field(ge=0)
    dataset: str
    catalog: ModelCatalog
    stream: ClientStream
    predictions: np.ndarray = Field(description="f_k on every stream row, shape (K, n_stream)")
    config: Dict = Field(default_factory=dict)

    @field_validator("predictions", mode="before")
    def freeze_predictions(cls, v):
        array = np.array(v, dtype=float)
        array.setflags(write=False)
        return array

    @property
    def costs(self) -> np.ndarray:
        return self.catalog.costs

    @property
    def model_count(self) -> int:
        return self.catalog.size


class ClientBatch(NamedTuple):
    clients: Tuple[int, ...]
    predictions: np.ndarray
    targets: np.ndarray


def prepare_experiment(
    dataset: Dataset,
    plan: SplitPlan,
    specs: Optional[Sequence[ModelSpec]] = None,
    catalog: Optional[ModelCatalog] = None,
    max_workers: int = 1,
    config: Optional[Dict] = None,
) -> PreparedExperiment:
    """Split a normalized dataset, train (or reuse) the zoo and score the stream."""
    pretrain, stream = partition(dataset, plan)
    if catalog is None:
        catalog = build_catalog(specs, pretrain, plan.seed, max_workers=max_workers)
    elif catalog.input_dim != dataset.feature_count:
        raise ConfigError(
            f"catalog expects {catalog.input_dim} features, dataset has {dataset.feature_count}",
            key="zoo_file",
        )
    predictions = catalog.predict_matrix(stream.features)
    if not np.all(np.isfinite(predictions)):
        raise NumericStateError("a pre-trained model produced non-finite predictions on the client stream")
    return PreparedExperiment(
        seed=plan.seed,
        dataset=dataset.name,
        catalog=catalog,
        stream=stream,
        predictions=predictions,
        config=config or {},
    )


def client_count(bandwidth: float, loss_bandwidth: float, out_degree: int, n_max: int) -> int:
    """N_t = min(n_max, floor(b_t / (b_l (|S_t| + 1))))."""
    if not (bandwidth > 0 and loss_bandwidth > 0):
        raise InvalidInputError(f"bandwidths must be positive, got b_t={bandwidth}, b_l={loss_bandwidth}")
    if out_degree < 1:
        raise InvalidInputError(f"out-degree must be >= 1, got {out_degree}")
    ratio = bandwidth / (loss_bandwidth * (out_degree + 1))
    if ratio >= n_max:
        return n_max
    count = math.floor(ratio)
    if count == 0:
        raise BandwidthInfeasibleError(
            f"bandwidth {bandwidth} cannot carry {out_degree + 1} losses of size {loss_bandwidth} for one client"
        )
    return count


def select_clients(n_t: int, n_total: int, rng: np.random.Generator) -> Tuple[int, ...]:
    """Uniform sample of ``n_t`` distinct client ids, ascending."""
    if not 1 <= n_t <= n_total:
        raise SizingError(f"cannot select {n_t} of {n_total} clients")
    return tuple(sorted(int(i) for i in rng.choice(n_total, size=n_t, replace=False)))


def gather_clients(
    experiment: PreparedExperiment,
    t: int,
    n_t: int,
    settings: SimulationSettings,
    rng: np.random.Generator,
) -> ClientBatch:
    """Select C_t and look up every model's prediction on its samples."""
    clients = select_clients(n_t, settings.clients, rng)
    slots = experiment.stream.slots(t, list(clients))
    return ClientBatch(
        clients=clients,
        predictions=experiment.predictions[:, slots],
        targets=np.asarray(experiment.stream.targets[slots], dtype=float),
    )


def oracle_losses(batch: ClientBatch) -> np.ndarray:
    """Summed clipped loss of every model on the round's clients."""
    losses = clipped_squared_losses(batch.predictions, batch.targets)
    return np.array([math.fsum(row) for row in losses])


def check_jensen(mixture: np.ndarray, member_predictions: np.ndarray, targets: np.ndarray, t: int) -> None:
    """Ensemble squared error never exceeds the weighted member squared errors."""
    ensemble_error = (combine(mixture, member_predictions) - targets) ** 2
    member_error = mixture @ ((member_predictions - targets) ** 2)
    if np.any(ensemble_error > member_error + JENSEN_TOLERANCE * (1.0 + member_error)):
        raise ContractViolationError("ensemble loss exceeds the weighted member losses", t)


def run_round(
    state: ServerState,
    experiment: PreparedExperiment,
    prev_graph: Optional[FeedbackGraph],
    t: int,
    settings: SimulationSettings,
    node_rng: np.random.Generator,
    client_rng: np.random.Generator,
) -> Tuple[ServerState, FeedbackGraph, RoundRecord]:
    """
    One learning round.

    Builds G_t, draws I_t, sends S_t = N^out(I_t), queries N_t clients,
    scores the ensemble and members, forms the importance-sampling estimates
    and updates both weight vectors.
    """
    try:
        return _run_round(state, experiment, prev_graph, t, settings, node_rng, client_rng)
    except EflError as exc:
        if exc.round_index is None:
            exc.round_index = t
        raise


def _run_round(state, experiment, prev_graph, t, settings, node_rng, client_rng):
    costs = experiment.costs
    graph = generate_feedback_graph(state.w, costs, settings.budget, prev_graph)
    if settings.check_invariants:
        check_graph_invariants(graph, state.w, costs, settings.budget, prev_graph)

    decision = decide(state, graph, node_rng)
    transmitted = list(decision.transmitted)
    n_t = client_count(settings.bandwidth, settings.loss_bandwidth, len(transmitted), settings.n_max)
    batch = gather_clients(experiment, t, n_t, settings, client_rng)

    member_predictions = batch.predictions[transmitted]
    predictions = combine(decision.ensemble_weights, member_predictions)
    client_losses = clipped_squared_losses(predictions, batch.targets)
    realized = math.fsum(client_losses)
    check_jensen(decision.ensemble_weights, member_predictions, batch.targets, t)

    member_clipped = clipped_squared_losses(member_predictions, batch.targets)
    member_losses = {k: math.fsum(row) for k, row in zip(transmitted, member_clipped)}
    member_vector = np.zeros(graph.size)
    member_vector[transmitted] = [member_losses[k] for k in transmitted]

    model_estimates, ensemble_estimates = estimate_losses(graph, decision, member_vector, realized)
    node_losses = node_ensemble_losses(state.w, graph, batch.predictions, batch.targets)
    q = observation_probabilities(graph, decision.pmf)

    alpha = None
    if settings.alpha_diagnostic and graph.size <= MAX_ALPHA_VERTICES:
        alpha = independence_number(graph)

    cost = math.fsum(costs[k] for k in transmitted)
    record = RoundRecord(
        t=t,
        algorithm=Algorithm.EFL_FG,
        drawn=decision.drawn,
        transmitted=decision.transmitted,
        clients=batch.clients,
        transmitted_cost=cost,
        budget=settings.budget,
        client_predictions=predictions,
        client_targets=batch.targets,
        client_ensemble_losses=client_losses,
        member_losses=member_losses,
        model_estimates=model_estimates,
        ensemble_estimates=ensemble_estimates,
        realized_ensemble_loss=realized,
        expected_ensemble_loss=expected_round_loss(decision.pmf, node_losses),
        dominating_set_size=len(graph.dominating_set),
        alpha=alpha,
        mean_out_degree=float(np.mean(graph.out_degrees())),
        pmf=decision.pmf,
        inverse_q_bar=inverse_q_bar(state.w, graph, q),
        out_degrees=graph.out_degrees(),
        oracle_losses=oracle_losses(batch) if settings.oracle else None,
    )
    logger.debug(
        "Round %d: drew %d, sent %d models (cost %.4g), %d clients",
        t, decision.drawn, len(transmitted), cost, n_t,
    )
    new_state = update_weights(state, model_estimates, ensemble_estimates)
    return new_state, graph, record


def report_progress(progress_callback: Optional[Callable[[Dict], None]], t: int, rounds: int, algorithm: Algorithm) -> None:
    if progress_callback is None:
        return
    step = max(1, rounds // 100)
    if t % step == 0 or t == rounds:
        progress_callback({
            "progress": t / rounds,
            "t": t,
            "algorithm": algorithm.value,
            "status": "running" if t < rounds else "complete",
        })


def build_trace(
    experiment: PreparedExperiment,
    algorithm: Algorithm,
    records: Sequence[RoundRecord],
    settings: SimulationSettings,
    eta: float,
    xi: float,
) -> ExperimentTrace:
    oracle = None
    if settings.oracle:
        oracle = np.array([r.oracle_losses for r in records], dtype=float).reshape(len(records), experiment.model_count)
    return ExperimentTrace(
        algorithm=algorithm,
        seed=experiment.seed,
        dataset=experiment.dataset,
        config=experiment.config,
        records=tuple(records),
        oracle_losses=oracle,
        costs=experiment.costs,
        budget=settings.budget,
        eta=eta,
        xi=xi,
    )


def run_experiment(
    experiment: PreparedExperiment,
    settings: SimulationSettings,
    eta: float,
    xi: float,
    records: Optional[List[RoundRecord]] = None,
    progress_callback: Optional[Callable[[Dict], None]] = None,
    graph_sink: Optional[Callable[[FeedbackGraph], None]] = None,
) -> ExperimentTrace:
    """
    Run the feedback-graph learner for T rounds.

    Args:
        experiment: Prepared catalog and client stream
        settings: Budget, client and bandwidth parameters
        eta: Learning rate
        xi: Exploration rate
        records: Optional list that receives each record as soon as it exists,
            so callers keep the completed rounds when a later round fails
        progress_callback: Optional callback receiving progress dictionaries
        graph_sink: Optional callback receiving every G_t

    Returns:
        ExperimentTrace with T records
    """
    rounds = experiment.stream.rounds
    records = records if records is not None else []
    if settings.alpha_diagnostic and experiment.model_count > MAX_ALPHA_VERTICES:
        logger.warning(
            "Skipping the independence-number diagnostic: %d models exceed %d",
            experiment.model_count, MAX_ALPHA_VERTICES,
        )

    state = ServerState.initial(experiment.model_count, eta, xi)
    node_rng = substream(experiment.seed, "node_draw")
    client_rng = substream(experiment.seed, "client_selection")
    graph = None
    logger.info("Running efl-fg on %s (seed %d) for %d rounds", experiment.dataset, experiment.seed, rounds)
    for t in range(1, rounds + 1):
        state, graph, record = run_round(state, experiment, graph, t, settings, node_rng, client_rng)
        records.append(record)
        if graph_sink is not None:
            graph_sink(graph)
        report_progress(progress_callback, t, rounds, Algorithm.EFL_FG)
    return build_trace(experiment, Algorithm.EFL_FG, records, settings, eta, xi)


def _running_mean(values: np.ndarray) -> np.ndarray:
    return np.cumsum(values) / np.arange(1, len(values) + 1)


def trace_frame(records: Sequence[RoundRecord], estimate_columns: bool = False) -> pd.DataFrame:
    """One row per round in the trace CSV layout."""
    mse = _running_mean(np.array([r.squared_error_mean for r in records], dtype=float))
    rows = []
    for record, mse_t in zip(records, mse):
        row = {
            "t": record.t,
            "algorithm": record.algorithm.value,
            "drawn": record.drawn,
            "transmitted": ";".join(str(k) for k in record.transmitted),
            "cost": record.transmitted_cost,
            "n_clients": record.n_clients,
            "realized_ensemble_loss_mean": record.realized_ensemble_loss / record.n_clients,
            "expected_ensemble_loss": record.expected_ensemble_loss,
            "mse_t": mse_t,
            "dom_set_size": record.dominating_set_size,
            "alpha": record.alpha,
            "mean_out_degree": record.mean_out_degree,
        }
        if estimate_columns:
            for k, value in enumerate(record.model_estimates):
                row[f"est_model_{k}"] = value
            if record.ensemble_estimates is not None:
                for k, value in enumerate(record.ensemble_estimates):
                    row[f"est_ensemble_{k}"] = value
        rows.append(row)
    frame = pd.DataFrame(rows, columns=None if rows else TRACE_COLUMNS)
    # Optional integers stay integers when some rounds leave them blank.
    for column in ("drawn", "dom_set_size", "alpha"):
        frame[column] = frame[column].astype("Int64")
    return frame


def write_trace(records: Sequence[RoundRecord], path: Union[str, Path], estimate_columns: bool = False) -> Path:
    """Write the trace CSV; a header row is written even for zero rounds."""
    path = Path(path)
    trace_frame(records, estimate_columns).to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="")
    logger.info("Wrote %d rounds to %s", len(records), path)
    return path
