"""Experiment runner: wires config, data, zoo and learners, and writes result files."""
import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Union

import pandas as pd

from src.baselines import run_baseline
from src.config import CsvSource, ExperimentConfig, write_config
from src.data import load_dataset, normalize_minmax, partition, synthetic_dataset
from src.exceptions import ConfigError, EflError
from src.feedback_graph import FeedbackGraph, dump_graph
from src.metrics import SUMMARY_COLUMNS, mse_curve_frame, regret_curve_frame, summary_row
from src.models import Algorithm, Budget, Dataset, ExperimentTrace, RoundRecord, SplitPlan
from src.simulation import FLOAT_FORMAT, PreparedExperiment, prepare_experiment, run_experiment, write_trace
from src.zoo import ModelCatalog, build_catalog, load_catalog, save_catalog

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.csv"
TIMINGS_FILE = "timings.csv"
MSE_CURVE_FILE = "mse_curve.csv"
REGRET_CURVE_FILE = "regret_curve.csv"
CONFIG_SNAPSHOT_FILE = "config.json"
PARTIAL_SUFFIX = ".partial"


class RunFailure(NamedTuple):
    algorithm: Algorithm
    seed: int
    error: EflError


class RunResult(NamedTuple):
    output_dir: Path
    traces: List[ExperimentTrace]
    summary: pd.DataFrame
    failures: List[RunFailure]

    @property
    def ok(self) -> bool:
        return not self.failures


def trace_filename(algorithm: Algorithm, seed: int) -> str:
    return f"{algorithm.value}_seed{seed}.csv"


def load_source(config: ExperimentConfig, seed: int) -> Dataset:
    """Raw dataset for one seed; CSV data is the same for every seed."""
    source = config.dataset
    if isinstance(source, CsvSource):
        name = source.name or source.preset
        return load_dataset(source.path, source.target, name=name, preset=source.preset)
    return synthetic_dataset(source, seed)


def _checked_catalog(catalog: ModelCatalog, budget: float) -> ModelCatalog:
    Budget(per_round=budget).check_covers(catalog.costs)
    return catalog


def prepare_seeds(config: ExperimentConfig, seeds: List[int]) -> Dict[int, PreparedExperiment]:
    """Normalize, split, train and score everything before any file is written."""
    shared_catalog = load_catalog(config.zoo_file) if config.zoo_file else None
    csv_dataset = None
    prepared = {}
    for seed in seeds:
        if isinstance(config.dataset, CsvSource):
            if csv_dataset is None:
                csv_dataset = normalize_minmax(load_source(config, seed))
            dataset = csv_dataset
        else:
            dataset = normalize_minmax(load_source(config, seed))
        plan = SplitPlan(
            pretrain_fraction=config.pretrain_fraction,
            seed=seed,
            rounds=config.rounds,
            clients=config.clients,
        )
        experiment = prepare_experiment(
            dataset,
            plan,
            specs=config.model_specs(),
            catalog=shared_catalog,
            max_workers=config.max_workers,
            config=config.model_dump(mode="json"),
        )
        _checked_catalog(experiment.catalog, config.budget)
        prepared[seed] = experiment
    return prepared


def _graph_writer(path: Path) -> Callable[[FeedbackGraph], None]:
    def write(graph: FeedbackGraph) -> None:
        with path.open("a") as handle:
            handle.write(f"# round {graph.round}\n")
            handle.write(dump_graph(graph))
    return write


def run_one(
    config: ExperimentConfig,
    experiment: PreparedExperiment,
    algorithm: Algorithm,
    records: List[RoundRecord],
    output_dir: Path,
    progress_callback: Optional[Callable[[Dict], None]] = None,
) -> ExperimentTrace:
    """Simulate one (algorithm, seed) pair, appending records as rounds finish."""
    settings = config.simulation_settings()
    eta, xi = config.rates(experiment.model_count)
    if algorithm is Algorithm.EFL_FG:
        graph_sink = None
        if config.graph_dump:
            graph_path = output_dir / f"graphs_{algorithm.value}_seed{experiment.seed}.txt"
            graph_path.write_text("")
            graph_sink = _graph_writer(graph_path)
        return run_experiment(
            experiment, settings, eta, xi,
            records=records, progress_callback=progress_callback, graph_sink=graph_sink,
        )
    return run_baseline(experiment, settings, algorithm, eta, xi, records=records, progress_callback=progress_callback)


def run(
    config: ExperimentConfig,
    output_dir: Optional[Union[str, Path]] = None,
    seed_override: Optional[int] = None,
    progress_callback: Optional[Callable[[Dict], None]] = None,
) -> RunResult:
    """
    Execute every (algorithm, seed) combination of ``config``.

    Writes one trace CSV per run plus summary.csv, mse_curve.csv,
    regret_curve.csv, timings.csv and a config snapshot. A failed run
    leaves its completed rounds in ``<trace>.csv.partial``; the summary is
    then written as ``summary.csv.partial``.
    """
    if seed_override is not None and seed_override < 0:
        raise ConfigError(f"must be >= 0, got {seed_override}", key="seed_override")
    seeds = [seed_override] if seed_override is not None else list(config.seeds)
    prepared = prepare_seeds(config, seeds)

    output_dir = Path(output_dir or config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    write_config(config, output_dir / CONFIG_SNAPSHOT_FILE)

    traces: List[ExperimentTrace] = []
    failures: List[RunFailure] = []
    timings = []
    for algorithm in config.algorithms:
        for seed in seeds:
            records: List[RoundRecord] = []
            trace_path = output_dir / trace_filename(algorithm, seed)
            started = time.perf_counter()
            try:
                trace = run_one(config, prepared[seed], algorithm, records, output_dir, progress_callback)
            except EflError as exc:
                logger.error("%s seed %d failed: %s", algorithm.value, seed, exc)
                write_trace(records, str(trace_path) + PARTIAL_SUFFIX, config.estimate_columns)
                failures.append(RunFailure(algorithm, seed, exc))
                continue
            timings.append({"algorithm": algorithm.value, "seed": seed, "seconds": time.perf_counter() - started})
            write_trace(trace.records, trace_path, config.estimate_columns)
            traces.append(trace)

    summary = pd.DataFrame([summary_row(trace) for trace in traces], columns=SUMMARY_COLUMNS)
    suffix = PARTIAL_SUFFIX if failures else ""
    summary.to_csv(output_dir / (SUMMARY_FILE + suffix), index=False, float_format=FLOAT_FORMAT, na_rep="")
    pd.DataFrame(timings, columns=["algorithm", "seed", "seconds"]).to_csv(output_dir / TIMINGS_FILE, index=False, float_format="%.3f")
    if traces:
        curves = pd.concat([mse_curve_frame(t) for t in traces], ignore_index=True)
        curves.to_csv(output_dir / (MSE_CURVE_FILE + suffix), index=False, float_format=FLOAT_FORMAT)
        regrets = [regret_curve_frame(t) for t in traces if t.oracle_losses is not None]
        if regrets:
            pd.concat(regrets, ignore_index=True).to_csv(
                output_dir / (REGRET_CURVE_FILE + suffix), index=False, float_format=FLOAT_FORMAT
            )
    logger.info("Finished %d of %d runs; results in %s", len(traces), len(traces) + len(failures), output_dir)
    return RunResult(output_dir=output_dir, traces=traces, summary=summary, failures=failures)


def build_zoo(config: ExperimentConfig, dump_path: Union[str, Path]) -> ModelCatalog:
    """Train the zoo on the first seed's pretraining split and save it as JSON."""
    seed = config.seeds[0]
    dataset = normalize_minmax(load_source(config, seed))
    plan = SplitPlan(pretrain_fraction=config.pretrain_fraction, seed=seed, rounds=config.rounds, clients=config.clients)
    pretrain, _ = partition(dataset, plan)
    catalog = _checked_catalog(
        build_catalog(config.model_specs(), pretrain, seed, max_workers=config.max_workers),
        config.budget,
    )
    save_catalog(catalog, dump_path)
    return catalog
