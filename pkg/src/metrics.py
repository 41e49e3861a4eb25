"""Evaluation metrics over experiment traces."""
import math
from typing import Dict, NamedTuple, Optional

import numpy as np
import pandas as pd

from src.baselines import best_fixed_model
from src.exceptions import InvalidInputError, TraceUnavailableError
from src.models import Algorithm, ExperimentTrace, ModelId


SUMMARY_COLUMNS = [
    "dataset",
    "algorithm",
    "seed",
    "rounds",
    "budget",
    "final_mse",
    "budget_violation_rate",
    "mean_cost",
    "regret_T",
    "best_model",
    "regret_bound",
]


class RegretSeries(NamedTuple):
    values: np.ndarray
    best_model: ModelId


def round_squared_errors(trace: ExperimentTrace) -> np.ndarray:
    return np.array([record.squared_error_mean for record in trace.records], dtype=float)


def mse_at(trace: ExperimentTrace, t: int) -> float:
    """Average over rounds 1..t of the per-round mean squared error (unclipped)."""
    if not 1 <= t <= trace.rounds:
        raise InvalidInputError(f"round {t} outside [1, {trace.rounds}]")
    return math.fsum(round_squared_errors(trace)[:t]) / t


def mse_curve(trace: ExperimentTrace) -> np.ndarray:
    """MSE_t for t = 1..T."""
    errors = round_squared_errors(trace)
    return np.cumsum(errors) / np.arange(1, len(errors) + 1)


def cumulative_regret(trace: ExperimentTrace) -> RegretSeries:
    """
    R_t = sum of expected ensemble losses up to t minus the smallest
    cumulative full-information model loss up to t.

    The reported best model is the minimizer at the horizon T.
    """
    if trace.oracle_losses is None:
        raise TraceUnavailableError("regret needs the oracle loss channel; enable the oracle flag")
    best, _ = best_fixed_model(trace.oracle_losses)
    expected = np.cumsum([record.expected_ensemble_loss for record in trace.records])
    comparator = np.cumsum(trace.oracle_losses, axis=0).min(axis=1) if trace.rounds else np.zeros(0)
    return RegretSeries(values=expected - comparator, best_model=best)


def budget_violation_rate(trace: ExperimentTrace, budget: Optional[float] = None) -> float:
    """Fraction of rounds whose transmitted cost exceeds the budget."""
    if trace.rounds == 0:
        return 0.0
    budget = trace.budget if budget is None else budget
    return sum(record.transmitted_cost > budget for record in trace.records) / trace.rounds


def theorem_bound(trace: ExperimentTrace) -> float:
    """
    Right-hand side of the expected regret bound of the feedback-graph learner:

        ln(K |N_out(k*, 1)|) / eta
          + sum_t [ xi (1 - eta/2 |C_t|^2) + eta/2 (K + 1/q_bar(k*, t)) |C_t|^2 ]

    where 1/q_bar(k*, t) is the weight-averaged inverse observation probability
    over the out-neighborhood of k*.
    """
    if trace.algorithm is not Algorithm.EFL_FG:
        raise TraceUnavailableError(f"the regret bound applies to efl-fg traces, not {trace.algorithm.value}")
    if trace.rounds == 0:
        raise TraceUnavailableError("the regret bound needs at least one round")
    best, _ = best_fixed_model(trace.oracle_losses)
    first = trace.records[0]
    if first.out_degrees is None or any(record.inverse_q_bar is None for record in trace.records):
        raise TraceUnavailableError("trace lacks the per-vertex observation diagnostics")

    k, eta, xi = trace.model_count, trace.eta, trace.xi
    total = math.log(k * first.out_degrees[best]) / eta
    terms = []
    for record in trace.records:
        clients_sq = record.n_clients ** 2
        terms.append(xi * (1.0 - 0.5 * eta * clients_sq) + 0.5 * eta * (k + record.inverse_q_bar[best]) * clients_sq)
    return total + math.fsum(terms)


def summary_row(trace: ExperimentTrace) -> Dict:
    """One summary.csv row: final MSE, violation rate and, with the oracle, regret."""
    row = {
        "dataset": trace.dataset,
        "algorithm": trace.algorithm.value,
        "seed": trace.seed,
        "rounds": trace.rounds,
        "budget": trace.budget,
        "final_mse": mse_at(trace, trace.rounds) if trace.rounds else None,
        "budget_violation_rate": budget_violation_rate(trace),
        "mean_cost": float(np.mean([r.transmitted_cost for r in trace.records])) if trace.rounds else None,
        "regret_T": None,
        "best_model": None,
        "regret_bound": None,
    }
    if trace.oracle_losses is not None and trace.rounds:
        regret = cumulative_regret(trace)
        row["regret_T"] = float(regret.values[-1])
        row["best_model"] = regret.best_model
        if trace.algorithm is Algorithm.EFL_FG:
            row["regret_bound"] = theorem_bound(trace)
    return row


def mse_curve_frame(trace: ExperimentTrace) -> pd.DataFrame:
    """Tidy (algorithm, seed, t, mse_t) rows."""
    curve = mse_curve(trace)
    return pd.DataFrame({
        "dataset": trace.dataset,
        "algorithm": trace.algorithm.value,
        "seed": trace.seed,
        "t": np.arange(1, len(curve) + 1),
        "mse_t": curve,
    })


def regret_curve_frame(trace: ExperimentTrace) -> pd.DataFrame:
    """Tidy (algorithm, seed, t, regret_t) rows; empty without the oracle channel."""
    if trace.oracle_losses is None:
        return pd.DataFrame(columns=["dataset", "algorithm", "seed", "t", "regret_t"])
    regret = cumulative_regret(trace)
    return pd.DataFrame({
        "dataset": trace.dataset,
        "algorithm": trace.algorithm.value,
        "seed": trace.seed,
        "t": np.arange(1, len(regret.values) + 1),
        "regret_t": regret.values,
    })
