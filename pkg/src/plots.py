"""Plotly figures for finished experiment outputs."""
from typing import Optional

import pandas as pd
import plotly.graph_objects as go

ALGORITHM_COLORS = {
    "efl-fg": "blue",
    "fedboost-surrogate": "orange",
    "full-ensemble": "green",
}


def _mean_curve(curves: pd.DataFrame, value: str) -> pd.DataFrame:
    return curves.groupby(["dataset", "algorithm", "t"], as_index=False)[value].mean()


def create_mse_plot(mse_curves: pd.DataFrame, dataset: Optional[str] = None) -> go.Figure:
    """
    MSE_t against t, averaged over seeds, one line per algorithm.

    Args:
        mse_curves: Tidy frame with dataset, algorithm, seed, t, mse_t
        dataset: Restrict to one dataset (all datasets when None)

    Returns:
        Plotly figure with a logarithmic MSE axis
    """
    if mse_curves.empty:
        return go.Figure()
    if dataset is not None:
        mse_curves = mse_curves[mse_curves["dataset"] == dataset]
    averaged = _mean_curve(mse_curves, "mse_t")

    fig = go.Figure()
    for (name, algorithm), curve in averaged.groupby(["dataset", "algorithm"]):
        fig.add_trace(go.Scatter(
            x=curve["t"],
            y=curve["mse_t"],
            mode="lines",
            name=f"{algorithm} ({name})" if dataset is None else algorithm,
            line=dict(color=ALGORITHM_COLORS.get(algorithm), width=2),
        ))

    fig.update_layout(
        title="MSE over learning rounds" + (f" on {dataset}" if dataset else ""),
        xaxis_title="Learning round t",
        yaxis_title="MSE_t",
        yaxis_type="log",
        plot_bgcolor="white",
        hovermode="x unified",
        height=400,
    )
    return fig


def create_regret_plot(regret_curves: pd.DataFrame, dataset: Optional[str] = None, average: bool = False) -> go.Figure:
    """Cumulative regret R_t (or R_t / t with ``average``) averaged over seeds."""
    if regret_curves.empty:
        return go.Figure()
    if dataset is not None:
        regret_curves = regret_curves[regret_curves["dataset"] == dataset]
    averaged = _mean_curve(regret_curves, "regret_t")

    fig = go.Figure()
    for (name, algorithm), curve in averaged.groupby(["dataset", "algorithm"]):
        values = curve["regret_t"] / curve["t"] if average else curve["regret_t"]
        fig.add_trace(go.Scatter(
            x=curve["t"],
            y=values,
            mode="lines",
            name=f"{algorithm} ({name})" if dataset is None else algorithm,
            line=dict(color=ALGORITHM_COLORS.get(algorithm), width=2),
        ))

    # Zero regret reference
    fig.add_hline(y=0.0, line=dict(color="red", width=1, dash="dash"))
    fig.update_layout(
        title=("Average regret R_t / t" if average else "Cumulative regret R_t"),
        xaxis_title="Learning round t",
        yaxis_title="R_t / t" if average else "R_t",
        plot_bgcolor="white",
        hovermode="x unified",
        height=400,
    )
    return fig


def create_violation_plot(summary: pd.DataFrame) -> go.Figure:
    """Budget-violation percentage per algorithm and dataset."""
    if summary.empty:
        return go.Figure()
    rates = summary.groupby(["dataset", "algorithm"], as_index=False)["budget_violation_rate"].mean()

    fig = go.Figure()
    for algorithm, rows in rates.groupby("algorithm"):
        fig.add_trace(go.Bar(
            x=rows["dataset"],
            y=100.0 * rows["budget_violation_rate"],
            name=algorithm,
            marker=dict(color=ALGORITHM_COLORS.get(algorithm)),
        ))
    fig.update_layout(
        title="Rounds over budget",
        xaxis_title="Dataset",
        yaxis_title="Budget violation (%)",
        barmode="group",
        plot_bgcolor="white",
        height=400,
    )
    return fig
