"""Tests for report and figure generation."""
import pandas as pd
import plotly.graph_objects as go
import pytest

from src.exceptions import TraceUnavailableError
from src.metrics import SUMMARY_COLUMNS
from src.plots import create_mse_plot, create_regret_plot, create_violation_plot
from src.report_generator import (
    ReportGenerator,
    RunResults,
    comparison_table,
    generate_markdown_report,
    load_results,
    write_report,
)
from src.runner import MSE_CURVE_FILE, REGRET_CURVE_FILE, SUMMARY_FILE


def summary_frame(with_regret: bool = True) -> pd.DataFrame:
    rows = []
    for algorithm, violation, bound in (("efl-fg", 0.0, 12.5), ("fedboost-surrogate", 0.4, None)):
        for seed, mse in ((0, 0.010), (1, 0.014)):
            rows.append({
                "dataset": "synthetic",
                "algorithm": algorithm,
                "seed": seed,
                "rounds": 3,
                "budget": 1.5,
                "final_mse": mse,
                "budget_violation_rate": violation,
                "mean_cost": 1.2,
                "regret_T": 0.8 if with_regret else None,
                "best_model": 0 if with_regret else None,
                "regret_bound": bound if with_regret else None,
            })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def curve_frame(value: str) -> pd.DataFrame:
    rows = []
    for algorithm in ("efl-fg", "fedboost-surrogate"):
        for seed in (0, 1):
            for t in (1, 2, 3):
                rows.append({"dataset": "synthetic", "algorithm": algorithm, "seed": seed, "t": t, value: 0.1 * t + seed})
    return pd.DataFrame(rows)


@pytest.fixture
def results():
    return RunResults(summary=summary_frame(), mse_curves=curve_frame("mse_t"), regret_curves=curve_frame("regret_t"))


class TestComparisonTable:
    """Test per-algorithm aggregation over seeds."""

    def test_means_over_seeds(self, results):
        table = comparison_table(results.summary).set_index("algorithm")
        assert table.loc["efl-fg", "final_mse"] == pytest.approx(0.012)
        assert table.loc["fedboost-surrogate", "violation_pct"] == pytest.approx(40.0)
        assert table.loc["efl-fg", "seeds"] == 2

    def test_single_seed_has_zero_spread(self, results):
        table = comparison_table(results.summary[results.summary["seed"] == 0])
        assert (table["final_mse_std"] == 0.0).all()


class TestReports:
    """Test the Markdown and PDF reports."""

    def test_markdown_lists_every_algorithm(self, results):
        report = generate_markdown_report(results)
        assert "| efl-fg | synthetic |" in report
        assert "40.00%" in report
        assert "## 2. Regret at the horizon" in report

    def test_markdown_without_regret(self):
        report = generate_markdown_report(RunResults(summary_frame(False), pd.DataFrame(), pd.DataFrame()))
        assert "Regret" not in report

    def test_pdf(self, results):
        assert ReportGenerator(results).generate_pdf().startswith(b"%PDF")

    def test_pdf_without_regret(self):
        pdf = ReportGenerator(RunResults(summary_frame(False), pd.DataFrame(), pd.DataFrame())).generate_pdf()
        assert pdf.startswith(b"%PDF")


class TestResultFiles:
    """Test reading a run directory and writing the report files."""

    def write_run(self, directory, results):
        results.summary.to_csv(directory / SUMMARY_FILE, index=False)
        results.mse_curves.to_csv(directory / MSE_CURVE_FILE, index=False)
        results.regret_curves.to_csv(directory / REGRET_CURVE_FILE, index=False)

    def test_load_results(self, tmp_path, results):
        self.write_run(tmp_path, results)
        loaded = load_results(tmp_path)
        assert list(loaded.summary.columns) == SUMMARY_COLUMNS
        assert len(loaded.mse_curves) == 12

    def test_missing_summary(self, tmp_path):
        with pytest.raises(TraceUnavailableError):
            load_results(tmp_path)

    def test_write_report(self, tmp_path, results):
        self.write_run(tmp_path, results)
        written = write_report(tmp_path)
        assert set(written) == {"markdown", "pdf", "mse_plot", "regret_plot", "violation_plot"}
        assert all(path.is_file() for path in written.values())
        assert written["pdf"].read_bytes().startswith(b"%PDF")


class TestPlots:
    """Test the Plotly figures."""

    def test_mse_plot_has_one_line_per_algorithm(self, results):
        fig = create_mse_plot(results.mse_curves, dataset="synthetic")
        assert [trace.name for trace in fig.data] == ["efl-fg", "fedboost-surrogate"]
        assert list(fig.data[0].y) == pytest.approx([0.6, 0.7, 0.8])
        assert fig.layout.yaxis.type == "log"

    def test_average_regret(self, results):
        fig = create_regret_plot(results.regret_curves, dataset="synthetic", average=True)
        assert list(fig.data[0].y) == pytest.approx([0.6, 0.35, 0.8 / 3])

    def test_violation_plot(self, results):
        fig = create_violation_plot(results.summary)
        bars = {trace.name: list(trace.y) for trace in fig.data}
        assert bars["fedboost-surrogate"] == pytest.approx([40.0])

    @pytest.mark.parametrize("factory", [create_mse_plot, create_regret_plot, create_violation_plot])
    def test_empty_input(self, factory):
        fig = factory(pd.DataFrame())
        assert isinstance(fig, go.Figure)
        assert len(fig.data) == 0
