"""Report generation for finished experiment runs."""
import io
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, NamedTuple, Union

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import cm
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from src.exceptions import TraceUnavailableError
from src.plots import create_mse_plot, create_regret_plot, create_violation_plot
from src.runner import MSE_CURVE_FILE, REGRET_CURVE_FILE, SUMMARY_FILE

logger = logging.getLogger(__name__)

TABLE_STYLE = [
    ("BACKGROUND", (0, 0), (-1, 0), colors.grey),
    ("TEXTCOLOR", (0, 0), (-1, 0), colors.whitesmoke),
    ("ALIGN", (0, 0), (-1, -1), "CENTER"),
    ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
    ("FONTSIZE", (0, 0), (-1, 0), 10),
    ("BOTTOMPADDING", (0, 0), (-1, 0), 12),
    ("BACKGROUND", (0, 1), (-1, -1), colors.beige),
    ("GRID", (0, 0), (-1, -1), 1, colors.black),
]


class RunResults(NamedTuple):
    summary: pd.DataFrame
    mse_curves: pd.DataFrame
    regret_curves: pd.DataFrame


def load_results(output_dir: Union[str, Path]) -> RunResults:
    """Read summary.csv and the tidy curve files of a finished run."""
    output_dir = Path(output_dir)
    summary_path = output_dir / SUMMARY_FILE
    if not summary_path.is_file():
        raise TraceUnavailableError(f"{summary_path} not found; run an experiment first")
    mse_path = output_dir / MSE_CURVE_FILE
    regret_path = output_dir / REGRET_CURVE_FILE
    return RunResults(
        summary=pd.read_csv(summary_path),
        mse_curves=pd.read_csv(mse_path) if mse_path.is_file() else pd.DataFrame(),
        regret_curves=pd.read_csv(regret_path) if regret_path.is_file() else pd.DataFrame(),
    )


def comparison_table(summary: pd.DataFrame) -> pd.DataFrame:
    """Final MSE and budget violation per algorithm and dataset, averaged over seeds."""
    grouped = summary.groupby(["algorithm", "dataset"], sort=False)
    table = grouped.agg(
        final_mse=("final_mse", "mean"),
        final_mse_std=("final_mse", "std"),
        violation_pct=("budget_violation_rate", lambda rates: 100.0 * rates.mean()),
        seeds=("seed", "count"),
    ).reset_index()
    table["final_mse_std"] = table["final_mse_std"].fillna(0.0)
    return table


class ReportGenerator:
    """Generate PDF reports comparing the learners of one run."""

    def __init__(self, results: RunResults):
        self.results = results
        self.table = comparison_table(results.summary)
        self.styles = getSampleStyleSheet()
        self._setup_custom_styles()

    def _setup_custom_styles(self):
        self.styles.add(ParagraphStyle(
            name="CustomTitle",
            parent=self.styles["Heading1"],
            fontSize=22,
            textColor=colors.HexColor("#1f77b4"),
            spaceAfter=30,
            alignment=TA_CENTER,
        ))
        self.styles.add(ParagraphStyle(
            name="CustomHeading",
            parent=self.styles["Heading2"],
            fontSize=14,
            textColor=colors.HexColor("#1f77b4"),
            spaceAfter=12,
        ))

    def generate_pdf(self) -> bytes:
        """Generate the PDF report and return it as bytes."""
        buffer = io.BytesIO()
        doc = SimpleDocTemplate(buffer, pagesize=A4)
        story = [
            Paragraph("Budget-Constrained Ensemble Learning Report", self.styles["CustomTitle"]),
            Paragraph(f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M')}", self.styles["Normal"]),
            Spacer(1, 20),
            Paragraph("1. Comparison", self.styles["CustomHeading"]),
            self._create_comparison_table(),
            Spacer(1, 20),
            Paragraph("2. Regret", self.styles["CustomHeading"]),
            *self._create_regret_section(),
        ]
        doc.build(story)
        buffer.seek(0)
        return buffer.getvalue()

    def _create_comparison_table(self) -> Table:
        data = [["Algorithm", "Dataset", "Final MSE", "Budget violation", "Seeds"]]
        for row in self.table.itertuples(index=False):
            data.append([
                row.algorithm,
                row.dataset,
                f"{row.final_mse:.3e} ± {row.final_mse_std:.1e}",
                f"{row.violation_pct:.2f}%",
                str(row.seeds),
            ])
        table = Table(data, colWidths=[4 * cm, 3.5 * cm, 4.5 * cm, 3.5 * cm, 1.5 * cm])
        table.setStyle(TableStyle(TABLE_STYLE))
        return table

    def _create_regret_section(self):
        summary = self.results.summary
        if "regret_T" not in summary or summary["regret_T"].isna().all():
            return [Paragraph("The oracle channel was off; regret was not recorded.", self.styles["Normal"])]
        data = [["Algorithm", "Dataset", "Seed", "Regret at T", "Bound", "Best model"]]
        for row in summary.itertuples(index=False):
            bound = "" if pd.isna(row.regret_bound) else f"{row.regret_bound:.4g}"
            best = "" if pd.isna(row.best_model) else str(int(row.best_model))
            data.append([row.algorithm, row.dataset, str(row.seed), f"{row.regret_T:.4g}", bound, best])
        table = Table(data, colWidths=[4 * cm, 3 * cm, 1.5 * cm, 3 * cm, 3 * cm, 2.5 * cm])
        table.setStyle(TableStyle(TABLE_STYLE))
        return [table]


def generate_markdown_report(results: RunResults) -> str:
    """Markdown version of the comparison, shaped like a results table."""
    table = comparison_table(results.summary)
    report = f"""# Budget-Constrained Ensemble Learning Report

Generated: {datetime.now().strftime('%Y-%m-%d %H:%M')}

## 1. Comparison

| Algorithm | Dataset | Final MSE | Budget violation | Seeds |
|---|---|---|---|---|
"""
    for row in table.itertuples(index=False):
        report += (
            f"| {row.algorithm} | {row.dataset} | {row.final_mse:.3e} ± {row.final_mse_std:.1e} "
            f"| {row.violation_pct:.2f}% | {row.seeds} |\n"
        )

    summary = results.summary
    if "regret_T" in summary and not summary["regret_T"].isna().all():
        report += "\n## 2. Regret at the horizon\n\n"
        report += "| Algorithm | Dataset | Seed | R_T | Bound |\n|---|---|---|---|---|\n"
        for row in summary.itertuples(index=False):
            bound = "" if pd.isna(row.regret_bound) else f"{row.regret_bound:.4g}"
            report += f"| {row.algorithm} | {row.dataset} | {row.seed} | {row.regret_T:.4g} | {bound} |\n"

    report += "\n---\n*Generated by efl-fg*\n"
    return report


def write_report(output_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write report.md, report.pdf and HTML figures next to the run outputs."""
    output_dir = Path(output_dir)
    results = load_results(output_dir)
    written = {
        "markdown": output_dir / "report.md",
        "pdf": output_dir / "report.pdf",
        "mse_plot": output_dir / "mse_curve.html",
        "regret_plot": output_dir / "regret_curve.html",
        "violation_plot": output_dir / "budget_violation.html",
    }
    written["markdown"].write_text(generate_markdown_report(results))
    written["pdf"].write_bytes(ReportGenerator(results).generate_pdf())
    create_mse_plot(results.mse_curves).write_html(written["mse_plot"], include_plotlyjs="cdn")
    create_regret_plot(results.regret_curves, average=True).write_html(written["regret_plot"], include_plotlyjs="cdn")
    create_violation_plot(results.summary).write_html(written["violation_plot"], include_plotlyjs="cdn")
    logger.info("Wrote report files to %s", output_dir)
    return written
