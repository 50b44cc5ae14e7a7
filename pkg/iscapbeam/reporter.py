"""
Reporting system for iscapbeam.
Writes result tables as CSV and prints run summaries to the console.
"""

import logging
from pathlib import Path
from typing import Dict, List

import pandas as pd
from rich import box
from rich.console import Console
from rich.table import Table
from rich.text import Text

from .config import ExperimentSpec
from .runner import (DEGENERATE, INFEASIBLE, NUMERICAL_FAILURE, OPTIMAL, ExperimentResult,
                     emit_plot_data)

logger = logging.getLogger(__name__)

STATUS_COLORS = {
    OPTIMAL: 'green',
    INFEASIBLE: 'yellow',
    DEGENERATE: 'orange3',
    NUMERICAL_FAILURE: 'red',
}


class ReportGenerator:
    """Generates result files and console summaries for an experiment."""

    def __init__(self, spec: ExperimentSpec, console: Console = None):
        self.spec = spec
        self.console = console or Console()

    def save_report(self, result: ExperimentResult, directory: str = None) -> Dict[str, Path]:
        """Write every CSV of a run; returns name -> path."""
        out = Path(directory or self.spec.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        record_timing = self.spec.output.record_timing
        written = {}

        frame = result.frame(record_timing)
        written['results'] = self._write(frame, out / 'results.csv')
        written['timings'] = self._write(self._timings(result), out / 'timings.csv')
        written['plot_data'] = self._write(emit_plot_data(frame), out / 'plot_data.csv')
        written['beampattern'] = self._write(self._beampatterns(result), out / 'beampattern.csv')
        written['metrics'] = self._write(self._expand(result, 'metric_rows'), out / 'metrics.csv')

        traces = self._expand(result, 'trace_rows')
        if not record_timing and 'seconds' in traces:
            traces = traces.drop(columns=['seconds'])
        written['traces'] = self._write(traces, out / 'traces.csv')
        written['verification'] = self._write(self._expand(result, 'verification_rows'), out / 'verification.csv')
        logger.info("Wrote %d files to %s", len(written), out)
        return written

    @staticmethod
    def _write(frame: pd.DataFrame, path: Path) -> Path:
        frame.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
        return path

    @staticmethod
    def _timings(result: ExperimentResult) -> pd.DataFrame:
        rows = [{'axis_value': run.axis_value, 'seed': run.seed, 'method': run.method,
                 'status': run.status, 'seconds': run.seconds} for run in result.runs]
        return pd.DataFrame(rows, columns=['axis_value', 'seed', 'method', 'status', 'seconds'])

    @staticmethod
    def _expand(result: ExperimentResult, attribute: str) -> pd.DataFrame:
        rows: List[Dict] = []
        for run in result.runs:
            for entry in getattr(run, attribute):
                rows.append({'axis_value': run.axis_value, 'seed': run.seed, 'method': run.method, **entry})
        return pd.DataFrame(rows)

    @staticmethod
    def _beampatterns(result: ExperimentResult) -> pd.DataFrame:
        """Per-slot normalized gain against the desired band, first seed only."""
        rows = []
        for run in result.runs:
            if run.seed != result.first_seed or run.slot_gains is None:
                continue
            for slot, (gains, desired) in enumerate(zip(run.slot_gains, run.slot_desired)):
                for angle, gain, target in zip(run.grid_degrees, gains, desired):
                    rows.append({'axis_value': run.axis_value, 'method': run.method, 'slot': slot,
                                 'grid_angle_deg': round(float(angle), 9), 'gain': float(gain),
                                 'desired': float(target)})
        return pd.DataFrame(rows, columns=['axis_value', 'method', 'slot', 'grid_angle_deg', 'gain', 'desired'])

    def display_report(self, result: ExperimentResult):
        """Print the aggregated errors and status counts."""
        frame = result.frame()
        plot = emit_plot_data(frame)

        summary = Table(title="Normalized matching error", box=box.ROUNDED)
        summary.add_column(result.axis or 'point', style="cyan")
        summary.add_column("Method", style="bold")
        summary.add_column("Mean", style="green", justify="right")
        summary.add_column("Std", justify="right")
        summary.add_column("Optimal", justify="right")
        summary.add_column("Status")
        for row in plot.itertuples(index=False):
            mean = '-' if pd.isna(row.mean) else f"{row.mean:.4e}"
            std = '-' if pd.isna(row.std) else f"{row.std:.2e}"
            axis = '-' if pd.isna(row.axis_value) else f"{row.axis_value:g}"
            summary.add_row(axis, row.method, mean, std, f"{row.n_optimal}/{row.n_trials}", row.status)
        self.console.print(summary)

        counts = Table(title="Run status", box=box.ROUNDED)
        counts.add_column("Status", style="bold")
        counts.add_column("Count", style="yellow", justify="right")
        for status, color in STATUS_COLORS.items():
            counts.add_row(Text(status, style=f"bold {color}"), str(result.count(status)))
        self.console.print(counts)

    def display_plot_data(self, plot: pd.DataFrame, title: str = "Aggregated results"):
        table = Table(title=title, box=box.ROUNDED)
        for column in plot.columns:
            table.add_column(str(column))
        for row in plot.itertuples(index=False):
            table.add_row(*['-' if pd.isna(v) else (f"{v:.4g}" if isinstance(v, float) else str(v)) for v in row])
        self.console.print(table)
