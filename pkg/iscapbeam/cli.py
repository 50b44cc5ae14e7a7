"""
Command-line interface for iscapbeam.
Runs experiment specs, writes a default spec and re-aggregates saved results.
"""

import logging
import os
import sys
from pathlib import Path
from typing import Optional

import click
import pandas as pd
from rich.console import Console
from rich.logging import RichHandler

from . import __version__
from .config import METHODS, ConfigManager, ExperimentSpec, unit_summary
from .errors import ConfigError, PreconditionError
from .reporter import ReportGenerator
from .runner import emit_plot_data, run_experiment

EXIT_CONFIG_ERROR = 2
EXIT_SOLVER_FAILURE = 3
EXIT_INTERNAL_ERROR = 1

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(message)s',
        datefmt='[%X]',
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=True, show_path=verbose)],
        force=True,
    )
    # cvxpy is chatty at DEBUG.
    logging.getLogger('cvxpy').setLevel(logging.WARNING)


@click.group()
@click.version_option(version=__version__)
def cli():
    """iscapbeam - joint sensing, communication and powering beamforming for OFDM."""
    pass


@cli.command()
@click.argument('spec_file', type=click.Path())
@click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
@click.option('--workers', '-w', type=int, help='Worker processes for the trials')
@click.option('--methods', '-m', help='Comma-separated methods, e.g. sca,zf,round_robin')
@click.option('--sense', is_flag=True, help='Run the sensing evaluation on every design')
@click.option('--verbose', '-v', is_flag=True, help='Verbose output')
def run(spec_file: str, out: Optional[str], workers: Optional[int], methods: Optional[str],
        sense: bool, verbose: bool):
    """Run every method of SPEC_FILE over its sweep and write the result tables."""
    config_manager = ConfigManager(spec_file)
    try:
        spec = config_manager.load_config()
    except ConfigError as e:
        click.echo(f"Error loading spec: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)

    setup_logging(verbose or spec.output.verbose)

    # Override spec with CLI options
    if out:
        spec.output.directory = out
    if workers:
        if workers < 1:
            click.echo("Error: --workers must be at least 1", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        spec.output.workers = workers
    if methods:
        chosen = [m.strip().lower() for m in methods.split(',') if m.strip()]
        unknown = [m for m in chosen if m not in METHODS]
        if unknown or not chosen:
            click.echo(f"Error: unknown methods {unknown}. Valid methods: {list(METHODS)}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        spec.methods = chosen
    if sense:
        spec.sensing.enabled = True

    for name, value in unit_summary(spec):
        logger.debug("%s = %s", name, value)
    click.echo(f"Running {spec_file}: methods {', '.join(spec.methods)}")

    try:
        result = run_experiment(spec)
    except PreconditionError as e:
        click.echo(f"Internal error: {e}", err=True)
        sys.exit(EXIT_INTERNAL_ERROR)
    reporter = ReportGenerator(spec)
    reporter.display_report(result)
    written = reporter.save_report(result)
    click.echo(f"Results written to {written['results'].parent}")

    if result.has_numerical_failure:
        click.echo("Some solves ended in numerical failure", err=True)
        sys.exit(EXIT_SOLVER_FAILURE)


@cli.command()
@click.argument('spec_file', type=click.Path(), default='experiment.yaml')
@click.option('--force', is_flag=True, help='Overwrite an existing file')
def init(spec_file: str, force: bool):
    """Write the desk-scale default spec to SPEC_FILE."""
    if os.path.exists(spec_file) and not force:
        if not click.confirm(f"Spec file {spec_file} already exists. Overwrite?"):
            click.echo("Spec initialization cancelled.")
            return

    config_manager = ConfigManager(spec_file)
    try:
        config_manager.save_config(ExperimentSpec())
    except ConfigError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    click.echo(f"Spec saved to {spec_file}")
    click.echo(f"You can now run 'iscapbeam run {spec_file}'")


@cli.command()
@click.argument('results_csv', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', '-o', type=click.Path(dir_okay=False), help='Plot-data CSV path')
def aggregate(results_csv: str, out: Optional[str]):
    """Recompute plot data from an existing results CSV."""
    setup_logging()
    try:
        frame = pd.read_csv(results_csv)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        click.echo(f"Error reading {results_csv}: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    missing = {'axis_value', 'method', 'norm_error', 'status'} - set(frame.columns)
    if missing:
        click.echo(f"Error: {results_csv} lacks columns {sorted(missing)}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)

    plot = emit_plot_data(frame)
    target = Path(out) if out else Path(results_csv).with_name('plot_data.csv')
    plot.to_csv(target, index=False, encoding='utf-8', lineterminator='\n')
    ReportGenerator(ExperimentSpec()).display_plot_data(plot)
    click.echo(f"Plot data written to {target}")


if __name__ == '__main__':
    cli()
