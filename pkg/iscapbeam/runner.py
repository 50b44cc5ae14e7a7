"""
Experiment execution for iscapbeam.
Fans (sweep point, trial) pairs out to a worker pool and collects one row per method.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import baselines, metrics
from .config import ExperimentSpec
from .errors import (DegenerateChannelError, EstimationDegenerateError,
                     PreconditionError, RequirementsInfeasibleError, SolverFailureError)
from .joint_optimizer import IterationTrace, optimize
from .metrics import BeamformingSolution, PerformanceReport
from .rank1_extraction import VerificationReport, extract, verify_equivalence
from .scenario import ChannelSet, Scenario, build_scenario, generate_channels
from .sensing_eval import evaluate_sensing, make_targets

logger = logging.getLogger(__name__)

OPTIMAL = 'optimal'
INFEASIBLE = 'infeasible'
DEGENERATE = 'degenerate'
NUMERICAL_FAILURE = 'numerical_failure'

RESULT_COLUMNS = ['axis_value', 'seed', 'method', 'norm_error', 'min_rate', 'min_er_power', 'status', 'seconds']


@dataclass
class MethodRun:
    """Outcome of one method on one (sweep point, seed)."""
    axis_value: Optional[float]
    seed: int
    method: str
    status: str
    seconds: float = 0.0
    report: Optional[PerformanceReport] = None
    slot_gains: Optional[np.ndarray] = None
    slot_desired: Optional[np.ndarray] = None
    grid_degrees: Optional[np.ndarray] = None
    trace_rows: List[Dict] = field(default_factory=list)
    verification_rows: List[Dict] = field(default_factory=list)
    metric_rows: List[Dict] = field(default_factory=list)
    message: str = ''

    @property
    def sort_key(self) -> Tuple:
        axis = -np.inf if self.axis_value is None else self.axis_value
        return axis, self.seed, self.method

    def row(self, record_timing: bool = False) -> Dict:
        report = self.report
        return {
            'axis_value': self.axis_value,
            'seed': self.seed,
            'method': self.method,
            'norm_error': report.normalized_error if report is not None else None,
            'min_rate': report.min_rate if report is not None else None,
            'min_er_power': report.min_er_power if report is not None else None,
            'status': self.status,
            'seconds': round(self.seconds, 6) if record_timing else None,
        }


@dataclass
class ExperimentResult:
    """All method runs of an experiment in canonical order."""
    runs: List[MethodRun] = field(default_factory=list)
    axis: Optional[str] = None
    first_seed: int = 0

    def frame(self, record_timing: bool = False) -> pd.DataFrame:
        return pd.DataFrame([run.row(record_timing) for run in self.runs], columns=RESULT_COLUMNS)

    def count(self, status: str) -> int:
        return sum(1 for run in self.runs if run.status == status)

    @property
    def has_numerical_failure(self) -> bool:
        return self.count(NUMERICAL_FAILURE) > 0


def _solve(method: str, spec: ExperimentSpec, scenario: Scenario, channels: ChannelSet
           ) -> Tuple[PerformanceReport, Optional[BeamformingSolution], Optional[IterationTrace],
                      Optional[VerificationReport]]:
    requirements = spec.to_requirements()
    solver = spec.solver_settings()
    trace = verification = None
    if method in ('sca', 'fp'):
        relaxed, trace = optimize(spec.optimizer_settings(method), scenario, channels, requirements)
        solution = extract(relaxed, channels, scenario.config.tx_power)
        if spec.output.verify_extraction:
            verification = verify_equivalence(relaxed, solution, scenario, channels, requirements)
    elif method == 'zf':
        solution = baselines.zf_solve(scenario, channels, requirements, solver)
    elif method == 'round_robin':
        solution = baselines.round_robin_solve(scenario, channels, requirements, solver)
    elif method == 'sensing_only':
        solution = baselines.sensing_only_solve(scenario, channels, solver)
    elif method == 'time_switching':
        design = baselines.time_switch_solve(scenario, channels, requirements, solver,
                                             spec.optimizer.time_switching_iterations,
                                             spec.optimizer.convergence_rel_tol)
        return design.performance(), None, None, None
    else:
        raise PreconditionError(f"unknown method '{method}'")
    return metrics.evaluate(solution, scenario, channels), solution, trace, verification


def _metric_rows(report: PerformanceReport) -> List[Dict]:
    rows = [{'entity_type': 'ir', 'entity_id': k, 'metric': 'rate_bps_hz', 'value': r}
            for k, r in enumerate(report.per_ir_rate)]
    rows += [{'entity_type': 'er', 'entity_id': i, 'metric': 'harvested_w', 'value': p}
             for i, p in enumerate(report.per_er_power)]
    rows.append({'entity_type': 'design', 'entity_id': 0, 'metric': 'zeta', 'value': report.zeta})
    rows.append({'entity_type': 'design', 'entity_id': 0, 'metric': 'matching_error',
                 'value': report.matching_error})
    rows += [{'entity_type': 'design', 'entity_id': 0, 'metric': name, 'value': value}
             for name, value in sorted(report.extras.items())]
    return rows


def _sensing_rows(spec: ExperimentSpec, scenario: Scenario, solution: BeamformingSolution, seed: int) -> List[Dict]:
    s = spec.sensing
    targets = make_targets(scenario, s.targets_per_slot, seed, tuple(s.distance_range_m), tuple(s.speed_range_mps))
    estimate = evaluate_sensing(solution, scenario, targets, rng_seed=seed)
    rows = [{'entity_type': 'sensing', 'entity_id': 0, 'metric': 'angle_mse_rad2', 'value': estimate.mse},
            {'entity_type': 'sensing', 'entity_id': 0, 'metric': 'mismatch', 'value': float(estimate.mismatch)}]
    for row in estimate.rows():
        target = row.pop('target_id')
        rows += [{'entity_type': 'target', 'entity_id': target, 'metric': name, 'value': value}
                 for name, value in row.items()]
    return rows


def run_method(method: str, spec: ExperimentSpec, scenario: Scenario, channels: ChannelSet,
               axis_value: Optional[float], seed: int, sense: bool = False) -> MethodRun:
    """Solve, evaluate and optionally sense.

    Infeasibility, degenerate channels and solver failures become a status;
    a PreconditionError is a defect and propagates.
    """
    run = MethodRun(axis_value, seed, method, OPTIMAL)
    started = time.perf_counter()
    try:
        report, solution, trace, verification = _solve(method, spec, scenario, channels)
    except RequirementsInfeasibleError as e:
        run.status, run.message = INFEASIBLE, str(e)
    except DegenerateChannelError as e:
        run.status, run.message = DEGENERATE, str(e)
    except SolverFailureError as e:
        run.status, run.message = NUMERICAL_FAILURE, str(e)
        if getattr(e, 'trace', None) is not None:
            run.trace_rows = e.trace.rows()
    run.seconds = time.perf_counter() - started
    if run.status != OPTIMAL:
        logger.warning("%s (seed %d, axis %s): %s: %s", method, seed, axis_value, run.status, run.message)
        return run

    run.report = report
    run.metric_rows = _metric_rows(report)
    run.slot_gains = metrics.slot_gain_table(report, scenario)
    run.slot_desired = scenario.desired
    run.grid_degrees = scenario.grid.degrees
    if trace is not None:
        run.trace_rows = trace.rows()
    if verification is not None:
        run.verification_rows = verification.rows()
        if not verification.passed:
            run.status = NUMERICAL_FAILURE
            run.message = f"extraction checks failed: {', '.join(verification.failures)}"
    if sense and solution is not None:
        try:
            run.metric_rows += _sensing_rows(spec, scenario, solution, seed)
        except (EstimationDegenerateError, PreconditionError) as e:
            logger.warning("Sensing evaluation skipped for %s: %s", method, e)
    return run


def run_trial(spec: ExperimentSpec, axis_value: Optional[float], trial: int,
              methods: List[str], sense: bool = False) -> List[MethodRun]:
    """All methods on one channel realization; seed = base seed + trial."""
    seed = spec.scenario.seed + trial
    config = spec.to_scenario_config(seed=seed)
    scenario = build_scenario(config, spec.to_geometry(), spec.centers(), spec.width())
    channels = generate_channels(config, scenario.geometry)
    logger.info("Trial seed %d at %s=%s", seed, spec.sweep.axis or 'point', axis_value)
    runs = []
    for method in methods:
        try:
            runs.append(run_method(method, spec, scenario, channels, axis_value, seed, sense))
        except PreconditionError:
            # A broken contract inside a solver is a defect, not a solver outcome.
            logger.error("%s violated a precondition on seed %d at %s=%s", method, seed,
                         spec.sweep.axis or 'point', axis_value)
            raise
    return runs


def run_experiment(spec: ExperimentSpec, methods: Optional[List[str]] = None,
                   workers: Optional[int] = None, sense: Optional[bool] = None) -> ExperimentResult:
    """Every (sweep value, trial, method) combination, rows in canonical order."""
    methods = list(methods or spec.methods)
    workers = workers or spec.output.workers
    sense = spec.sensing.enabled if sense is None else sense
    tasks = [(spec.at_point(value), value, trial)
             for value in spec.sweep_points() for trial in range(spec.sweep.trials)]
    logger.info("Running %d trials x %d methods with %d worker(s)", len(tasks), len(methods), workers)

    runs: List[MethodRun] = []
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(run_trial, point, value, trial, methods, sense)
                       for point, value, trial in tasks]
            for future in futures:
                runs.extend(future.result())
    else:
        for point, value, trial in tasks:
            runs.extend(run_trial(point, value, trial, methods, sense))

    runs.sort(key=lambda run: run.sort_key)
    return ExperimentResult(runs, spec.sweep.axis, spec.scenario.seed)


def emit_plot_data(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and seed spread of the normalized error per (axis value, method)."""
    columns = ['axis_value', 'method', 'mean', 'std', 'min', 'max', 'n_optimal', 'n_trials', 'status']
    if results.empty:
        logger.warning("No results to aggregate; plot data is empty")
        return pd.DataFrame(columns=columns)

    rows = []
    for (axis_value, method), group in results.groupby(['axis_value', 'method'], dropna=False, sort=True):
        ok = group.loc[group['status'] == OPTIMAL, 'norm_error'].dropna().astype(float)
        if ok.empty:
            status = 'no_feasible'
        elif len(ok) < len(group):
            status = 'partial'
        else:
            status = 'ok'
        rows.append({
            'axis_value': axis_value,
            'method': method,
            'mean': ok.mean() if not ok.empty else None,
            'std': ok.std(ddof=1) if len(ok) > 1 else (0.0 if len(ok) == 1 else None),
            'min': ok.min() if not ok.empty else None,
            'max': ok.max() if not ok.empty else None,
            'n_optimal': int(len(ok)),
            'n_trials': int(len(group)),
            'status': status,
        })
    return pd.DataFrame(rows, columns=columns)
