"""
Joint sensing/communication/powering beamforming for iscapbeam.
Solves the relaxed covariance problem by successive convex approximation (SCA)
or by fractional programming (FP).
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import cvxpy as cp
import numpy as np

from . import metrics
from .baselines import equal_power_zf, round_robin_solve, zf_solve
from .conic import ConicProgram, SolverSettings, solve
from .errors import PreconditionError, RequirementsInfeasibleError, SolverFailureError
from .formulation import BlockLayout, JointModel, Requirements, check_rate_screen
from .metrics import BeamformingSolution
from .scenario import ChannelSet, Scenario, SlotSchedule

logger = logging.getLogger(__name__)

METHODS = ('sca', 'fp')
INITIAL_POINTS = ('zf', 'round_robin', 'uniform_isotropic')

CONVERGED = 'converged'
MAX_ITERATIONS = 'max_iterations'
SUBPROBLEM_FAILURE = 'subproblem_failure'


@dataclass
class OptimizerSettings:
    """Iteration control for the joint optimizer."""
    method: str = 'sca'
    max_iterations: int = 50
    convergence_rel_tol: float = 1e-3
    initial_point_source: str = 'zf'
    slot_collapse: bool = True
    feasibility_max_iterations: int = 30
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise PreconditionError(f"method must be one of {METHODS}, got {self.method}")
        if self.initial_point_source not in INITIAL_POINTS:
            raise PreconditionError(
                f"initial point source must be one of {INITIAL_POINTS}, got {self.initial_point_source}")
        if self.max_iterations < 1:
            raise PreconditionError("max_iterations must be at least 1")
        if self.convergence_rel_tol <= 0:
            raise PreconditionError("convergence_rel_tol must be positive")

    def layout(self, scenario: Scenario) -> BlockLayout:
        if self.slot_collapse:
            return BlockLayout.per_slot(scenario.schedule)
        return BlockLayout.per_symbol(scenario.config.n_symbols)


@dataclass
class IterationTrace:
    """Objective and wall time per iteration plus why the loop stopped."""
    objectives: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    termination_reason: str = ''
    feasibility_iterations: int = 0

    def append(self, objective: float, seconds: float):
        self.objectives.append(float(objective))
        self.seconds.append(float(seconds))

    @property
    def iterations(self) -> int:
        return len(self.objectives)

    def is_monotone(self, slack: float = 1e-7) -> bool:
        return all(b <= a + slack for a, b in zip(self.objectives, self.objectives[1:]))

    def rows(self) -> List[Dict]:
        return [{'iteration': j + 1, 'objective': e, 'seconds': s}
                for j, (e, s) in enumerate(zip(self.objectives, self.seconds))]


@dataclass
class FpAuxiliaries:
    """alpha and beta per (subcarrier, symbol, IR)."""
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name in ('alpha', 'beta'):
            value = np.asarray(getattr(self, name), dtype=float)
            if np.any(value < 0) or not np.all(np.isfinite(value)):
                raise PreconditionError(f"{name} must be finite and non-negative")
            setattr(self, name, value)


@dataclass
class Subproblem:
    """A built convex subproblem together with its covariance model."""
    program: ConicProgram
    model: JointModel
    slack: Optional[cp.Variable] = None


def uniform_isotropic(scenario: Scenario, n_ir: int) -> BeamformingSolution:
    config = scenario.config
    covariances = np.zeros((config.n_subcarriers, config.n_symbols, n_ir + 1, config.n_tx, config.n_tx),
                           dtype=complex)
    covariances[:, :, 0] = config.tx_power / (config.n_subcarriers * config.n_tx) * np.eye(config.n_tx)
    return BeamformingSolution(covariances)


def initial_point(settings: OptimizerSettings, scenario: Scenario, channels: ChannelSet,
                  requirements: Optional[Requirements] = None) -> BeamformingSolution:
    """Power-feasible starting covariances from the configured source."""
    requirements = requirements or Requirements.from_config(scenario.config)
    source = settings.initial_point_source
    if source == 'uniform_isotropic':
        return uniform_isotropic(scenario, channels.n_ir)
    if source == 'zf':
        try:
            return zf_solve(scenario, channels, requirements, settings.solver)
        except RequirementsInfeasibleError:
            logger.warning("ZF cannot meet the requirements; starting from equal-power ZF")
            return equal_power_zf(scenario, channels)
    try:
        return round_robin_solve(scenario, channels, requirements, settings.solver)
    except RequirementsInfeasibleError:
        logger.warning("Round robin cannot meet the requirements; starting from its unconstrained design")
        return round_robin_solve(scenario, channels, Requirements(), settings.solver)


def project_to_layout(solution: BeamformingSolution, layout: BlockLayout) -> BeamformingSolution:
    return BeamformingSolution(layout.expand(layout.average(solution.covariances)), solution.zeta)


def symmetrize_over_slot(solution: BeamformingSolution, schedule: SlotSchedule) -> BeamformingSolution:
    """Replace every covariance by its average over the symbols of its slot."""
    return project_to_layout(solution, BlockLayout.per_slot(schedule))


def _base_model(name: str, scenario: Scenario, channels: ChannelSet, requirements: Requirements,
                layout: BlockLayout, solver: SolverSettings) -> JointModel:
    model = JointModel(ConicProgram(name, solver.log_policy), scenario, channels, layout)
    model.add_power_equality()
    model.add_energy_constraints(requirements.power)
    return model


def sca_build_subproblem(scenario: Scenario, channels: ChannelSet, requirements: Requirements,
                         local_point: BeamformingSolution, layout: Optional[BlockLayout] = None,
                         solver: Optional[SolverSettings] = None, feasibility: bool = False) -> Subproblem:
    """Matching-error program with rate constraints linearized at ``local_point``.

    With ``feasibility`` the objective instead maximizes a common, capped rate slack.
    """
    solver = solver or SolverSettings()
    layout = layout or BlockLayout.per_slot(scenario.schedule)
    model = _base_model('sca_feasibility' if feasibility else 'sca', scenario, channels,
                        requirements, layout, solver)
    slack = None
    target = requirements.rate
    if feasibility:
        slack = model.program.scalar('s')
        model.program.inequality(0.1 * requirements.rate + 1e-3, slack, 'slack_cap')
        model.program.add_linear(-slack)
        target = requirements.rate + slack
    else:
        model.add_matching_objective()
    if requirements.rate > 0:
        signal, total = model.local_powers(local_point)
        model.add_linearized_rates(signal, total, target)
    return Subproblem(model.program, model, slack)


def fp_update_alpha(solution: BeamformingSolution, channels: ChannelSet, noise_power: float) -> np.ndarray:
    """Optimal Lagrangian-dual auxiliaries: the SINR of every (n, l, IR)."""
    return metrics.sinr_table(solution, channels, noise_power)


def fp_update_beta(solution: BeamformingSolution, channels: ChannelSet, alpha: np.ndarray,
                   noise_power: float) -> np.ndarray:
    """Optimal quadratic-transform auxiliaries sqrt(1 + alpha) sqrt(S) / (T + sigma^2)."""
    powers = metrics.received_powers(solution, channels.ir_channels)
    signal = np.stack([powers[:, :, k + 1, k] for k in range(channels.n_ir)], axis=-1)
    total = powers.sum(axis=2)
    return np.sqrt(1.0 + alpha) * np.sqrt(signal) / (total + noise_power)


def fp_objective_terms(alpha: np.ndarray, beta: np.ndarray, signal: np.ndarray, total: np.ndarray,
                       noise_power: float) -> np.ndarray:
    """Quadratic-transform rate surrogate in nats per cell."""
    return (np.log1p(alpha) - alpha + 2.0 * np.sqrt(1.0 + alpha) * beta * np.sqrt(signal)
            - beta ** 2 * (total + noise_power))


def fp_build_subproblem(scenario: Scenario, channels: ChannelSet, requirements: Requirements,
                        alpha: np.ndarray, beta: np.ndarray, layout: Optional[BlockLayout] = None,
                        solver: Optional[SolverSettings] = None) -> Subproblem:
    """Matching-error program with the quadratic-transform rate constraints for fixed alpha, beta.

    sqrt(S) enters through an epigraph t with t^2 <= S written as ||(2t, S - 1)|| <= S + 1.
    """
    solver = solver or SolverSettings()
    config = scenario.config
    layout = layout or BlockLayout.per_slot(scenario.schedule)
    model = _base_model('fp', scenario, channels, requirements, layout, solver)
    model.add_matching_objective()
    if requirements.rate <= 0:
        return Subproblem(model.program, model)
    representatives = list(layout.representatives())
    alpha_b = np.asarray(alpha, dtype=float)[:, representatives]
    beta_b = np.asarray(beta, dtype=float)[:, representatives] * np.sqrt(config.noise_power_comm)
    weights = layout.weights
    scale = config.n_symbols * channels.n_subcarriers * np.log(2.0)
    program = model.program
    roots = program.scalar('t', size=alpha_b.size)
    for k in range(channels.n_ir):
        terms = []
        for n in range(channels.n_subcarriers):
            for b in range(layout.n_blocks):
                a, bt = float(alpha_b[n, b, k]), float(beta_b[n, b, k])
                total = model.total(n, b, k)
                term = float(np.log1p(a)) - a - bt ** 2 * (total + 1.0)
                if bt > 0:
                    signal = model.signal(n, b, k)
                    root = roots[np.ravel_multi_index((n, b, k), alpha_b.shape)]
                    program.soc(signal + 1.0, cp.hstack([2.0 * root, signal - 1.0]), f"root_{n}_{b}_{k}")
                    term = term + 2.0 * float(np.sqrt(1.0 + a)) * bt * root
                terms.append(float(weights[b]) * term)
        program.inequality(sum(terms), scale * requirements.rate, f"rate_{k}")
    return Subproblem(program, model)


def _min_rate(solution: BeamformingSolution, scenario: Scenario, channels: ChannelSet) -> float:
    return float(np.min(metrics.average_rates(solution, channels, scenario.config.noise_power_comm)))


def _feasibility_phase(settings: OptimizerSettings, scenario: Scenario, channels: ChannelSet,
                       requirements: Requirements, layout: BlockLayout,
                       point: BeamformingSolution, trace: IterationTrace) -> BeamformingSolution:
    """Raise the linearized rate slack until the rate requirement holds at the iterate."""
    previous = -np.inf
    rate = _min_rate(point, scenario, channels)
    for iteration in range(1, settings.feasibility_max_iterations + 1):
        sub = sca_build_subproblem(scenario, channels, requirements, point, layout,
                                   settings.solver, feasibility=True)
        result = solve(sub.program, settings.solver)
        trace.feasibility_iterations = iteration
        if result.status == 'infeasible':
            raise RequirementsInfeasibleError("power or harvested-energy requirements cannot be met")
        if not result.optimal:
            raise SolverFailureError(f"feasibility subproblem returned {result.status}",
                                     result=result, trace=trace)
        point = sub.model.assemble(result)
        slack = float(sub.slack.value)
        rate = _min_rate(point, scenario, channels)
        logger.debug("feasibility iteration %d: slack %.3e, min rate %.6f", iteration, slack, rate)
        if rate >= requirements.rate:
            return point
        if slack <= previous + 1e-7:
            break
        previous = slack
    raise RequirementsInfeasibleError(
        f"rate requirement {requirements.rate:.4g} bps/Hz not reached; best minimum rate {rate:.4g}")


def optimize(settings: OptimizerSettings, scenario: Scenario, channels: ChannelSet,
             requirements: Optional[Requirements] = None):
    """Iterate subproblems until the relative objective change drops below tolerance.

    Returns the relaxed solution and its IterationTrace.
    """
    requirements = requirements or Requirements.from_config(scenario.config)
    check_rate_screen(scenario, channels, requirements)
    layout = settings.layout(scenario)
    noise = scenario.config.noise_power_comm
    trace = IterationTrace()

    point = project_to_layout(initial_point(settings, scenario, channels, requirements), layout)
    if requirements.rate > 0 and _min_rate(point, scenario, channels) < requirements.rate:
        logger.info("Initial point misses the rate requirement; running the feasibility phase")
        point = _feasibility_phase(settings, scenario, channels, requirements, layout, point, trace)

    for iteration in range(1, settings.max_iterations + 1):
        started = time.perf_counter()
        if settings.method == 'sca':
            sub = sca_build_subproblem(scenario, channels, requirements, point, layout, settings.solver)
        else:
            alpha = fp_update_alpha(point, channels, noise)
            aux = FpAuxiliaries(alpha, fp_update_beta(point, channels, alpha, noise))
            sub = fp_build_subproblem(scenario, channels, requirements, aux.alpha, aux.beta,
                                      layout, settings.solver)
        result = solve(sub.program, settings.solver)
        if not result.optimal:
            trace.termination_reason = SUBPROBLEM_FAILURE
            if iteration == 1 and result.status == 'infeasible':
                raise RequirementsInfeasibleError("first subproblem is infeasible")
            raise SolverFailureError(f"{settings.method} subproblem {iteration} returned {result.status}",
                                     result=result, trace=trace)
        point = sub.model.assemble(result)
        objective = sub.model.matching_error(result)
        trace.append(objective, time.perf_counter() - started)
        logger.debug("%s iteration %d: objective %.6e", settings.method, iteration, objective)
        if iteration > 1:
            previous = trace.objectives[-2]
            if abs(previous - objective) / max(previous, 1e-12) < settings.convergence_rel_tol:
                trace.termination_reason = CONVERGED
                break
    else:
        trace.termination_reason = MAX_ITERATIONS
    logger.info("%s finished after %d iterations (%s)", settings.method.upper(), trace.iterations,
                trace.termination_reason)
    return point, trace
