"""
Heuristic benchmark designs for iscapbeam.
Zero forcing with power allocation, round-robin IR scheduling and three-phase time switching.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import cvxpy as cp
import numpy as np
from scipy.linalg import null_space

from . import metrics
from .conic import ConicProgram, SolveResult, SolverSettings, hermitian_inner, solve
from .errors import (DegenerateChannelError, DegenerateNullSpaceError, PreconditionError,
                     RequirementsInfeasibleError, SolverFailureError)
from .formulation import BlockLayout, JointModel, Requirements, check_rate_screen
from .metrics import BeamformingSolution, PerformanceReport
from .rank1_extraction import extract
from .scenario import ChannelSet, Scenario

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10
# Normalized objective weight on tr(W_0) in the round-robin re-solve.
SENSING_TRACE_PENALTY = 1e-7


def _check_status(result: SolveResult, what: str):
    if result.status == 'infeasible':
        raise RequirementsInfeasibleError(f"{what}: requirements cannot be met")
    if not result.optimal:
        raise SolverFailureError(f"{what}: solver returned {result.status}", result=result)


@dataclass(frozen=True)
class ZfBasis:
    """Per-subcarrier zero-forcing directions and the null space of the IR channels."""
    directions: np.ndarray
    null_bases: np.ndarray
    lambdas: np.ndarray

    @property
    def null_dim(self) -> int:
        return self.null_bases.shape[-1]

    def deltas(self, steering: np.ndarray) -> np.ndarray:
        """|v_m^T w~_{n,k}|^2, shape (N, K_IR, M)."""
        return np.abs(np.einsum('mi,nki->nkm', steering, self.directions)) ** 2

    def rhos(self, er_channels: np.ndarray) -> np.ndarray:
        """|g_{n,i}^H w~_{n,k}|^2, shape (N, K_ER, K_IR)."""
        return np.abs(np.einsum('nui,nki->nuk', np.conj(er_channels), self.directions)) ** 2

    def project(self, vectors: np.ndarray) -> np.ndarray:
        """U_{n,0}^T x for per-subcarrier vectors (N, ..., N_t)."""
        return np.einsum('nid,n...i->n...d', self.null_bases, vectors)


def zf_build_basis(channels: ChannelSet) -> ZfBasis:
    """Pseudo-inverse directions H (H^H H)^-1 and an orthonormal null space of H^H."""
    n_tx, n_ir = channels.n_tx, channels.n_ir
    if n_ir >= n_tx:
        raise DegenerateNullSpaceError(f"zero forcing needs K_IR ({n_ir}) < N_t ({n_tx})")
    directions, bases, lambdas = [], [], []
    for n in range(channels.n_subcarriers):
        stacked = channels.ir_channels[n].T
        singular = np.linalg.svd(stacked, compute_uv=False)
        if singular[-1] <= RANK_TOLERANCE * singular[0]:
            raise DegenerateChannelError(f"IR channel matrix on subcarrier {n} is rank deficient")
        pseudo = stacked @ np.linalg.inv(stacked.conj().T @ stacked)
        unit = pseudo / np.linalg.norm(pseudo, axis=0, keepdims=True)
        directions.append(unit.T)
        lambdas.append(np.abs(np.sum(np.conj(stacked) * unit, axis=0)))
        basis = null_space(stacked.conj().T)
        if basis.shape[1] != n_tx - n_ir:
            raise DegenerateChannelError(f"null space on subcarrier {n} has dimension {basis.shape[1]}")
        bases.append(basis)
    return ZfBasis(np.array(directions), np.array(bases), np.array(lambdas))


def zf_solve(scenario: Scenario, channels: ChannelSet, requirements: Requirements,
             solver: Optional[SolverSettings] = None,
             layout: Optional[BlockLayout] = None) -> BeamformingSolution:
    """One conic solve over ZF beam powers and null-space sensing covariances."""
    solver = solver or SolverSettings()
    config = scenario.config
    check_rate_screen(scenario, channels, requirements)
    basis = zf_build_basis(channels)
    layout = layout or BlockLayout.per_slot(scenario.schedule)
    n_sc, n_ir, n_blocks = channels.n_subcarriers, channels.n_ir, layout.n_blocks
    weights = layout.weights

    program = ConicProgram('zero_forcing', solver.log_policy)
    powers = program.scalar('p', size=n_sc * n_blocks * n_ir, nonneg=True)
    zeta = program.scalar('zeta', nonneg=True)
    sensing = {(n, b): program.hermitian(f"P_{n}_{b}", basis.null_dim)
               for n in range(n_sc) for b in range(n_blocks)}

    def p(n: int, b: int, k: int):
        return powers[(b * n_sc + n) * n_ir + k]

    def block_powers(b: int):
        return powers[b * n_sc * n_ir:(b + 1) * n_sc * n_ir]

    steering = scenario.steering()
    deltas = basis.deltas(steering).reshape(n_sc * n_ir, -1).T
    projected_steering = basis.project(np.broadcast_to(steering, (n_sc,) + steering.shape))
    sensing_coefficients = np.einsum('nmi,nmj->nmij', np.conj(projected_steering), projected_steering)
    desired = scenario.desired_per_symbol()
    for b, block in enumerate(layout.blocks):
        gains = deltas @ block_powers(b) + sum(
            hermitian_inner([sensing[n, b]], sensing_coefficients[n]) for n in range(n_sc))
        program.add_squares(gains - zeta * desired[block[0]], weight=len(block))
        program.equality(cp.sum(block_powers(b))
                         + sum(sensing[n, b].trace() for n in range(n_sc)), 1.0, f"power_{b}")

    if requirements.rate > 0:
        snr = basis.lambdas ** 2 * config.tx_power / config.noise_power_comm
        scale = config.n_symbols * n_sc * np.log(2.0)
        for k in range(n_ir):
            coefficients = [weights[b] for n in range(n_sc) for b in range(n_blocks)]
            arguments = [1.0 + float(snr[n, k]) * p(n, b, k) for n in range(n_sc) for b in range(n_blocks)]
            program.log_bound(coefficients, arguments, scale * requirements.rate, f"rate_{k}")

    if requirements.power > 0:
        rhos = basis.rhos(channels.er_channels)
        projected_er = np.conj(basis.project(np.conj(channels.er_channels)))
        er_coefficients = np.einsum('nui,nuj->nuij', projected_er, np.conj(projected_er))
        for i in range(channels.n_er):
            terms = [float(weights[b]) * (sum(float(rhos[n, i, k]) * p(n, b, k) for k in range(n_ir))
                                   + hermitian_inner([sensing[n, b]], er_coefficients[n, i:i + 1])[0])
                     for n in range(n_sc) for b in range(n_blocks)]
            harvested = config.tx_power / config.n_symbols * sum(terms)
            program.inequality(harvested / requirements.power, 1.0, f"energy_{i}")

    result = solve(program, solver)
    _check_status(result, 'zero forcing')

    covariances = np.zeros((n_sc, n_blocks, n_ir + 1, config.n_tx, config.n_tx), dtype=complex)
    beam_outer = np.einsum('nki,nkj->nkij', basis.directions, np.conj(basis.directions))
    power_values = np.clip(np.asarray(powers.value), 0.0, None).reshape(n_blocks, n_sc, n_ir).transpose(1, 0, 2)
    for n in range(n_sc):
        for b in range(n_blocks):
            covariances[n, b, 1:] = config.tx_power * power_values[n, b, :, None, None] * beam_outer[n]
            inner = sensing[n, b].value
            covariances[n, b, 0] = config.tx_power * basis.null_bases[n] @ inner @ basis.null_bases[n].conj().T
    solution = BeamformingSolution(layout.expand(covariances), config.tx_power * max(float(zeta.value), 0.0))
    logger.info("Zero forcing solved in %.3fs", result.seconds)
    return solution.repaired(1e-6)


def equal_power_zf(scenario: Scenario, channels: ChannelSet) -> BeamformingSolution:
    """ZF beams with P_0 split equally over subcarriers and IRs; no sensing stream."""
    config = scenario.config
    basis = zf_build_basis(channels)
    share = config.tx_power / (channels.n_subcarriers * channels.n_ir)
    outer = share * np.einsum('nki,nkj->nkij', basis.directions, np.conj(basis.directions))
    covariances = np.zeros((channels.n_subcarriers, config.n_symbols, channels.n_ir + 1,
                            config.n_tx, config.n_tx), dtype=complex)
    covariances[:, :, 1:] = outer[:, None]
    return BeamformingSolution(covariances)


def round_robin_index(n: int, l: int, n_subcarriers: int, n_ir: int) -> int:
    """IR (1-based) scheduled on subcarrier n at 1-based symbol l."""
    if n_ir < 1 or l < 1:
        raise PreconditionError("round-robin indexing needs K >= 1 and a 1-based symbol")
    residue = (n + (l - 1) * n_subcarriers) % n_ir
    return residue if residue != 0 else n_ir


def round_robin_schedule(n_subcarriers: int, n_symbols: int, n_ir: int) -> np.ndarray:
    """Scheduled IR (1-based) for every (n, l) with 0-based l, shape (N, L)."""
    return np.array([[round_robin_index(n, l + 1, n_subcarriers, n_ir) for l in range(n_symbols)]
                     for n in range(n_subcarriers)])


def _round_robin_layout(scenario: Scenario, n_subcarriers: int, n_ir: int) -> BlockLayout:
    slots = scenario.schedule.symbol_slots()
    return BlockLayout.from_keys([(int(slots[l]), (l * n_subcarriers) % n_ir)
                                  for l in range(scenario.config.n_symbols)])


def _round_robin_model(scenario: Scenario, channels: ChannelSet, solver: SolverSettings,
                       with_sensing: bool) -> Tuple[JointModel, np.ndarray]:
    n_sc, n_ir = channels.n_subcarriers, channels.n_ir
    layout = _round_robin_layout(scenario, n_sc, n_ir)
    schedule = round_robin_schedule(n_sc, scenario.config.n_symbols, n_ir)[:, list(layout.representatives())]
    mask = np.zeros((n_sc, layout.n_blocks, n_ir + 1), dtype=bool)
    for n in range(n_sc):
        for b in range(layout.n_blocks):
            mask[n, b, schedule[n, b]] = True
    mask[:, :, 0] = with_sensing
    program = ConicProgram('round_robin_tightness' if with_sensing else 'round_robin', solver.log_policy)
    model = JointModel(program, scenario, channels, layout, mask)
    model.add_matching_objective()
    model.add_subcarrier_power_equality()
    return model, schedule


def round_robin_solve(scenario: Scenario, channels: ChannelSet, requirements: Requirements,
                      solver: Optional[SolverSettings] = None) -> BeamformingSolution:
    """One IR per (subcarrier, symbol), equal power per subcarrier, no sensing stream."""
    solver = solver or SolverSettings()
    check_rate_screen(scenario, channels, requirements)
    model, _ = _round_robin_model(scenario, channels, solver, with_sensing=False)
    if requirements.rate > 0:
        model.add_exact_rates(requirements.rate)
    model.add_energy_constraints(requirements.power)
    result = solve(model.program, solver)
    _check_status(result, 'round robin')
    relaxed = model.assemble(result)
    logger.info("Round robin solved in %.3fs", result.seconds)
    return extract(relaxed, channels, scenario.config.tx_power)


def round_robin_tightness(scenario: Scenario, channels: ChannelSet, requirements: Requirements,
                      solver: Optional[SolverSettings] = None) -> Tuple[BeamformingSolution, float]:
    """Re-solve round robin with the sensing stream free; returns the solution and max tr(W_0) / P_0.

    The interference term -ln(1 + I) is linearized at I = 0, a lower bound on the rate.
    A small trace penalty on W_0 breaks the tie between W_0 and the scheduled beam, and
    any W_0 the solver leaves is then moved onto the scheduled beam: the transmit
    covariance and harvested power are unchanged and the rate can only grow.
    """
    solver = solver or SolverSettings()
    config = scenario.config
    check_rate_screen(scenario, channels, requirements)
    model, schedule = _round_robin_model(scenario, channels, solver, with_sensing=True)
    if requirements.rate > 0:
        shape = (channels.n_subcarriers, model.layout.n_blocks, channels.n_ir)
        scheduled = np.stack([schedule == k + 1 for k in range(channels.n_ir)], axis=-1)
        model.add_linearized_rates(np.zeros(shape), np.zeros(shape), requirements.rate, include=scheduled)
    model.add_energy_constraints(requirements.power)
    weights = model.layout.weights
    model.program.add_linear(SENSING_TRACE_PENALTY * sum(
        float(weights[b]) * variable.trace() for (n, b, s), variable in model.vars.items() if s == 0))
    result = solve(model.program, solver)
    _check_status(result, 'round robin tightness check')
    solved = model.assemble(result)
    raw_fraction = _sensing_fraction(solved, config.tx_power)

    covariances = np.array(solved.covariances)
    full_schedule = round_robin_schedule(channels.n_subcarriers, config.n_symbols, channels.n_ir)
    for n in range(channels.n_subcarriers):
        for l in range(config.n_symbols):
            covariances[n, l, full_schedule[n, l]] += covariances[n, l, 0]
            covariances[n, l, 0] = 0.0
    solution = BeamformingSolution(covariances, solved.zeta)
    fraction = _sensing_fraction(solution, config.tx_power)
    logger.info("Round robin tightness check: sensing-stream power fraction %.3e at the solver optimum, %.3e after "
                "moving it onto the scheduled beams", raw_fraction, fraction)
    return solution, fraction


def _sensing_fraction(solution: BeamformingSolution, tx_power: float) -> float:
    sensing_trace = np.real(np.trace(solution.covariances[:, :, 0], axis1=-2, axis2=-1)).sum(axis=0)
    return float(np.max(np.abs(sensing_trace))) / tx_power


def sensing_only_solve(scenario: Scenario, channels: ChannelSet,
                       solver: Optional[SolverSettings] = None,
                       layout: Optional[BlockLayout] = None) -> BeamformingSolution:
    """Matching-error minimum with only the sensing stream: the error lower bound."""
    solver = solver or SolverSettings()
    layout = layout or BlockLayout.per_slot(scenario.schedule)
    mask = np.zeros((channels.n_subcarriers, layout.n_blocks, channels.n_ir + 1), dtype=bool)
    mask[:, :, 0] = True
    model = JointModel(ConicProgram('sensing_only', solver.log_policy), scenario, channels, layout, mask)
    model.add_matching_objective()
    model.add_power_equality()
    result = solve(model.program, solver)
    _check_status(result, 'sensing only')
    return model.assemble(result)


def _mrt_equal_power(scenario: Scenario, channels: ChannelSet) -> BeamformingSolution:
    config = scenario.config
    h = channels.ir_channels
    unit = h / np.linalg.norm(h, axis=-1, keepdims=True)
    share = config.tx_power / (channels.n_subcarriers * channels.n_ir)
    outer = share * np.einsum('nki,nkj->nkij', unit, np.conj(unit))
    covariances = np.zeros((channels.n_subcarriers, config.n_symbols, channels.n_ir + 1,
                            config.n_tx, config.n_tx), dtype=complex)
    covariances[:, :, 1:] = outer[:, None]
    return BeamformingSolution(covariances)


def max_min_rate_solve(scenario: Scenario, channels: ChannelSet, solver: Optional[SolverSettings] = None,
                       max_iterations: int = 50, rel_tol: float = 1e-3) -> BeamformingSolution:
    """Information beams only: maximize the minimum average rate by successive linearization."""
    solver = solver or SolverSettings()
    layout = BlockLayout.single(scenario.config.n_symbols)
    mask = np.ones((channels.n_subcarriers, 1, channels.n_ir + 1), dtype=bool)
    mask[:, :, 0] = False
    point = _mrt_equal_power(scenario, channels)
    previous = None
    for iteration in range(1, max_iterations + 1):
        program = ConicProgram(f"max_min_rate_{iteration}", solver.log_policy)
        model = JointModel(program, scenario, channels, layout, mask)
        model.add_power_equality()
        rate = program.scalar('r')
        signal, total = model.local_powers(point)
        model.add_linearized_rates(signal, total, rate)
        program.add_linear(-rate)
        result = solve(program, solver)
        if not result.optimal:
            raise SolverFailureError(f"max-min rate subproblem returned {result.status}", result=result)
        point = model.assemble(result)
        current = float(rate.value)
        logger.debug("max-min rate iteration %d: %.6f bps/Hz", iteration, current)
        if previous is not None and abs(current - previous) / max(abs(previous), 1e-12) < rel_tol:
            break
        previous = current
    return point


def max_min_energy_solve(scenario: Scenario, channels: ChannelSet,
                         solver: Optional[SolverSettings] = None) -> BeamformingSolution:
    """Sensing/energy stream only: maximize the minimum harvested power."""
    solver = solver or SolverSettings()
    config = scenario.config
    layout = BlockLayout.single(config.n_symbols)
    mask = np.zeros((channels.n_subcarriers, 1, channels.n_ir + 1), dtype=bool)
    mask[:, :, 0] = True
    program = ConicProgram('max_min_energy', solver.log_policy)
    model = JointModel(program, scenario, channels, layout, mask)
    model.add_power_equality()
    level = program.scalar('e')
    reference = config.tx_power * float(np.mean(np.sum(np.abs(channels.er_channels) ** 2, axis=-1)))
    model.add_energy_constraints(0.0, target=level, reference=reference)
    program.add_linear(-level)
    result = solve(program, solver)
    _check_status(result, 'max-min energy')
    return model.assemble(result)


@dataclass
class TimeSwitchDesign:
    """Three phase designs mixed by time portions t = (t_1, t_2, t_3)."""
    phases: Tuple[BeamformingSolution, BeamformingSolution, BeamformingSolution]
    gain_tables: np.ndarray
    phase_rates: np.ndarray
    phase_powers: np.ndarray
    portions: np.ndarray
    zeta: float
    matching_error: float
    desired: np.ndarray
    tx_power: float

    def mixed_gains(self) -> np.ndarray:
        return np.tensordot(self.portions, self.gain_tables, axes=1)

    def performance(self) -> PerformanceReport:
        """Sensing uses all phases, rate counts phase 2 only, harvested power counts every phase."""
        n_symbols, n_grid = self.desired.shape
        normalized = None
        if self.zeta > 0:
            normalized = self.matching_error / (n_symbols * n_grid * self.zeta ** 2)
        residuals = sum(t * metrics.power_residual(phase, self.tx_power)
                        for t, phase in zip(self.portions, self.phases))
        return PerformanceReport(
            matching_error=self.matching_error,
            normalized_error=normalized,
            per_ir_rate=[float(self.portions[1] * r) for r in self.phase_rates],
            per_er_power=[float(p) for p in self.portions @ self.phase_powers],
            per_symbol_power_residual=[float(r) for r in residuals],
            gain_table=self.mixed_gains(),
            desired_table=self.desired,
            zeta=self.zeta,
            extras={f"t{j + 1}": float(t) for j, t in enumerate(self.portions)},
        )


def allocate_time(gain_tables: np.ndarray, desired: np.ndarray, phase_rates: np.ndarray,
                  phase_powers: np.ndarray, requirements: Requirements, tx_power: float,
                  solver: Optional[SolverSettings] = None) -> Tuple[np.ndarray, float, float]:
    """Time portions and zeta minimizing the mixed matching error; returns (t, zeta, error)."""
    solver = solver or SolverSettings()
    if requirements.rate > 0 and np.any(requirements.rate > phase_rates):
        raise RequirementsInfeasibleError(
            f"rate requirement {requirements.rate:.4g} exceeds the phase-2 rate {float(np.min(phase_rates)):.4g}")
    program = ConicProgram('time_allocation', solver.log_policy)
    portions = program.scalar('t', size=3, nonneg=True)
    zeta = program.scalar('zeta', nonneg=True)
    flat = gain_tables.reshape(3, -1) / tx_power
    program.add_squares(flat.T @ portions - zeta * desired.reshape(-1))
    program.equality(sum(portions[j] for j in range(3)), 1.0, 'portions')
    if requirements.rate > 0:
        for k, rate in enumerate(phase_rates):
            program.inequality(portions[1] * (rate / requirements.rate), 1.0, f"rate_{k}")
    if requirements.power > 0:
        for i in range(phase_powers.shape[1]):
            program.inequality((phase_powers[:, i] / requirements.power) @ portions, 1.0, f"energy_{i}")
    result = solve(program, solver)
    _check_status(result, 'time allocation')
    t = np.clip(np.asarray(portions.value, dtype=float), 0.0, None)
    t = t / t.sum()
    return t, tx_power * max(float(zeta.value), 0.0), float(result.objective_value) * tx_power ** 2


def time_switch_solve(scenario: Scenario, channels: ChannelSet, requirements: Requirements,
                      solver: Optional[SolverSettings] = None, max_iterations: int = 50,
                      rel_tol: float = 1e-3) -> TimeSwitchDesign:
    """Sensing-only, max-min rate and max-min energy phases followed by time allocation."""
    solver = solver or SolverSettings()
    config = scenario.config
    check_rate_screen(scenario, channels, requirements)
    phases = (
        sensing_only_solve(scenario, channels, solver),
        max_min_rate_solve(scenario, channels, solver, max_iterations, rel_tol),
        max_min_energy_solve(scenario, channels, solver),
    )
    steering = scenario.steering()
    gain_tables = np.stack([metrics.gain_table(phase, steering) for phase in phases])
    phase_rates = metrics.average_rates(phases[1], channels, config.noise_power_comm)
    phase_powers = np.stack([metrics.harvested_powers(phase, channels) for phase in phases])
    desired = scenario.desired_per_symbol()
    portions, zeta, error = allocate_time(gain_tables, desired, phase_rates, phase_powers,
                                          requirements, config.tx_power, solver)
    logger.info("Time switching portions %s", np.array2string(portions, precision=4))
    return TimeSwitchDesign(phases, gain_tables, phase_rates, phase_powers, portions, zeta, error, desired,
                            config.tx_power)
