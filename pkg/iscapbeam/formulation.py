"""
Shared building blocks of the beamforming programs.
Symbol blocks, requirements and the normalized covariance model every solver builds on.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np

from .conic import ConicProgram, HermitianVariable, SolveResult, hermitian_inner
from .errors import PreconditionError, RequirementsInfeasibleError
from .metrics import BeamformingSolution, received_powers
from .scenario import ChannelSet, Scenario, ScenarioConfig, SlotSchedule

logger = logging.getLogger(__name__)

# Solver output is repaired with a looser PSD tolerance than metric inputs.
SOLVER_PSD_TOLERANCE = 1e-6

Target = Union[float, cp.Expression]


@dataclass(frozen=True)
class Requirements:
    """Minimum average rate per IR (bps/Hz) and harvested power per ER (W)."""
    rate: float = 0.0
    power: float = 0.0

    def __post_init__(self):
        if self.rate < 0 or self.power < 0:
            raise PreconditionError("requirements must be non-negative")

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> 'Requirements':
        return cls(rate=config.rate_requirement, power=config.power_requirement)


@dataclass(frozen=True)
class BlockLayout:
    """Groups of symbols that share one set of covariance variables."""
    blocks: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        blocks = tuple(tuple(int(s) for s in block) for block in self.blocks)
        flat = sorted(s for block in blocks for s in block)
        if not blocks or any(not block for block in blocks) or flat != list(range(len(flat))):
            raise PreconditionError("blocks must partition the symbol indices")
        object.__setattr__(self, 'blocks', blocks)

    @classmethod
    def per_symbol(cls, n_symbols: int) -> 'BlockLayout':
        return cls(tuple((l,) for l in range(n_symbols)))

    @classmethod
    def per_slot(cls, schedule: SlotSchedule) -> 'BlockLayout':
        return cls(schedule.slot_symbols)

    @classmethod
    def single(cls, n_symbols: int) -> 'BlockLayout':
        return cls((tuple(range(n_symbols)),))

    @classmethod
    def from_keys(cls, keys: Sequence) -> 'BlockLayout':
        """One block per distinct key, in order of first appearance."""
        groups: Dict = {}
        for symbol, key in enumerate(keys):
            groups.setdefault(key, []).append(symbol)
        return cls(tuple(tuple(g) for g in groups.values()))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_symbols(self) -> int:
        return sum(len(block) for block in self.blocks)

    @property
    def weights(self) -> np.ndarray:
        return np.array([len(block) for block in self.blocks], dtype=float)

    def representatives(self) -> Tuple[int, ...]:
        return tuple(block[0] for block in self.blocks)

    def average(self, covariances: np.ndarray) -> np.ndarray:
        """Average an (N, L, ...) array over the symbols of each block -> (N, B, ...)."""
        return np.stack([covariances[:, list(block)].mean(axis=1) for block in self.blocks], axis=1)

    def expand(self, block_values: np.ndarray) -> np.ndarray:
        """Broadcast an (N, B, ...) array back to (N, L, ...)."""
        index = np.empty(self.n_symbols, dtype=int)
        for b, block in enumerate(self.blocks):
            index[list(block)] = b
        return block_values[:, index]


def matching_coefficients(steering: np.ndarray) -> np.ndarray:
    """C_m = conj(v_m) v_m^T so that real(tr(C_m^H W)) = v_m^T W conj(v_m)."""
    return np.einsum('mi,mj->mij', np.conj(steering), steering)


def user_coefficients(channels: np.ndarray) -> np.ndarray:
    """C_u = h_u h_u^H per user, shape (N, U, N_t, N_t)."""
    return np.einsum('nui,nuj->nuij', channels, np.conj(channels))


def check_rate_screen(scenario: Scenario, channels: ChannelSet, requirements: Requirements):
    """Necessary conditions: single-user capacity and maximum harvestable power."""
    config = scenario.config
    if requirements.rate > 0:
        gains = np.sum(np.abs(channels.ir_channels) ** 2, axis=2).max(axis=0)
        bound = np.log2(1.0 + config.tx_power * gains / config.noise_power_comm)
        if np.any(requirements.rate > bound):
            worst = int(np.argmin(bound))
            raise RequirementsInfeasibleError(
                f"rate requirement {requirements.rate:.4g} bps/Hz exceeds the capacity bound "
                f"{bound[worst]:.4g} of IR {worst + 1}")
    if requirements.power > 0:
        gains = np.sum(np.abs(channels.er_channels) ** 2, axis=2).max(axis=0)
        bound = config.tx_power * gains
        if np.any(requirements.power > bound):
            worst = int(np.argmin(bound))
            raise RequirementsInfeasibleError(
                f"power requirement {requirements.power:.4g} W exceeds the harvestable bound "
                f"{bound[worst]:.4g} W of ER {worst + 1}")


class JointModel:
    """Covariance variables U = W / P_0 over (subcarrier, block, stream) inside a ConicProgram.

    IR channels are scaled by sqrt(P_0) / sigma_c so received powers are SINR-normalized.
    Streams without a variable (per ``stream_mask``) are identically zero.
    """

    def __init__(self, program: ConicProgram, scenario: Scenario, channels: ChannelSet,
                 layout: BlockLayout, stream_mask: Optional[np.ndarray] = None):
        config = scenario.config
        self.program = program
        self.scenario = scenario
        self.channels = channels
        self.layout = layout
        self.n_subcarriers = channels.n_subcarriers
        self.n_streams = channels.n_ir + 1
        if stream_mask is None:
            stream_mask = np.ones((self.n_subcarriers, layout.n_blocks, self.n_streams), dtype=bool)
        self.stream_mask = np.asarray(stream_mask, dtype=bool)
        if self.stream_mask.shape != (self.n_subcarriers, layout.n_blocks, self.n_streams):
            raise PreconditionError(f"stream mask shape {self.stream_mask.shape} does not match the model")
        scale = np.sqrt(config.tx_power / config.noise_power_comm)
        self._ir_coefficients = user_coefficients(channels.ir_channels * scale)
        self._er_coefficients = user_coefficients(channels.er_channels)
        self.vars: Dict[Tuple[int, int, int], HermitianVariable] = {}
        for n, b, s in zip(*np.nonzero(self.stream_mask)):
            key = (int(n), int(b), int(s))
            self.vars[key] = program.hermitian(f"U_{key[0]}_{key[1]}_{key[2]}", config.n_tx)
        self._ir_cache: Dict[Tuple[int, int, int], cp.Expression] = {}
        self._er_cache: Dict[Tuple[int, int, int], cp.Expression] = {}
        self.zeta: Optional[cp.Variable] = None

    def block_vars(self, b: int):
        return [v for (n, block, s), v in self.vars.items() if block == b]

    def received_ir(self, n: int, b: int, s: int, k: int):
        """Normalized h~^H U_s h~ for IR k, or 0 when stream s has no variable."""
        key = (n, b, s)
        if key not in self.vars:
            return 0.0
        if key not in self._ir_cache:
            self._ir_cache[key] = hermitian_inner([self.vars[key]], self._ir_coefficients[n])
        return self._ir_cache[key][k]

    def received_er(self, n: int, b: int, s: int, i: int):
        key = (n, b, s)
        if key not in self.vars:
            return 0.0
        if key not in self._er_cache:
            self._er_cache[key] = hermitian_inner([self.vars[key]], self._er_coefficients[n])
        return self._er_cache[key][i]

    def signal(self, n: int, b: int, k: int):
        return self.received_ir(n, b, k + 1, k)

    def total(self, n: int, b: int, k: int):
        return sum(self.received_ir(n, b, s, k) for s in range(self.n_streams))

    def add_matching_objective(self):
        """Weighted sum over blocks of ||gains_b - zeta P_b||^2 with zeta >= 0 free."""
        self.zeta = self.program.scalar('zeta', nonneg=True)
        coefficients = matching_coefficients(self.scenario.steering())
        desired = self.scenario.desired_per_symbol()
        for b, block in enumerate(self.layout.blocks):
            variables = self.block_vars(b)
            if not variables:
                continue
            gains = hermitian_inner(variables, coefficients)
            self.program.add_squares(gains - self.zeta * desired[block[0]], weight=len(block))

    def add_power_equality(self):
        """Total trace equals P_0 on every symbol (1 in normalized units)."""
        for b in range(self.layout.n_blocks):
            self.program.equality(sum(v.trace() for v in self.block_vars(b)), 1.0, f"power_{b}")

    def add_subcarrier_power_equality(self):
        """Equal split: trace equals P_0 / N on every (subcarrier, block)."""
        share = 1.0 / self.n_subcarriers
        for n in range(self.n_subcarriers):
            for b in range(self.layout.n_blocks):
                traces = [v.trace() for (m, block, s), v in self.vars.items() if m == n and block == b]
                self.program.equality(sum(traces), share, f"power_{n}_{b}")

    def harvested(self, i: int):
        """Average harvested power of ER i in watts as an affine expression."""
        config = self.scenario.config
        weights = self.layout.weights
        terms = [float(weights[b]) * self.received_er(n, b, s, i)
                 for (n, b, s) in self.vars]
        return config.tx_power / config.n_symbols * sum(terms)

    def add_energy_constraints(self, requirement: float, target: Optional[cp.Expression] = None,
                               reference: float = 1.0):
        """Harvested power of every ER >= requirement, or >= target * reference when a target is given."""
        if target is None and requirement <= 0:
            return
        for i in range(self.channels.n_er):
            if target is None:
                self.program.inequality(self.harvested(i) / requirement, 1.0, f"energy_{i}")
            else:
                self.program.inequality(self.harvested(i) / reference, target, f"energy_{i}")

    def local_powers(self, solution: BeamformingSolution) -> Tuple[np.ndarray, np.ndarray]:
        """Block-averaged normalized signal and total received power, each (N, B, K_IR)."""
        averaged = self.layout.average(solution.covariances)
        powers = received_powers(BeamformingSolution(averaged), self.channels.ir_channels)
        powers = powers / self.scenario.config.noise_power_comm
        n_ir = self.channels.n_ir
        signal = np.stack([powers[:, :, k + 1, k] for k in range(n_ir)], axis=-1)
        return signal, powers.sum(axis=2)

    def add_linearized_rates(self, local_signal: np.ndarray, local_total: np.ndarray,
                             target: Target, label: str = 'rate', include: Optional[np.ndarray] = None):
        """Average rate of every IR >= target with -ln(I + 1) replaced by its tangent at I0.

        The leading ln(T + 1) stays exact (or minorized around T0 + 1 under that policy).
        ``include`` (N, B, K_IR) restricts each sum to the cells an IR is served on.
        """
        config = self.scenario.config
        weights = self.layout.weights
        scale = config.n_symbols * self.n_subcarriers * np.log(2.0)
        local_interference = np.clip(local_total - local_signal, 0.0, None)
        for k in range(self.channels.n_ir):
            coefficients, arguments, anchors, linear = [], [], [], []
            for n in range(self.n_subcarriers):
                for b in range(self.layout.n_blocks):
                    if include is not None and not include[n, b, k]:
                        continue
                    total = self.total(n, b, k)
                    interference = total - self.signal(n, b, k)
                    i0 = local_interference[n, b, k]
                    coefficients.append(weights[b])
                    arguments.append(total + 1.0)
                    anchors.append(local_total[n, b, k] + 1.0)
                    linear.append(float(weights[b]) * (float(np.log1p(i0)) + (interference - i0) / (1.0 + i0)))
            rhs = scale * target + sum(linear)
            self.program.log_bound(coefficients, arguments, rhs, f"{label}_{k}", anchors=anchors)

    def add_exact_rates(self, target: Target, label: str = 'rate'):
        """Average rate >= target for interference-free cells: ln(1 + S) per scheduled cell."""
        config = self.scenario.config
        weights = self.layout.weights
        scale = config.n_symbols * self.n_subcarriers * np.log(2.0)
        for k in range(self.channels.n_ir):
            coefficients, arguments = [], []
            for n in range(self.n_subcarriers):
                for b in range(self.layout.n_blocks):
                    if (n, b, k + 1) in self.vars:
                        coefficients.append(weights[b])
                        arguments.append(self.signal(n, b, k) + 1.0)
            if not arguments:
                raise RequirementsInfeasibleError(f"IR {k + 1} is never scheduled")
            self.program.log_bound(coefficients, arguments, scale * target, f"{label}_{k}")

    def block_covariances(self) -> np.ndarray:
        """Physical covariances (N, B, K+1, N_t, N_t) from solved variable values."""
        config = self.scenario.config
        shape = (self.n_subcarriers, self.layout.n_blocks, self.n_streams, config.n_tx, config.n_tx)
        covariances = np.zeros(shape, dtype=complex)
        for (n, b, s), variable in self.vars.items():
            covariances[n, b, s] = config.tx_power * variable.value
        return covariances

    def assemble(self, result: SolveResult) -> BeamformingSolution:
        """Expanded and PSD-repaired solution; zeta is rescaled to watts."""
        if not result.optimal:
            raise PreconditionError(f"cannot assemble a {result.status} result")
        zeta = 0.0
        if self.zeta is not None and self.zeta.value is not None:
            zeta = max(float(self.zeta.value), 0.0) * self.scenario.config.tx_power
        solution = BeamformingSolution(self.layout.expand(self.block_covariances()), zeta)
        return solution.repaired(SOLVER_PSD_TOLERANCE)

    def matching_error(self, result: SolveResult) -> float:
        """Physical matching error implied by a solved objective value."""
        return float(result.objective_value) * self.scenario.config.tx_power ** 2
