"""
Performance functionals for iscapbeam.
Beampattern gain, matching error, SINR, average rate, harvested power and the
transmit power residual of a beamforming solution.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import NormalizationError, PreconditionError
from .scenario import ChannelSet, Scenario, steering_matrix

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-8


@dataclass(frozen=True)
class BeamformingSolution:
    """Covariances W[n, l, k] for k = 0 (sensing/energy) and k = 1..K_IR, plus zeta.

    ``covariances`` has shape (N, L, K_IR + 1, N_t, N_t).
    """
    covariances: np.ndarray
    zeta: float = 0.0

    def __post_init__(self):
        covariances = np.array(self.covariances, dtype=complex)
        if covariances.ndim != 5 or covariances.shape[-1] != covariances.shape[-2]:
            raise PreconditionError("covariances must be shaped (N, L, K+1, N_t, N_t)")
        if self.zeta < 0:
            raise PreconditionError(f"zeta must be non-negative, got {self.zeta}")
        covariances.setflags(write=False)
        object.__setattr__(self, 'covariances', covariances)
        object.__setattr__(self, 'zeta', float(self.zeta))

    @property
    def n_subcarriers(self) -> int:
        return self.covariances.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.covariances.shape[1]

    @property
    def n_ir(self) -> int:
        return self.covariances.shape[2] - 1

    @property
    def n_tx(self) -> int:
        return self.covariances.shape[3]

    def transmit_covariance(self) -> np.ndarray:
        """R[n, l] = sum over streams, shape (N, L, N_t, N_t)."""
        return self.covariances.sum(axis=2)

    def scaled(self, factor: float) -> 'BeamformingSolution':
        return BeamformingSolution(self.covariances * factor, self.zeta * factor)

    def with_zeta(self, zeta: float) -> 'BeamformingSolution':
        return BeamformingSolution(self.covariances, zeta)

    def repaired(self, tolerance: float = PSD_TOLERANCE) -> 'BeamformingSolution':
        """Hermitian-symmetrize and clip eigenvalues down to zero.

        The tolerance is relative to the symbol's total transmit trace, so a stream
        driven to zero keeps the round-off budget of its symbol. Eigenvalues below
        -tolerance * that trace are rejected rather than clipped.
        """
        hermitian = 0.5 * (self.covariances + np.conj(np.swapaxes(self.covariances, -1, -2)))
        eigenvalues, eigenvectors = np.linalg.eigh(hermitian)
        traces = np.maximum(np.real(np.trace(hermitian, axis1=-2, axis2=-1)), 0.0)
        symbol_traces = traces.sum(axis=(0, 2), keepdims=True)
        reference = np.maximum(np.broadcast_to(symbol_traces, traces.shape), traces.max(initial=0.0))
        worst = eigenvalues[..., 0] + tolerance * reference
        if np.any(worst < 0):
            index = np.unravel_index(int(np.argmin(worst)), worst.shape)
            raise PreconditionError(
                f"covariance {index} has eigenvalue {eigenvalues[index][0]:.3e} below PSD tolerance")
        clipped = np.clip(eigenvalues, 0.0, None)
        rebuilt = np.einsum('...ij,...j,...kj->...ik', eigenvectors, clipped, np.conj(eigenvectors))
        return BeamformingSolution(rebuilt, self.zeta)


@dataclass
class PerformanceReport:
    """Every metric of a solution, ready for tabulation."""
    matching_error: float
    normalized_error: Optional[float]
    per_ir_rate: List[float]
    per_er_power: List[float]
    per_symbol_power_residual: List[float]
    gain_table: np.ndarray
    desired_table: np.ndarray
    zeta: float
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def min_rate(self) -> float:
        return float(min(self.per_ir_rate))

    @property
    def min_er_power(self) -> float:
        return float(min(self.per_er_power))


def _check_symbol(solution: BeamformingSolution, symbol: int):
    if not 0 <= symbol < solution.n_symbols:
        raise IndexError(f"symbol {symbol} outside 0..{solution.n_symbols - 1}")


def gain_table(solution: BeamformingSolution, steering: np.ndarray) -> np.ndarray:
    """G_l(theta_m) for every symbol and steering row, shape (L, M)."""
    transmit = solution.transmit_covariance().sum(axis=0)
    gains = np.einsum('mi,lij,mj->lm', steering, transmit, np.conj(steering))
    return np.real(gains)


def beampattern_gain(solution: BeamformingSolution, symbol: int, theta: float,
                     spacing_ratio: float = 0.5) -> float:
    """Transmit power towards theta at one symbol, summed over subcarriers and streams."""
    _check_symbol(solution, symbol)
    v = steering_matrix([theta], solution.n_tx, spacing_ratio)
    single = BeamformingSolution(solution.covariances[:, symbol:symbol + 1], solution.zeta)
    return float(gain_table(single, v)[0, 0])


def matching_error(solution: BeamformingSolution, desired: np.ndarray, steering: np.ndarray) -> float:
    """Sum over symbols and grid angles of |G_l(theta_m) - zeta P_l(theta_m)|^2.

    ``desired`` is the (L, M) table and ``steering`` the (M, N_t) grid response.
    """
    gains = gain_table(solution, steering)
    if gains.shape != np.shape(desired):
        raise PreconditionError(f"desired table {np.shape(desired)} does not match gains {gains.shape}")
    return float(np.sum((gains - solution.zeta * np.asarray(desired)) ** 2))


def normalized_matching_error(solution: BeamformingSolution, desired: np.ndarray,
                              steering: np.ndarray) -> float:
    """Matching error divided by L * M * zeta^2."""
    if solution.zeta <= 0:
        raise NormalizationError("normalized matching error needs zeta > 0")
    raw = matching_error(solution, desired, steering)
    n_symbols, n_grid = np.shape(desired)
    return raw / (n_symbols * n_grid * solution.zeta ** 2)


def received_powers(solution: BeamformingSolution, channels: np.ndarray) -> np.ndarray:
    """h^H W_s h for every (n, l, stream s, user), shape (N, L, K+1, U)."""
    values = np.einsum('nui,nlsij,nuj->nlsu', np.conj(channels), solution.covariances, channels)
    return np.clip(np.real(values), 0.0, None)


def sinr_table(solution: BeamformingSolution, channels: ChannelSet, noise_power: float) -> np.ndarray:
    """SINR at every (n, l, IR), shape (N, L, K_IR)."""
    powers = received_powers(solution, channels.ir_channels)
    n_ir = channels.n_ir
    signal = np.stack([powers[:, :, k + 1, k] for k in range(n_ir)], axis=-1)
    total = powers.sum(axis=2)
    return signal / (total - signal + noise_power)


def sinr(solution: BeamformingSolution, channels: ChannelSet, subcarrier: int, symbol: int,
         ir: int, noise_power: float) -> float:
    """SINR of IR ``ir`` (0-based) on one subcarrier and symbol."""
    _check_symbol(solution, symbol)
    if not 0 <= ir < channels.n_ir:
        raise IndexError(f"IR {ir} outside 0..{channels.n_ir - 1}")
    if not 0 <= subcarrier < solution.n_subcarriers:
        raise IndexError(f"subcarrier {subcarrier} outside 0..{solution.n_subcarriers - 1}")
    h = channels.ir_channels[subcarrier, ir]
    streams = solution.covariances[subcarrier, symbol]
    powers = np.real(np.einsum('i,sij,j->s', np.conj(h), streams, h))
    signal = max(powers[ir + 1], 0.0)
    interference = max(powers.sum() - powers[ir + 1], 0.0)
    return float(signal / (interference + noise_power))


def average_rates(solution: BeamformingSolution, channels: ChannelSet, noise_power: float) -> np.ndarray:
    """Average rate (bps/Hz) of every IR."""
    return np.mean(np.log2(1.0 + sinr_table(solution, channels, noise_power)), axis=(0, 1))


def average_rate(solution: BeamformingSolution, channels: ChannelSet, ir: int, noise_power: float) -> float:
    return float(average_rates(solution, channels, noise_power)[ir])


def harvested_powers(solution: BeamformingSolution, channels: ChannelSet) -> np.ndarray:
    """Average received RF power (W) at every ER; 1/L averaging only."""
    powers = received_powers(solution, channels.er_channels)
    return powers.sum(axis=(0, 2)).sum(axis=0) / solution.n_symbols


def harvested_power(solution: BeamformingSolution, channels: ChannelSet, er: int) -> float:
    return float(harvested_powers(solution, channels)[er])


def power_residual(solution: BeamformingSolution, tx_power: float) -> np.ndarray:
    """Per-symbol total trace minus P_0."""
    traces = np.real(np.trace(solution.covariances, axis1=-2, axis2=-1))
    return traces.sum(axis=(0, 2)) - tx_power


def slot_gain_table(report: PerformanceReport, scenario: Scenario) -> np.ndarray:
    """Per-slot mean gain normalized by zeta, shape (Q, M)."""
    table = np.stack([report.gain_table[list(symbols)].mean(axis=0)
                      for symbols in scenario.schedule.slot_symbols])
    if report.zeta > 0:
        table = table / report.zeta
    return table


def evaluate(solution: BeamformingSolution, scenario: Scenario, channels: ChannelSet) -> PerformanceReport:
    """Evaluate every metric on a solution."""
    config = scenario.config
    steering = scenario.steering()
    desired = scenario.desired_per_symbol()
    raw = matching_error(solution, desired, steering)
    try:
        normalized = normalized_matching_error(solution, desired, steering)
    except NormalizationError:
        logger.debug("zeta is zero; normalized error left undefined")
        normalized = None
    return PerformanceReport(
        matching_error=raw,
        normalized_error=normalized,
        per_ir_rate=[float(r) for r in average_rates(solution, channels, config.noise_power_comm)],
        per_er_power=[float(p) for p in harvested_powers(solution, channels)],
        per_symbol_power_residual=[float(r) for r in power_residual(solution, config.tx_power)],
        gain_table=gain_table(solution, steering),
        desired_table=desired,
        zeta=solution.zeta,
    )


def meets_requirements(report: PerformanceReport, rate_requirement: float, power_requirement: float,
                       tx_power: float) -> bool:
    """Feasibility with the acceptance slacks: rate -1e-6, power relative 1e-6."""
    return (report.min_rate >= rate_requirement - 1e-6
            and report.min_er_power >= power_requirement * (1 - 1e-6)
            and max(abs(r) for r in report.per_symbol_power_residual) <= 1e-6 * tx_power)
