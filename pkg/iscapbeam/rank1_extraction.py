"""
Rank-one extraction for iscapbeam.
Maps a relaxed covariance solution to one beam per IR stream with every metric preserved,
and checks that equivalence numerically.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import metrics
from .errors import EquivalenceViolationError
from .formulation import Requirements
from .metrics import BeamformingSolution
from .scenario import ChannelSet, Scenario

logger = logging.getLogger(__name__)

DEGENERATE_RATIO = 1e-12
SUM_TOLERANCE = 1e-9
SIGNAL_TOLERANCE = 1e-9
PSD_TOLERANCE = 1e-10
RANK_RATIO = 1e-6
METRIC_TOLERANCE = 1e-8


@dataclass
class VerificationReport:
    """Pass/fail of each equivalence check plus its worst residual."""
    residuals: Dict[str, float] = field(default_factory=dict)
    thresholds: Dict[str, float] = field(default_factory=dict)
    worst_index: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def record(self, check: str, residual: float, threshold: float, index: Tuple[int, ...] = ()):
        self.residuals[check] = float(residual)
        self.thresholds[check] = float(threshold)
        self.worst_index[check] = tuple(int(i) for i in index)

    @property
    def failures(self) -> List[str]:
        return [name for name, value in self.residuals.items() if value > self.thresholds[name]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def rows(self) -> List[Dict]:
        return [
            {
                'check': name,
                'passed': value <= self.thresholds[name],
                'residual': value,
                'threshold': self.thresholds[name],
                'index': ' '.join(str(i) for i in self.worst_index.get(name, ())),
            }
            for name, value in self.residuals.items()
        ]


def _hermitian(matrices: np.ndarray) -> np.ndarray:
    return 0.5 * (matrices + np.conj(np.swapaxes(matrices, -1, -2)))


def extract(solution_hat: BeamformingSolution, channels: ChannelSet,
            tx_power: Optional[float] = None) -> BeamformingSolution:
    """Rank-one beams w = W h / sqrt(h^H W h); the remainder moves to the sensing stream.

    Streams whose received power is negligible against their own trace are zeroed
    and folded into stream 0.
    """
    covariances = _hermitian(solution_hat.covariances)
    h = channels.ir_channels
    info = covariances[:, :, 1:]
    if tx_power is None:
        tx_power = float(np.mean(np.real(np.trace(covariances, axis1=-2, axis2=-1)).sum(axis=(0, 2))))
    n_subcarriers = solution_hat.n_subcarriers

    projected = np.einsum('nlkij,nkj->nlki', info, h)
    received = np.real(np.einsum('nki,nlki->nlk', np.conj(h), projected))
    traces = np.real(np.trace(info, axis1=-2, axis2=-1))
    norms = np.sum(np.abs(h) ** 2, axis=-1)[:, None, :]
    degenerate = ((received <= DEGENERATE_RATIO * traces * norms)
                  | (traces <= DEGENERATE_RATIO * tx_power / n_subcarriers))
    if np.any(degenerate & (traces > DEGENERATE_RATIO * tx_power / n_subcarriers)):
        logger.debug("%d IR streams carry power but no signal; folded into the sensing stream",
                     int(np.sum(degenerate & (traces > DEGENERATE_RATIO * tx_power / n_subcarriers))))

    safe = np.where(degenerate, 1.0, received)
    beams = projected / np.sqrt(safe)[..., None]
    beams[degenerate] = 0.0
    bar_info = np.einsum('nlki,nlkj->nlkij', beams, np.conj(beams))

    bar = np.empty_like(covariances)
    bar[:, :, 1:] = bar_info
    bar[:, :, 0] = covariances.sum(axis=2) - bar_info.sum(axis=2)
    return BeamformingSolution(bar, solution_hat.zeta)


def beams(solution: BeamformingSolution) -> np.ndarray:
    """Beam vectors of rank-one information streams, shape (N, L, K_IR, N_t)."""
    eigenvalues, eigenvectors = np.linalg.eigh(_hermitian(solution.covariances[:, :, 1:]))
    top = np.clip(eigenvalues[..., -1], 0.0, None)
    return eigenvectors[..., -1] * np.sqrt(top)[..., None]


def info_rank_ratio(solution: BeamformingSolution) -> np.ndarray:
    """Second-largest over largest eigenvalue of every information covariance."""
    eigenvalues = np.linalg.eigvalsh(_hermitian(solution.covariances[:, :, 1:]))
    largest = eigenvalues[..., -1]
    second = eigenvalues[..., -2] if eigenvalues.shape[-1] > 1 else np.zeros_like(largest)
    return np.where(largest > 0, np.abs(second) / np.where(largest > 0, largest, 1.0), 0.0)


def _relative_gap(a, b, floor: float = 1e-12) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def _argmax(values: np.ndarray) -> Tuple[int, ...]:
    return tuple(np.unravel_index(int(np.argmax(values)), values.shape))


def verify_equivalence(solution_hat: BeamformingSolution, solution_bar: BeamformingSolution,
                       scenario: Scenario, channels: ChannelSet,
                       requirements: Optional[Requirements] = None,
                       raise_on_failure: bool = False) -> VerificationReport:
    """Check sum preservation, signal/interference preservation, PSD, rank and metric agreement."""
    config = scenario.config
    report = VerificationReport()
    hat = _hermitian(solution_hat.covariances)
    bar = _hermitian(solution_bar.covariances)
    tx_power = config.tx_power

    sum_gap = np.max(np.abs(hat.sum(axis=2) - bar.sum(axis=2)), axis=(-2, -1))
    report.record('sum', float(np.max(sum_gap)) / tx_power, SUM_TOLERANCE, _argmax(sum_gap))

    h = channels.ir_channels
    scale = tx_power * float(np.max(np.sum(np.abs(h) ** 2, axis=-1)))
    hat_powers = metrics.received_powers(BeamformingSolution(hat), h)
    bar_powers = metrics.received_powers(BeamformingSolution(bar), h)
    n_ir = channels.n_ir
    hat_signal = np.stack([hat_powers[:, :, k + 1, k] for k in range(n_ir)], axis=-1)
    bar_signal = np.stack([bar_powers[:, :, k + 1, k] for k in range(n_ir)], axis=-1)
    signal_gap = np.abs(hat_signal - bar_signal)
    report.record('signal', float(np.max(signal_gap)) / scale, SIGNAL_TOLERANCE, _argmax(signal_gap))
    interference_gap = np.abs((hat_powers.sum(axis=2) - hat_signal) - (bar_powers.sum(axis=2) - bar_signal))
    report.record('interference', float(np.max(interference_gap)) / scale, SIGNAL_TOLERANCE,
                  _argmax(interference_gap))

    sensing_eigen = np.linalg.eigvalsh(bar[:, :, 0])[..., 0]
    cell_trace = np.maximum(np.real(np.trace(bar.sum(axis=2), axis1=-2, axis2=-1)), 1e-300)
    psd_violation = np.clip(-sensing_eigen / cell_trace, 0.0, None)
    report.record('psd', float(np.max(psd_violation)), PSD_TOLERANCE, _argmax(psd_violation))

    ratios = info_rank_ratio(solution_bar)
    report.record('rank', float(np.max(ratios)), RANK_RATIO, _argmax(ratios))

    hat_sol = BeamformingSolution(hat, solution_hat.zeta)
    bar_sol = BeamformingSolution(bar, solution_bar.zeta)
    steering = scenario.steering()
    desired = scenario.desired_per_symbol()
    report.record('matching_error', _relative_gap(
        metrics.matching_error(hat_sol, desired, steering),
        metrics.matching_error(bar_sol, desired, steering), floor=1e-12 * tx_power ** 2), METRIC_TOLERANCE)
    noise = config.noise_power_comm
    report.record('rate', _relative_gap(metrics.average_rates(hat_sol, channels, noise),
                                        metrics.average_rates(bar_sol, channels, noise), floor=1e-6), METRIC_TOLERANCE)
    report.record('harvested', _relative_gap(metrics.harvested_powers(hat_sol, channels),
                                             metrics.harvested_powers(bar_sol, channels), floor=1e-20), METRIC_TOLERANCE)
    residual_gap = np.abs(metrics.power_residual(hat_sol, tx_power) - metrics.power_residual(bar_sol, tx_power))
    report.record('power', float(np.max(residual_gap)) / tx_power, METRIC_TOLERANCE)

    if requirements is not None:
        bar_report = metrics.evaluate(bar_sol, scenario, channels)
        report.record('rate_requirement', max(requirements.rate - bar_report.min_rate, 0.0), 1e-6)
        shortfall = max(requirements.power - bar_report.min_er_power, 0.0)
        report.record('power_requirement', shortfall / max(requirements.power, 1e-300), 1e-6)

    if report.failures:
        logger.warning("Equivalence checks failed: %s", ', '.join(report.failures))
        if raise_on_failure:
            raise EquivalenceViolationError(
                f"equivalence violated: {', '.join(report.failures)}", report=report)
    return report
