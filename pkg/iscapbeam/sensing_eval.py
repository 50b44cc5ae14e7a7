"""
Monostatic OFDM radar evaluation for iscapbeam.
Echo synthesis under a transmit design, MUSIC angle estimation, 2-D DFT delay/Doppler
estimation and angle MSE scoring.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.constants import speed_of_light

from .errors import EstimationDegenerateError, PreconditionError
from .metrics import BeamformingSolution
from .rank1_extraction import RANK_RATIO, beams, info_rank_ratio
from .scenario import AngularGrid, Scenario, ScenarioConfig, steering_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TargetSet:
    """Point targets: angle, complex amplitude, delay, normalized Doppler and owning slot."""
    angles: Tuple[float, ...]
    amplitudes: Tuple[complex, ...]
    delays: Tuple[float, ...]
    dopplers: Tuple[float, ...]
    slot_members: Tuple[Tuple[int, ...], ...] = field(default_factory=tuple)

    def __post_init__(self):
        count = len(self.angles)
        for name in ('amplitudes', 'delays', 'dopplers'):
            if len(getattr(self, name)) != count:
                raise PreconditionError(f"{name} must list one value per target")
        object.__setattr__(self, 'angles', tuple(float(a) for a in self.angles))
        object.__setattr__(self, 'amplitudes', tuple(complex(a) for a in self.amplitudes))
        object.__setattr__(self, 'delays', tuple(float(d) for d in self.delays))
        object.__setattr__(self, 'dopplers', tuple(float(d) for d in self.dopplers))
        object.__setattr__(self, 'slot_members', tuple(tuple(int(k) for k in s) for s in self.slot_members))

    def __len__(self) -> int:
        return len(self.angles)

    def validate(self, config: ScenarioConfig):
        """Delays within one subcarrier period and Doppler phase steps below half a cycle."""
        for k, (delay, doppler) in enumerate(zip(self.delays, self.dopplers)):
            if not 0 <= delay < 1.0 / config.subcarrier_spacing:
                raise PreconditionError(f"target {k} delay {delay:.3e}s outside [0, 1/subcarrier spacing)")
            if abs(doppler * config.carrier_freq * config.symbol_duration) >= 0.5:
                raise PreconditionError(f"target {k} Doppler {doppler:.3e} is ambiguous")


@dataclass(frozen=True)
class EchoFrame:
    """Received snapshots (N, L, N_r), transmit realizations (N, L, N_t) and the slot partition."""
    received: np.ndarray
    transmit: np.ndarray
    slot_symbols: Tuple[Tuple[int, ...], ...]
    spacing_ratio: float = 0.5

    @property
    def n_rx(self) -> int:
        return self.received.shape[-1]


@dataclass
class EstimationReport:
    """Per-target estimates next to ground truth plus the angle MSE."""
    truth: TargetSet
    angles: List[float]
    delays: List[float]
    dopplers: List[float]
    mse: float
    mismatch: bool = False

    def rows(self) -> List[Dict]:
        rows = []
        for k in range(len(self.truth)):
            rows.append({
                'target_id': k,
                'truth_deg': float(np.degrees(self.truth.angles[k])),
                'est_deg': float(np.degrees(self.angles[k])),
                'truth_delay_s': self.truth.delays[k],
                'est_delay_s': self.delays[k],
                'truth_doppler': self.truth.dopplers[k],
                'est_doppler': self.dopplers[k],
            })
        return rows


def make_targets(scenario: Scenario, per_slot: int = 1, rng_seed: int = 0,
                 distance_range: Tuple[float, float] = (20.0, 60.0),
                 speed_range: Tuple[float, float] = (-20.0, 20.0)) -> TargetSet:
    """Targets on grid angles spread evenly inside each slot's band, with two-way path-loss amplitudes."""
    config = scenario.config
    rng = np.random.default_rng(rng_seed)
    angles, amplitudes, delays, dopplers, members = [], [], [], [], []
    for q in range(scenario.schedule.n_slots):
        candidates = np.flatnonzero(scenario.schedule.interest_masks[q])
        if per_slot > len(candidates):
            raise PreconditionError(f"slot {q} band holds {len(candidates)} grid angles, {per_slot} targets requested")
        picks = np.linspace(0, len(candidates) - 1, per_slot + 2)[1:-1] if per_slot else []
        slot_members = []
        for position in picks:
            distance = rng.uniform(*distance_range)
            speed = rng.uniform(*speed_range)
            gain = 1.0 / (config.pathloss(2.0 * distance))
            slot_members.append(len(angles))
            angles.append(float(scenario.grid.angles[candidates[int(round(position))]]))
            amplitudes.append(np.sqrt(gain) * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi)))
            delays.append(2.0 * distance / speed_of_light)
            dopplers.append(2.0 * speed / speed_of_light)
        members.append(tuple(slot_members))
    targets = TargetSet(tuple(angles), tuple(amplitudes), tuple(delays), tuple(dopplers), tuple(members))
    targets.validate(config)
    return targets


def _matrix_sqrt(covariances: np.ndarray) -> np.ndarray:
    eigenvalues, eigenvectors = np.linalg.eigh(covariances)
    return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))[..., None, :]


def _cscg(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def transmit_realizations(solution: BeamformingSolution, rng: np.random.Generator) -> np.ndarray:
    """x = sum_k w_k s_k + s_0 with s_0 ~ CN(0, W_0), shape (N, L, N_t)."""
    if np.any(info_rank_ratio(solution) > RANK_RATIO):
        raise PreconditionError("information covariances are not rank one; extract beams first")
    n_sc, n_sym, n_streams, n_tx = solution.covariances.shape[:4]
    info_beams = beams(solution)
    symbols = _cscg(rng, (n_sc, n_sym, n_streams - 1))
    sensing = np.einsum('nlij,nlj->nli', _matrix_sqrt(solution.covariances[:, :, 0]),
                        _cscg(rng, (n_sc, n_sym, n_tx)))
    return np.einsum('nlki,nlk->nli', info_beams, symbols) + sensing


def synthesize_echo(solution: Optional[BeamformingSolution], targets: TargetSet, scenario: Scenario,
                    rng_seed: int = 0, transmit: Optional[np.ndarray] = None,
                    noise_power: Optional[float] = None) -> EchoFrame:
    """Echo y_{n,l} = sum_k e^{j2pi(l nu f_c T - n tau df)} b_k a(theta_k) v(theta_k)^T x_{n,l} + z."""
    config = scenario.config
    rng = np.random.default_rng(rng_seed)
    if transmit is None:
        if solution is None:
            raise PreconditionError("either a solution or explicit transmit samples is required")
        transmit = transmit_realizations(solution, rng)
    transmit = np.asarray(transmit, dtype=complex)
    n_sc, n_sym = transmit.shape[:2]
    noise_power = config.noise_power_sense if noise_power is None else noise_power
    received = np.zeros((n_sc, n_sym, config.n_rx), dtype=complex)
    if len(targets):
        tx_steering = steering_matrix(targets.angles, transmit.shape[-1], config.spacing_ratio)
        rx_steering = steering_matrix(targets.angles, config.n_rx, config.spacing_ratio)
        projections = np.einsum('nli,ki->nlk', transmit, tx_steering)
        l = np.arange(n_sym)[None, :, None]
        n = np.arange(n_sc)[:, None, None]
        doppler = np.asarray(targets.dopplers)[None, None, :]
        delay = np.asarray(targets.delays)[None, None, :]
        phases = np.exp(1j * 2 * np.pi * (l * doppler * config.carrier_freq * config.symbol_duration
                                          - n * delay * config.subcarrier_spacing))
        weights = phases * projections * np.asarray(targets.amplitudes)[None, None, :]
        received = np.einsum('nlk,kr->nlr', weights, rx_steering)
    if noise_power > 0:
        received = received + np.sqrt(noise_power) * _cscg(rng, received.shape)
    return EchoFrame(received, transmit, scenario.schedule.slot_symbols, config.spacing_ratio)


def music_spectrum(frame: EchoFrame, slot: int, expected_targets: int, grid: AngularGrid) -> np.ndarray:
    """1 / ||U_0^H a(theta)||^2 over the grid from the slot's sample covariance."""
    if not 0 <= slot < len(frame.slot_symbols):
        raise IndexError(f"slot {slot} outside 0..{len(frame.slot_symbols) - 1}")
    if expected_targets >= frame.n_rx:
        raise PreconditionError(f"MUSIC resolves fewer than N_r = {frame.n_rx} targets")
    snapshots = frame.received[:, list(frame.slot_symbols[slot])].reshape(-1, frame.n_rx)
    if snapshots.shape[0] < max(expected_targets, 1):
        raise PreconditionError("not enough snapshots in the slot")
    covariance = snapshots.T @ np.conj(snapshots)
    _, eigenvectors = np.linalg.eigh(covariance)
    noise_subspace = eigenvectors[:, :frame.n_rx - expected_targets]
    steering = steering_matrix(grid.angles, frame.n_rx, frame.spacing_ratio)
    denominator = np.sum(np.abs(np.conj(steering) @ noise_subspace) ** 2, axis=1)
    return 1.0 / np.maximum(denominator, np.finfo(float).tiny)


def local_maxima(values: np.ndarray) -> List[int]:
    """Indices of strict local maxima; plateaus report their first index, endpoints have one neighbor."""
    peaks = []
    start, size = 0, len(values)
    while start < size:
        end = start
        while end + 1 < size and values[end + 1] == values[start]:
            end += 1
        left_ok = start == 0 or values[start - 1] < values[start]
        right_ok = end == size - 1 or values[end + 1] < values[start]
        if left_ok and right_ok:
            peaks.append(start)
        start = end + 1
    return peaks


def music_doa(frame: EchoFrame, slot: int, expected_targets: int, grid: AngularGrid) -> List[float]:
    """Grid angles of the ``expected_targets`` largest MUSIC peaks, in increasing order."""
    if expected_targets == 0:
        return []
    spectrum = music_spectrum(frame, slot, expected_targets, grid)
    peaks = sorted(local_maxima(spectrum), key=lambda m: (-spectrum[m], m))
    chosen = sorted(peaks[:expected_targets])
    angles = [float(grid.angles[m]) for m in chosen]
    if len(chosen) < expected_targets:
        raise EstimationDegenerateError(
            f"MUSIC found {len(chosen)} peaks in slot {slot}, {expected_targets} expected", partial=angles)
    return angles


def delay_doppler_indices(frame: EchoFrame, theta_hat: float, tx_power: float) -> Tuple[int, int]:
    """Signed (i, j) bin of the 2-D likelihood peak for a beam-normalized target return."""
    n_sc, n_sym = frame.received.shape[:2]
    tx_steering = steering_matrix([theta_hat], frame.transmit.shape[-1], frame.spacing_ratio)[0]
    rx_steering = steering_matrix([theta_hat], frame.n_rx, frame.spacing_ratio)[0]
    reference = frame.transmit @ tx_steering
    usable = np.abs(reference) >= 1e-9 * np.sqrt(tx_power / n_sc)
    if not np.any(usable):
        raise EstimationDegenerateError("reference signal vanishes on every cell")
    combined = frame.received @ np.conj(rx_steering)
    ratios = np.where(usable, combined / np.where(usable, reference, 1.0), 0.0)
    likelihood = n_sc * np.fft.ifft(np.fft.fft(ratios, axis=1), axis=0)
    i_hat, j_hat = np.unravel_index(int(np.argmax(np.abs(likelihood) ** 2)), likelihood.shape)
    if j_hat > n_sym / 2:
        j_hat -= n_sym
    return int(i_hat), int(j_hat)


def estimate_delay_doppler(frame: EchoFrame, solution: Optional[BeamformingSolution], theta_hat: float,
                           scenario: Scenario) -> Tuple[float, float]:
    """Delay (s) and normalized Doppler of the target at ``theta_hat``."""
    config = scenario.config
    n_sc, n_sym = frame.received.shape[:2]
    tx_power = config.tx_power
    if solution is not None:
        tx_power = float(np.mean(np.real(np.trace(solution.covariances, axis1=-2, axis2=-1)).sum(axis=(0, 2))))
    i_hat, j_hat = delay_doppler_indices(frame, theta_hat, tx_power)
    delay = i_hat / (n_sc * config.subcarrier_spacing)
    doppler = j_hat / (n_sym * config.carrier_freq * config.symbol_duration)
    return delay, doppler


def match_angles(truth: Sequence[float], estimates: Sequence[float]) -> List[Tuple[int, int]]:
    """Greedy global-nearest pairs (truth index, estimate index)."""
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if truth.size == 0 or estimates.size == 0:
        return []
    distance = np.abs(truth[:, None] - estimates[None, :])
    pairs = []
    for _ in range(min(truth.size, estimates.size)):
        i, j = np.unravel_index(int(np.argmin(distance)), distance.shape)
        pairs.append((int(i), int(j)))
        distance[i, :] = np.inf
        distance[:, j] = np.inf
    return sorted(pairs)


def angle_mse(truth: Union[TargetSet, Sequence[float]], estimates: Sequence[float]) -> Tuple[float, bool]:
    """Mean squared angle error over matched pairs, and whether the counts disagreed."""
    truth_angles = list(truth.angles) if isinstance(truth, TargetSet) else list(truth)
    pairs = match_angles(truth_angles, estimates)
    mismatch = len(truth_angles) != len(estimates)
    if not pairs:
        return (0.0 if not truth_angles and not estimates else float('nan')), mismatch
    errors = [(truth_angles[i] - estimates[j]) ** 2 for i, j in pairs]
    return float(np.mean(errors)), mismatch


def evaluate_sensing(solution: BeamformingSolution, scenario: Scenario, targets: TargetSet,
                     rng_seed: int = 0, noise_power: Optional[float] = None) -> EstimationReport:
    """Per-slot MUSIC, per-target delay/Doppler, then the angle MSE against ground truth."""
    targets.validate(scenario.config)
    frame = synthesize_echo(solution, targets, scenario, rng_seed, noise_power=noise_power)
    count = len(targets)
    angles = [float('nan')] * count
    delays = [float('nan')] * count
    dopplers = [float('nan')] * count
    mismatch = False
    for slot, members in enumerate(targets.slot_members):
        if not members:
            continue
        try:
            estimates = music_doa(frame, slot, len(members), scenario.grid)
        except EstimationDegenerateError as exc:
            logger.warning("%s", exc)
            estimates = exc.partial
            mismatch = True
        slot_truth = [targets.angles[k] for k in members]
        for i, j in match_angles(slot_truth, estimates):
            angles[members[i]] = estimates[j]
    for k, angle in enumerate(angles):
        if np.isnan(angle):
            continue
        delays[k], dopplers[k] = estimate_delay_doppler(frame, solution, angle, scenario)
    found = [k for k in range(count) if not np.isnan(angles[k])]
    mismatch = mismatch or len(found) != count
    mse = float(np.mean([(targets.angles[k] - angles[k]) ** 2 for k in found])) if found else float('nan')
    return EstimationReport(targets, angles, delays, dopplers, mse, mismatch)
