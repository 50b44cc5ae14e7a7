"""
Physical scenario construction for iscapbeam.
Array steering, angular grids, slot partitions, desired beampatterns and
Rician channels with distance-dependent path loss.
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .errors import InvalidConfigError

logger = logging.getLogger(__name__)

# Band membership is a closed interval; this absorbs degree->radian round-off.
_EDGE_TOLERANCE = 1e-12


def db_to_linear(value_db: float) -> float:
    """Convert a power ratio in dB to linear scale."""
    return float(10.0 ** (value_db / 10.0))


def dbm_to_watts(value_dbm: float) -> float:
    """Convert dBm to watts (30 dBm -> 1 W)."""
    return float(10.0 ** ((value_dbm - 30.0) / 10.0))


def kbps_to_bps_per_hz(rate_kbps: float, bandwidth_hz: float) -> float:
    """Convert a throughput requirement to spectral efficiency over the band."""
    return float(rate_kbps * 1000.0 / bandwidth_hz)


@dataclass(frozen=True)
class ScenarioConfig:
    """All physical and dimensional parameters, in linear SI units."""
    n_tx: int = 16
    n_rx: int = 32
    n_symbols: int = 256
    n_subcarriers: int = 16
    n_cp: int = 4
    n_slots: int = 4
    n_grid: int = 48
    carrier_freq: float = 28e9
    subcarrier_spacing: float = 120e3
    symbol_duration: float = 8.333e-6
    spacing_ratio: float = 0.5
    tx_power: float = 1.0
    noise_power_comm: float = 1e-10
    noise_power_sense: float = 1e-10
    rician_factor: float = 20.0
    pathloss_ref_db: float = 30.0
    pathloss_ref_dist: float = 1.0
    pathloss_exponent: float = 3.0
    rate_requirement: float = 0.0
    power_requirement: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        counts = {
            'n_tx': self.n_tx, 'n_rx': self.n_rx, 'n_symbols': self.n_symbols,
            'n_subcarriers': self.n_subcarriers, 'n_slots': self.n_slots,
            'n_grid': self.n_grid,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise InvalidConfigError(f"{name} must be a positive integer, got {value}")
        if self.n_cp < 0:
            raise InvalidConfigError(f"n_cp must be non-negative, got {self.n_cp}")
        if self.n_rx < self.n_tx:
            raise InvalidConfigError(
                f"n_rx ({self.n_rx}) must be at least n_tx ({self.n_tx}) for sensing")
        if self.n_symbols % self.n_slots:
            raise InvalidConfigError(
                f"n_slots ({self.n_slots}) must divide n_symbols ({self.n_symbols})")
        positives = {
            'carrier_freq': self.carrier_freq, 'subcarrier_spacing': self.subcarrier_spacing,
            'symbol_duration': self.symbol_duration, 'spacing_ratio': self.spacing_ratio,
            'tx_power': self.tx_power, 'noise_power_comm': self.noise_power_comm,
            'noise_power_sense': self.noise_power_sense, 'rician_factor': self.rician_factor,
            'pathloss_ref_dist': self.pathloss_ref_dist,
            'pathloss_exponent': self.pathloss_exponent,
        }
        for name, value in positives.items():
            if not np.isfinite(value) or value <= 0:
                raise InvalidConfigError(f"{name} must be strictly positive, got {value}")
        if self.rate_requirement < 0 or self.power_requirement < 0:
            raise InvalidConfigError("requirements must be non-negative")

    @property
    def bandwidth(self) -> float:
        """Total bandwidth B = N * subcarrier spacing."""
        return self.n_subcarriers * self.subcarrier_spacing

    @property
    def symbols_per_slot(self) -> int:
        return self.n_symbols // self.n_slots

    def pathloss(self, distance: float) -> float:
        """Linear path loss K_ref * (D / D_ref) ** eta."""
        if distance <= 0:
            raise InvalidConfigError(f"distance must be positive, got {distance}")
        return db_to_linear(self.pathloss_ref_db) * (distance / self.pathloss_ref_dist) ** self.pathloss_exponent


@dataclass(frozen=True)
class UserGeometry:
    """Angles (radians) and distances (meters) of the IRs and ERs."""
    ir_angles: Tuple[float, ...]
    ir_distances: Tuple[float, ...]
    er_angles: Tuple[float, ...]
    er_distances: Tuple[float, ...]

    def __post_init__(self):
        for name in ('ir_angles', 'ir_distances', 'er_angles', 'er_distances'):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.ir_angles) != len(self.ir_distances):
            raise InvalidConfigError("ir_angles and ir_distances differ in length")
        if len(self.er_angles) != len(self.er_distances):
            raise InvalidConfigError("er_angles and er_distances differ in length")
        if self.n_ir < 1 or self.n_er < 1:
            raise InvalidConfigError("at least one IR and one ER are required")
        for angle in self.ir_angles + self.er_angles:
            if abs(angle) > np.pi / 2 + _EDGE_TOLERANCE:
                raise InvalidConfigError(f"user angle {np.degrees(angle):.3f} deg outside [-90, 90]")
        for distance in self.ir_distances + self.er_distances:
            if distance <= 0:
                raise InvalidConfigError(f"user distance must be positive, got {distance}")

    @property
    def n_ir(self) -> int:
        return len(self.ir_angles)

    @property
    def n_er(self) -> int:
        return len(self.er_angles)


@dataclass(frozen=True)
class AngularGrid:
    """Quantized sensing angles, strictly increasing over [-pi/2, pi/2]."""
    angles: np.ndarray

    def __post_init__(self):
        angles = np.array(self.angles, dtype=float)
        if angles.ndim != 1 or angles.size < 2 or np.any(np.diff(angles) <= 0):
            raise InvalidConfigError("grid angles must be a strictly increasing vector")
        angles.setflags(write=False)
        object.__setattr__(self, 'angles', angles)

    def __len__(self) -> int:
        return self.angles.size

    @property
    def spacing(self) -> float:
        return float(self.angles[1] - self.angles[0])

    @property
    def degrees(self) -> np.ndarray:
        return np.degrees(self.angles)


@dataclass(frozen=True)
class SlotSchedule:
    """Symbol sets per slot and the interest mask of each slot over the grid."""
    slot_symbols: Tuple[Tuple[int, ...], ...]
    interest_masks: np.ndarray

    def __post_init__(self):
        masks = np.array(self.interest_masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[0] != len(self.slot_symbols):
            raise InvalidConfigError("one interest mask per slot is required")
        masks.setflags(write=False)
        object.__setattr__(self, 'interest_masks', masks)

    @property
    def n_slots(self) -> int:
        return len(self.slot_symbols)

    @property
    def n_symbols(self) -> int:
        return sum(len(symbols) for symbols in self.slot_symbols)

    def symbol_slots(self) -> np.ndarray:
        """Slot index of every symbol."""
        slots = np.empty(self.n_symbols, dtype=int)
        for q, symbols in enumerate(self.slot_symbols):
            slots[list(symbols)] = q
        return slots

    def slot_of(self, symbol: int) -> int:
        for q, symbols in enumerate(self.slot_symbols):
            if symbol in symbols:
                return q
        raise IndexError(f"symbol {symbol} outside schedule")

    @property
    def covers_grid(self) -> bool:
        return bool(np.all(self.interest_masks.any(axis=0)))


@dataclass(frozen=True)
class ChannelSet:
    """Per-subcarrier channels: ir (N, K_IR, N_t) and er (N, K_ER, N_t)."""
    ir_channels: np.ndarray
    er_channels: np.ndarray

    def __post_init__(self):
        for name in ('ir_channels', 'er_channels'):
            value = np.array(getattr(self, name), dtype=complex)
            if value.ndim != 3:
                raise InvalidConfigError(f"{name} must be (subcarrier, user, antenna)")
            if not np.all(np.isfinite(value)):
                raise InvalidConfigError(f"{name} contains non-finite entries")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.ir_channels.shape[0] != self.er_channels.shape[0]:
            raise InvalidConfigError("IR and ER channels disagree on subcarrier count")

    @property
    def n_subcarriers(self) -> int:
        return self.ir_channels.shape[0]

    @property
    def n_ir(self) -> int:
        return self.ir_channels.shape[1]

    @property
    def n_er(self) -> int:
        return self.er_channels.shape[1]

    @property
    def n_tx(self) -> int:
        return self.ir_channels.shape[2]


@dataclass(frozen=True)
class Scenario:
    """Everything the optimizers need besides the random channels."""
    config: ScenarioConfig
    geometry: UserGeometry
    grid: AngularGrid
    schedule: SlotSchedule
    desired: np.ndarray
    centers: Tuple[float, ...] = field(default_factory=tuple)
    width: float = 0.0

    def desired_per_symbol(self) -> np.ndarray:
        """P_l(theta_m) as an (L, M) table."""
        return self.desired[self.schedule.symbol_slots()]

    def steering(self) -> np.ndarray:
        """Transmit steering vectors over the grid, shape (M, N_t)."""
        return steering_matrix(self.grid.angles, self.config.n_tx, self.config.spacing_ratio)


def steering_vector(theta: float, count: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """ULA response with entries exp(j 2 pi d/lambda m sin(theta))."""
    if count < 1:
        raise InvalidConfigError(f"antenna count must be positive, got {count}")
    m = np.arange(count)
    return np.exp(1j * 2 * np.pi * spacing_ratio * m * np.sin(theta))


def steering_matrix(thetas: Sequence[float], count: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """Stack of steering vectors, one row per angle."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    m = np.arange(count)
    return np.exp(1j * 2 * np.pi * spacing_ratio * np.outer(np.sin(thetas), m))


def make_angular_grid(m: int) -> AngularGrid:
    """Uniform grid of m angles including both endpoints -pi/2 and pi/2."""
    if m < 2:
        raise InvalidConfigError(f"angular grid needs at least 2 points, got {m}")
    return AngularGrid(np.linspace(-np.pi / 2, np.pi / 2, m))


def slot_partition(l: int, q: int) -> Tuple[Tuple[int, ...], ...]:
    """Split symbols 0..l-1 into q equal contiguous blocks."""
    if q < 1 or l < 1 or l % q:
        raise InvalidConfigError(f"{q} slots do not evenly divide {l} symbols")
    per_slot = l // q
    return tuple(tuple(range(j * per_slot, (j + 1) * per_slot)) for j in range(q))


def _band_masks(grid: AngularGrid, centers: Sequence[float], width: float) -> np.ndarray:
    centers = np.asarray(centers, dtype=float)
    offsets = np.abs(grid.angles[None, :] - centers[:, None])
    return offsets <= width / 2 + _EDGE_TOLERANCE


def make_schedule(n_symbols: int, grid: AngularGrid, centers: Sequence[float], width: float) -> SlotSchedule:
    """Slot partition plus the per-slot interest bands."""
    centers = list(centers)
    if len(centers) < 1:
        raise InvalidConfigError("at least one slot center is required")
    if any(b < a for a, b in zip(centers, centers[1:])):
        raise InvalidConfigError("slot centers must increase from slot to slot")
    schedule = SlotSchedule(slot_partition(n_symbols, len(centers)), _band_masks(grid, centers, width))
    if not schedule.covers_grid:
        logger.debug("Interest bands leave %d grid angles unscanned",
                     int(np.sum(~schedule.interest_masks.any(axis=0))))
    return schedule


def desired_beampattern(grid: AngularGrid, centers: Sequence[float], width: float,
                        schedule: SlotSchedule) -> np.ndarray:
    """Rectangular desired gain per (slot, grid angle): 1 inside the band, else 0."""
    if len(centers) != schedule.n_slots:
        raise InvalidConfigError(
            f"{len(centers)} beam centers given for {schedule.n_slots} slots")
    if width < 0:
        raise InvalidConfigError(f"beam width must be non-negative, got {width}")
    return _band_masks(grid, centers, width).astype(float)


def generate_channels(config: ScenarioConfig, geometry: UserGeometry) -> ChannelSet:
    """Rician channels with a flat LoS term and i.i.d. CSCG scattering per subcarrier."""
    rng = np.random.default_rng(config.rng_seed)
    kappa = config.rician_factor
    los_weight = np.sqrt(kappa / (1.0 + kappa))
    nlos_weight = np.sqrt(1.0 / (1.0 + kappa))

    def draw(angles: Sequence[float], distances: Sequence[float]) -> np.ndarray:
        users = []
        for angle, distance in zip(angles, distances):
            amplitude = np.sqrt(1.0 / config.pathloss(distance))
            los = np.conj(steering_vector(angle, config.n_tx, config.spacing_ratio))
            shape = (config.n_subcarriers, config.n_tx)
            scatter = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
            users.append(amplitude * (los_weight * los[None, :] + nlos_weight * scatter))
        return np.stack(users, axis=1)

    ir = draw(geometry.ir_angles, geometry.ir_distances)
    er = draw(geometry.er_angles, geometry.er_distances)
    return ChannelSet(ir_channels=ir, er_channels=er)


def build_scenario(config: ScenarioConfig, geometry: UserGeometry,
                   centers: Sequence[float], width: float) -> Scenario:
    """Assemble grid, schedule and desired pattern for a configuration."""
    if len(centers) != config.n_slots:
        raise InvalidConfigError(
            f"{len(centers)} beam centers given for {config.n_slots} slots")
    grid = make_angular_grid(config.n_grid)
    schedule = make_schedule(config.n_symbols, grid, centers, width)
    desired = desired_beampattern(grid, centers, width, schedule)
    return Scenario(config=config, geometry=geometry, grid=grid, schedule=schedule,
                    desired=desired, centers=tuple(float(c) for c in centers), width=float(width))
