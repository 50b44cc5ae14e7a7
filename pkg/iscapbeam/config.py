"""
Configuration management for iscapbeam.
Handles loading, validation and unit conversion of experiment spec files.
"""

import copy
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .conic import LOG_POLICIES, SolverSettings
from .errors import ConfigError, InvalidConfigError, PreconditionError
from .formulation import Requirements
from .joint_optimizer import INITIAL_POINTS, OptimizerSettings
from .scenario import ScenarioConfig, UserGeometry, db_to_linear, dbm_to_watts, kbps_to_bps_per_hz

logger = logging.getLogger(__name__)

METHODS = ('sca', 'fp', 'zf', 'round_robin', 'time_switching', 'sensing_only')
SWEEP_AXES = ('gamma_ir', 'gamma_er', 'p0', 'k_ir', 'n_tx')

# IR placements (degrees, meters) used when a K_IR sweep needs more users than configured.
DEFAULT_IR_PLACEMENTS = [
    (-50.0, 110.0), (-15.0, 90.0), (15.0, 100.0), (45.0, 80.0),
    (-30.0, 95.0), (30.0, 105.0), (0.0, 85.0), (60.0, 100.0),
]


@dataclass
class ScenarioSection:
    """Array, OFDM numerology, power and channel parameters in file units."""
    n_tx: int = 4
    n_rx: int = 8
    n_symbols: int = 8
    n_subcarriers: int = 4
    n_cp: int = 4
    n_slots: int = 4
    n_grid: int = 24
    carrier_freq_ghz: float = 28.0
    subcarrier_spacing_khz: float = 120.0
    symbol_duration_us: float = 8.333
    spacing_ratio: float = 0.5
    tx_power_dbm: float = 30.0
    noise_comm_dbm: float = -70.0
    noise_sense_dbm: float = -70.0
    rician_factor: float = 20.0
    pathloss_ref_db: float = 30.0
    pathloss_ref_dist_m: float = 1.0
    pathloss_exponent: float = 3.0
    seed: int = 0


@dataclass
class GeometrySection:
    """User positions; angles in degrees, distances in meters."""
    ir_angles_deg: List[float] = field(default_factory=lambda: [-50.0, -15.0])
    ir_distances_m: List[float] = field(default_factory=lambda: [110.0, 90.0])
    er_angles_deg: List[float] = field(default_factory=lambda: [-40.0])
    er_distances_m: List[float] = field(default_factory=lambda: [25.0])


@dataclass
class BeamSection:
    """Per-slot scan centers and the common band width, in degrees."""
    centers_deg: List[float] = field(default_factory=lambda: [-45.0, -15.0, 15.0, 45.0])
    width_deg: float = 30.0


@dataclass
class RequirementsSection:
    """Rate per IR in Kbps and harvested power per ER in microwatts."""
    rate_kbps: float = 240.0
    power_uw: float = 0.1


@dataclass
class OptimizerSection:
    """Iteration control shared by SCA and FP."""
    max_iterations: int = 50
    convergence_rel_tol: float = 1e-3
    initial_point: str = 'zf'
    slot_collapse: bool = True
    feasibility_max_iterations: int = 30
    time_switching_iterations: int = 30


@dataclass
class SolverSection:
    """Conic backend and tolerances."""
    backend: str = 'CLARABEL'
    fallback: Optional[str] = 'SCS'
    feasibility_tol: float = 1e-8
    optimality_tol: float = 1e-8
    max_iterations: int = 500
    accept_inaccurate: bool = True
    log_policy: str = 'native'


@dataclass
class SweepSection:
    """Optional parameter sweep; no axis means a single point."""
    axis: Optional[str] = None
    values: List[float] = field(default_factory=list)
    trials: int = 1


@dataclass
class SensingSection:
    """Target placement for the sensing evaluation."""
    enabled: bool = False
    targets_per_slot: int = 1
    distance_range_m: List[float] = field(default_factory=lambda: [20.0, 60.0])
    speed_range_mps: List[float] = field(default_factory=lambda: [-20.0, 20.0])


@dataclass
class OutputSection:
    """Where and how results are written."""
    directory: str = './results'
    workers: int = 1
    record_timing: bool = False
    verify_extraction: bool = True
    verbose: bool = False


@dataclass
class ExperimentSpec:
    """Main experiment specification."""
    methods: List[str] = field(default_factory=lambda: ['sca', 'zf', 'round_robin', 'sensing_only'])
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    beam: BeamSection = field(default_factory=BeamSection)
    requirements: RequirementsSection = field(default_factory=RequirementsSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    solver: SolverSection = field(default_factory=SolverSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    sensing: SensingSection = field(default_factory=SensingSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def bandwidth(self) -> float:
        return self.scenario.n_subcarriers * self.scenario.subcarrier_spacing_khz * 1e3

    def to_geometry(self) -> UserGeometry:
        g = self.geometry
        return UserGeometry(
            ir_angles=tuple(np.radians(g.ir_angles_deg)),
            ir_distances=tuple(g.ir_distances_m),
            er_angles=tuple(np.radians(g.er_angles_deg)),
            er_distances=tuple(g.er_distances_m),
        )

    def to_scenario_config(self, seed: Optional[int] = None) -> ScenarioConfig:
        """Convert file units to the linear SI units the library works in."""
        s = self.scenario
        return ScenarioConfig(
            n_tx=s.n_tx, n_rx=s.n_rx, n_symbols=s.n_symbols, n_subcarriers=s.n_subcarriers,
            n_cp=s.n_cp, n_slots=s.n_slots, n_grid=s.n_grid,
            carrier_freq=s.carrier_freq_ghz * 1e9,
            subcarrier_spacing=s.subcarrier_spacing_khz * 1e3,
            symbol_duration=s.symbol_duration_us * 1e-6,
            spacing_ratio=s.spacing_ratio,
            tx_power=dbm_to_watts(s.tx_power_dbm),
            noise_power_comm=dbm_to_watts(s.noise_comm_dbm),
            noise_power_sense=dbm_to_watts(s.noise_sense_dbm),
            rician_factor=s.rician_factor,
            pathloss_ref_db=s.pathloss_ref_db,
            pathloss_ref_dist=s.pathloss_ref_dist_m,
            pathloss_exponent=s.pathloss_exponent,
            rate_requirement=kbps_to_bps_per_hz(self.requirements.rate_kbps, self.bandwidth),
            power_requirement=self.requirements.power_uw * 1e-6,
            rng_seed=s.seed if seed is None else seed,
        )

    def to_requirements(self) -> Requirements:
        return Requirements(rate=kbps_to_bps_per_hz(self.requirements.rate_kbps, self.bandwidth),
                            power=self.requirements.power_uw * 1e-6)

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(**asdict(self.solver))

    def optimizer_settings(self, method: str) -> OptimizerSettings:
        o = self.optimizer
        return OptimizerSettings(
            method=method,
            max_iterations=o.max_iterations,
            convergence_rel_tol=o.convergence_rel_tol,
            initial_point_source=o.initial_point,
            slot_collapse=o.slot_collapse,
            feasibility_max_iterations=o.feasibility_max_iterations,
            solver=self.solver_settings(),
        )

    def centers(self) -> List[float]:
        return [float(np.radians(c)) for c in self.beam.centers_deg]

    def width(self) -> float:
        return float(np.radians(self.beam.width_deg))

    def sweep_points(self) -> List[Optional[float]]:
        if not self.sweep.axis:
            return [None]
        return list(self.sweep.values)

    def at_point(self, value: Optional[float]) -> 'ExperimentSpec':
        """Copy of this spec with the sweep axis set to ``value``."""
        spec = copy.deepcopy(self)
        axis = spec.sweep.axis
        if value is None or not axis:
            return spec
        if axis == 'gamma_ir':
            spec.requirements.rate_kbps = float(value)
        elif axis == 'gamma_er':
            spec.requirements.power_uw = float(value)
        elif axis == 'p0':
            spec.scenario.tx_power_dbm = float(value)
        elif axis == 'k_ir':
            count = int(value)
            placements = list(zip(spec.geometry.ir_angles_deg, spec.geometry.ir_distances_m))
            for placement in DEFAULT_IR_PLACEMENTS:
                if len(placements) >= count:
                    break
                if placement not in placements:
                    placements.append(placement)
            placements = placements[:count]
            spec.geometry.ir_angles_deg = [a for a, _ in placements]
            spec.geometry.ir_distances_m = [d for _, d in placements]
        elif axis == 'n_tx':
            spec.scenario.n_tx = int(value)
            spec.scenario.n_rx = max(spec.scenario.n_rx, int(value))
        return spec


def _key_lines(text: str) -> Dict[str, int]:
    """1-based line of every 'section.key' in a YAML document."""
    lines: Dict[str, int] = {}

    def walk(node, prefix: str):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                key = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines[key] = key_node.start_mark.line + 1
                walk(value_node, key)

    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, '')
    return lines


_SECTIONS = {
    'scenario': ScenarioSection, 'geometry': GeometrySection, 'beam': BeamSection,
    'requirements': RequirementsSection, 'optimizer': OptimizerSection, 'solver': SolverSection,
    'sweep': SweepSection, 'sensing': SensingSection, 'output': OutputSection,
}


class ConfigManager:
    """Manages experiment spec loading and validation."""

    def __init__(self, config_path: str = 'experiment.yaml'):
        self.config_path = config_path
        self.config = ExperimentSpec()
        self._lines: Dict[str, int] = {}

    def load_config(self) -> ExperimentSpec:
        """Load the spec from file and environment variables, then validate it."""
        if os.path.exists(self.config_path):
            self._load_from_file()
        else:
            raise ConfigError("spec file not found", path=self.config_path)

        self._load_from_env()
        self._validate_config()
        return self.config

    def _error(self, message: str, key: Optional[str] = None) -> ConfigError:
        line = None
        while key and line is None:
            line = self._lines.get(key)
            key = key.rpartition('.')[0]
        return ConfigError(message, path=self.config_path, line=line)

    def _load_from_file(self):
        """Load configuration from YAML file."""
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                text = f.read()
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, 'problem_mark', None)
            raise ConfigError(f"invalid YAML: {getattr(e, 'problem', e)}", path=self.config_path,
                              line=mark.line + 1 if mark is not None else None) from e
        except OSError as e:
            raise ConfigError(f"cannot read spec: {e}", path=self.config_path) from e

        self._lines = _key_lines(text)
        if not data:
            return
        if not isinstance(data, dict):
            raise self._error("spec must be a mapping of sections")

        for key, value in data.items():
            if key == 'methods':
                if isinstance(value, str):
                    value = [m.strip() for m in value.split(',') if m.strip()]
                if not isinstance(value, list):
                    raise self._error("methods must be a list", 'methods')
                self.config.methods = [str(m).lower() for m in value]
            elif key in _SECTIONS:
                setattr(self.config, key, self._section(key, value))
            else:
                raise self._error(f"unknown section '{key}'", key)

    def _section(self, name: str, data: Any):
        cls = _SECTIONS[name]
        if data is None:
            return cls()
        if not isinstance(data, dict):
            raise self._error(f"section '{name}' must be a mapping", name)
        known = cls.__dataclass_fields__
        for key in data:
            if key not in known:
                raise self._error(f"unknown key '{key}' in section '{name}'", f"{name}.{key}")
        try:
            return cls(**data)
        except TypeError as e:
            raise self._error(f"section '{name}': {e}", name) from e

    def _load_from_env(self):
        """Load overrides from environment variables."""
        if os.getenv('ISCAP_WORKERS'):
            try:
                self.config.output.workers = int(os.getenv('ISCAP_WORKERS'))
            except ValueError:
                logger.warning("Ignoring non-integer ISCAP_WORKERS=%s", os.getenv('ISCAP_WORKERS'))

        if os.getenv('ISCAP_OUTPUT_DIR'):
            self.config.output.directory = os.getenv('ISCAP_OUTPUT_DIR')

        if os.getenv('ISCAP_SOLVER'):
            self.config.solver.backend = os.getenv('ISCAP_SOLVER').upper()

        if os.getenv('ISCAP_VERBOSE'):
            self.config.output.verbose = os.getenv('ISCAP_VERBOSE').lower() in ('true', '1', 'yes')

    def _validate_config(self):
        """Validate configuration values and unit conversions."""
        spec = self.config
        if not spec.methods:
            raise self._error("at least one method is required", 'methods')
        for method in spec.methods:
            if method not in METHODS:
                raise self._error(f"unknown method '{method}'. Valid methods: {list(METHODS)}", 'methods')

        g = spec.geometry
        if len(g.ir_angles_deg) != len(g.ir_distances_m):
            raise self._error("ir_angles_deg and ir_distances_m differ in length", 'geometry.ir_angles_deg')
        if len(g.er_angles_deg) != len(g.er_distances_m):
            raise self._error("er_angles_deg and er_distances_m differ in length", 'geometry.er_angles_deg')
        if len(spec.beam.centers_deg) != spec.scenario.n_slots:
            raise self._error(f"{len(spec.beam.centers_deg)} beam centers for {spec.scenario.n_slots} slots",
                              'beam.centers_deg')

        r = spec.requirements
        if r.rate_kbps < 0 or r.power_uw < 0:
            raise self._error("requirements must be non-negative", 'requirements')

        sweep = spec.sweep
        if sweep.trials < 1:
            raise self._error("trials must be at least 1", 'sweep.trials')
        if sweep.axis:
            if sweep.axis not in SWEEP_AXES:
                raise self._error(f"unknown sweep axis '{sweep.axis}'. Valid axes: {list(SWEEP_AXES)}",
                                  'sweep.axis')
            if not sweep.values:
                raise self._error("a sweep axis needs values", 'sweep.values')
            if any(b <= a for a, b in zip(sweep.values, sweep.values[1:])):
                raise self._error("sweep values must be strictly increasing", 'sweep.values')
            if sweep.axis in ('k_ir', 'n_tx') and any(int(v) != v or v < 1 for v in sweep.values):
                raise self._error(f"{sweep.axis} values must be positive integers", 'sweep.values')
            if sweep.axis == 'k_ir' and max(sweep.values) > len(DEFAULT_IR_PLACEMENTS):
                raise self._error(f"k_ir sweeps are limited to {len(DEFAULT_IR_PLACEMENTS)} users",
                                  'sweep.values')

        if spec.optimizer.initial_point not in INITIAL_POINTS:
            raise self._error(f"initial_point must be one of {list(INITIAL_POINTS)}", 'optimizer.initial_point')
        if spec.solver.log_policy not in LOG_POLICIES:
            raise self._error(f"log_policy must be one of {list(LOG_POLICIES)}", 'solver.log_policy')

        s = spec.sensing
        if s.targets_per_slot < 0:
            raise self._error("targets_per_slot must be non-negative", 'sensing.targets_per_slot')
        for name in ('distance_range_m', 'speed_range_mps'):
            bounds = getattr(s, name)
            if len(bounds) != 2 or bounds[0] > bounds[1]:
                raise self._error(f"{name} must be [low, high]", f"sensing.{name}")
        if s.distance_range_m[0] <= 0:
            raise self._error("target distances must be positive", 'sensing.distance_range_m')

        if spec.output.workers < 1:
            raise self._error("workers must be at least 1", 'output.workers')

        for value in spec.sweep_points():
            point = spec.at_point(value)
            try:
                point.to_scenario_config()
                point.to_geometry()
                point.optimizer_settings('sca')
            except (InvalidConfigError, PreconditionError) as e:
                key = 'sweep.values' if value is not None else 'scenario'
                raise self._error(str(e), key) from e

    def save_config(self, config: ExperimentSpec = None):
        """Save the specification to file."""
        if config is None:
            config = self.config
        config_data = asdict(config)
        try:
            with open(self.config_path, 'w', encoding='utf-8') as f:
                yaml.safe_dump(config_data, f, default_flow_style=False, indent=2, sort_keys=False)
        except OSError as e:
            raise ConfigError(f"cannot write spec: {e}", path=self.config_path) from e


def load_spec(path: str) -> ExperimentSpec:
    """Shortcut for ConfigManager(path).load_config()."""
    return ConfigManager(path).load_config()


def unit_summary(spec: ExperimentSpec) -> List[Tuple[str, str]]:
    """Converted values worth echoing before a run."""
    config = spec.to_scenario_config()
    return [
        ('P_0', f"{config.tx_power:.4g} W"),
        ('noise (comm / sense)', f"{config.noise_power_comm:.3g} / {config.noise_power_sense:.3g} W"),
        ('K_ref', f"{db_to_linear(config.pathloss_ref_db):.4g}"),
        ('rate requirement', f"{config.rate_requirement:.4g} bps/Hz"),
        ('power requirement', f"{config.power_requirement:.4g} W"),
        ('bandwidth', f"{config.bandwidth / 1e3:.4g} kHz"),
    ]
