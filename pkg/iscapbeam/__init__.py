"""
iscapbeam - transmit beamforming for OFDM integrated sensing, communication and powering.

Designs per-subcarrier, per-symbol transmit covariances that match a time-varying
radar scan beampattern while meeting information-receiver rate and energy-receiver
harvested-power requirements, with SCA and FP solvers, heuristic baselines,
rank-one extraction and a MUSIC sensing evaluation.
"""

__version__ = "1.0.0"

from .baselines import round_robin_solve, sensing_only_solve, time_switch_solve, zf_solve
from .errors import IscapError
from .formulation import Requirements
from .joint_optimizer import OptimizerSettings, optimize
from .metrics import BeamformingSolution, PerformanceReport, evaluate
from .rank1_extraction import extract, verify_equivalence
from .scenario import ScenarioConfig, UserGeometry, build_scenario, generate_channels

__all__ = [
    'BeamformingSolution',
    'IscapError',
    'OptimizerSettings',
    'PerformanceReport',
    'Requirements',
    'ScenarioConfig',
    'UserGeometry',
    'build_scenario',
    'evaluate',
    'extract',
    'generate_channels',
    'optimize',
    'round_robin_solve',
    'sensing_only_solve',
    'time_switch_solve',
    'verify_equivalence',
    'zf_solve',
]
