import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import DESK, DESK_CENTERS, random_solution
from iscapbeam.baselines import round_robin_solve, sensing_only_solve, time_switch_solve, zf_solve
from iscapbeam.errors import PreconditionError, RequirementsInfeasibleError
from iscapbeam.formulation import Requirements
from iscapbeam.joint_optimizer import (FpAuxiliaries, IterationTrace, OptimizerSettings, fp_objective_terms,
                                       fp_update_alpha, fp_update_beta, optimize, symmetrize_over_slot,
                                       uniform_isotropic)
from iscapbeam.metrics import BeamformingSolution, evaluate, matching_error, sinr_table
from iscapbeam.rank1_extraction import extract, verify_equivalence
from iscapbeam.scenario import ChannelSet, ScenarioConfig, build_scenario, generate_channels


def scalar_case(signal, interference):
    covariances = np.array([interference, signal], dtype=complex).reshape(1, 1, 2, 1, 1)
    channels = ChannelSet(np.ones((1, 1, 1), dtype=complex), np.ones((1, 1, 1), dtype=complex))
    return BeamformingSolution(covariances), channels


def test_iteration_trace():
    trace = IterationTrace()
    for objective in (3.0, 2.0, 2.0):
        trace.append(objective, 0.1)
    assert trace.iterations == 3
    assert trace.is_monotone()
    assert trace.rows()[1] == {'iteration': 2, 'objective': 2.0, 'seconds': 0.1}
    trace.append(2.5, 0.1)
    assert not trace.is_monotone()


@pytest.mark.parametrize('kwargs', [
    {'method': 'newton'},
    {'initial_point_source': 'random'},
    {'max_iterations': 0},
    {'convergence_rel_tol': 0.0},
])
def test_settings_validation(kwargs):
    with pytest.raises(PreconditionError):
        OptimizerSettings(**kwargs)


def test_settings_normalize_method_case(desk_scenario):
    settings = OptimizerSettings(method='FP', slot_collapse=False)
    assert settings.method == 'fp'
    assert settings.layout(desk_scenario).n_blocks == desk_scenario.config.n_symbols


def test_fp_auxiliaries_must_be_non_negative():
    with pytest.raises(PreconditionError):
        FpAuxiliaries(np.array([-1.0]), np.array([0.0]))


def test_alpha_is_the_sinr(desk_channels):
    solution = random_solution(np.random.default_rng(5), 4, 8, 2, 4)
    np.testing.assert_allclose(fp_update_alpha(solution, desk_channels, 1e-10),
                               sinr_table(solution, desk_channels, 1e-10))


def test_beta_example():
    solution, channels = scalar_case(signal=1.0, interference=0.0)
    alpha = fp_update_alpha(solution, channels, 1.0)
    np.testing.assert_allclose(alpha, [[[1.0]]])
    np.testing.assert_allclose(fp_update_beta(solution, channels, alpha, 1.0), [[[1.0 / np.sqrt(2.0)]]])


@pytest.mark.parametrize('signal, interference, noise', [(1.0, 0.0, 1.0), (2.0, 0.5, 0.1), (0.3, 1.0, 2.0)])
def test_auxiliaries_maximize_the_surrogate(signal, interference, noise):
    solution, channels = scalar_case(signal, interference)
    total = signal + interference
    alpha = fp_update_alpha(solution, channels, noise)
    beta = fp_update_beta(solution, channels, alpha, noise)

    def surrogate(a, b):
        return float(fp_objective_terms(np.array(a), np.array(b), np.array(signal), np.array(total), noise))

    best_beta = minimize_scalar(lambda b: -surrogate(alpha.item(), b), bounds=(0.0, 10.0), method='bounded',
                                options={'xatol': 1e-10})
    assert best_beta.x == pytest.approx(beta.item(), abs=1e-6)

    def beta_star(a):
        return np.sqrt(1.0 + a) * np.sqrt(signal) / (total + noise)

    best_alpha = minimize_scalar(lambda a: -surrogate(a, beta_star(a)), bounds=(0.0, 50.0), method='bounded',
                                 options={'xatol': 1e-10})
    assert best_alpha.x == pytest.approx(alpha.item(), abs=1e-5)
    assert surrogate(alpha.item(), beta.item()) == pytest.approx(np.log1p(alpha.item()))


def test_symmetrize_keeps_slot_constant_solutions(desk_scenario):
    solution = uniform_isotropic(desk_scenario, 2)
    np.testing.assert_allclose(symmetrize_over_slot(solution, desk_scenario.schedule).covariances,
                               solution.covariances)


def test_symmetrize_never_increases_matching_error(desk_scenario):
    solution = random_solution(np.random.default_rng(6), 4, 8, 2, 4).with_zeta(0.5)
    steering, desired = desk_scenario.steering(), desk_scenario.desired_per_symbol()
    averaged = symmetrize_over_slot(solution, desk_scenario.schedule)
    assert matching_error(averaged, desired, steering) <= matching_error(solution, desired, steering) + 1e-12


def test_infeasible_rate_is_screened(tiny_scenario, tiny_channels):
    with pytest.raises(RequirementsInfeasibleError):
        optimize(OptimizerSettings(), tiny_scenario, tiny_channels, Requirements(rate=100.0))


@pytest.mark.slow
def test_without_requirements_matches_sensing_only(tiny_scenario, tiny_channels):
    settings = OptimizerSettings(method='sca', initial_point_source='uniform_isotropic')
    relaxed, trace = optimize(settings, tiny_scenario, tiny_channels, Requirements())
    bound = evaluate(sensing_only_solve(tiny_scenario, tiny_channels), tiny_scenario, tiny_channels)
    joint = evaluate(relaxed, tiny_scenario, tiny_channels)
    assert joint.matching_error == pytest.approx(bound.matching_error, rel=1e-3, abs=1e-8)
    assert joint.matching_error >= bound.matching_error * (1 - 1e-5) - 1e-12
    assert trace.termination_reason == 'converged'


@pytest.mark.slow
@pytest.mark.parametrize('method', ['sca', 'fp'])
@pytest.mark.parametrize('case, requirements, max_iterations', [
    ('tiny', Requirements(rate=0.5, power=1e-8), 15),
    ('desk', Requirements(rate=0.25, power=1e-7), 50),
])
def test_joint_design_meets_requirements(method, case, requirements, max_iterations, request):
    scenario = request.getfixturevalue(f"{case}_scenario")
    channels = request.getfixturevalue(f"{case}_channels")
    settings = OptimizerSettings(method=method, max_iterations=max_iterations)
    relaxed, trace = optimize(settings, scenario, channels, requirements)
    assert 1 <= trace.iterations <= max_iterations
    assert trace.is_monotone(slack=1e-7)
    solution = extract(relaxed, channels, scenario.config.tx_power)
    report = verify_equivalence(relaxed, solution, scenario, channels, requirements)
    assert report.passed, report.failures


def seeded_desk(desk_geometry, seed):
    config = ScenarioConfig(**DESK, rng_seed=seed)
    return (build_scenario(config, desk_geometry, DESK_CENTERS, np.radians(30.0)),
            generate_channels(config, desk_geometry))


def joint_error(method, scenario, channels, requirements, **kwargs):
    relaxed, _ = optimize(OptimizerSettings(method=method, **kwargs), scenario, channels, requirements)
    return evaluate(relaxed, scenario, channels).normalized_error


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_sca_and_fp_reach_similar_errors(seed, desk_geometry):
    scenario, channels = seeded_desk(desk_geometry, seed)
    requirements = Requirements(rate=0.25, power=1e-7)
    sca = joint_error('sca', scenario, channels, requirements)
    fp = joint_error('fp', scenario, channels, requirements)
    assert abs(sca - fp) <= 0.05 * max(sca, fp)


@pytest.mark.slow
def test_slot_collapse_does_not_lose_accuracy(desk_scenario, desk_channels):
    requirements = Requirements(rate=0.25, power=1e-7)
    collapsed = joint_error('sca', desk_scenario, desk_channels, requirements, slot_collapse=True)
    resolved = joint_error('sca', desk_scenario, desk_channels, requirements, slot_collapse=False)
    assert collapsed <= resolved * (1 + 1e-4) + 1e-12


@pytest.mark.slow
def test_joint_design_beats_the_baselines(desk_scenario, desk_channels):
    requirements = Requirements(rate=0.5, power=1e-7)
    joint = joint_error('sca', desk_scenario, desk_channels, requirements)
    rivals = {
        'zf': evaluate(zf_solve(desk_scenario, desk_channels, requirements), desk_scenario, desk_channels),
        'round_robin': evaluate(round_robin_solve(desk_scenario, desk_channels, requirements),
                                desk_scenario, desk_channels),
        'time_switching': time_switch_solve(desk_scenario, desk_channels, requirements,
                                            max_iterations=10).performance(),
    }
    for name, report in rivals.items():
        assert joint <= report.normalized_error * (1 + 1e-5) + 1e-12, name


@pytest.mark.slow
@pytest.mark.parametrize('field, levels', [
    ('rate', [0.0, 0.25, 0.5]),
    ('power', [0.0, 5e-8, 1e-7]),
])
def test_error_grows_with_the_requirements(field, levels, desk_scenario, desk_channels):
    base = {'rate': 0.25, 'power': 1e-7}
    errors = []
    for level in levels:
        requirements = Requirements(**{**base, field: level})
        errors.append(joint_error('sca', desk_scenario, desk_channels, requirements))
    for lower, higher in zip(errors, errors[1:]):
        assert higher >= lower * (1 - 1e-6) - 1e-12
