import numpy as np
import pytest

from conftest import random_psd
from iscapbeam.conic import ConicProgram, lift_hermitian, solve
from iscapbeam.errors import PreconditionError, RequirementsInfeasibleError
from iscapbeam.formulation import (BlockLayout, JointModel, Requirements, check_rate_screen,
                                   matching_coefficients, user_coefficients)
from iscapbeam.metrics import BeamformingSolution, average_rates, matching_error, power_residual
from iscapbeam.scenario import ScenarioConfig, steering_matrix


def test_block_layouts(desk_scenario):
    assert BlockLayout.per_symbol(3).blocks == ((0,), (1,), (2,))
    assert BlockLayout.single(3).blocks == ((0, 1, 2),)
    slots = BlockLayout.per_slot(desk_scenario.schedule)
    assert slots.n_blocks == 4
    np.testing.assert_array_equal(slots.weights, [2, 2, 2, 2])
    assert slots.representatives() == (0, 2, 4, 6)
    keyed = BlockLayout.from_keys(['a', 'b', 'a', 'c'])
    assert keyed.blocks == ((0, 2), (1,), (3,))


def test_block_layout_rejects_gaps():
    with pytest.raises(PreconditionError):
        BlockLayout(((0,), (2,)))
    with pytest.raises(PreconditionError):
        BlockLayout(((0, 1), ()))


def test_block_average_and_expand():
    layout = BlockLayout(((0, 1), (2,)))
    values = np.arange(6.0).reshape(2, 3)
    averaged = layout.average(values)
    np.testing.assert_allclose(averaged, [[0.5, 2.0], [3.5, 5.0]])
    np.testing.assert_allclose(layout.expand(averaged), [[0.5, 0.5, 2.0], [3.5, 3.5, 5.0]])


def test_matching_coefficients_reproduce_gain():
    rng = np.random.default_rng(2)
    steering = steering_matrix([-0.7, 0.1, 1.2], 4)
    covariance = random_psd(rng, 4)
    coefficients = matching_coefficients(steering)
    inner = np.real(np.einsum('mij,ij->m', np.conj(coefficients), covariance))
    direct = np.real(np.einsum('mi,ij,mj->m', steering, covariance, np.conj(steering)))
    np.testing.assert_allclose(inner, direct)


def test_user_coefficients_reproduce_received_power():
    rng = np.random.default_rng(4)
    channels = rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))
    covariance = random_psd(rng, 4)
    coefficients = user_coefficients(channels)
    inner = np.real(np.einsum('nuij,ij->nu', np.conj(coefficients), covariance))
    direct = np.real(np.einsum('nui,ij,nuj->nu', np.conj(channels), covariance, channels))
    np.testing.assert_allclose(inner, direct)


def test_requirements_validation():
    assert Requirements.from_config(ScenarioConfig(rate_requirement=0.5)).rate == 0.5
    with pytest.raises(PreconditionError):
        Requirements(rate=-1.0)


def test_rate_screen(desk_scenario, desk_channels):
    check_rate_screen(desk_scenario, desk_channels, Requirements(rate=0.5, power=1e-7))
    with pytest.raises(RequirementsInfeasibleError):
        check_rate_screen(desk_scenario, desk_channels, Requirements(rate=100.0))
    with pytest.raises(RequirementsInfeasibleError):
        check_rate_screen(desk_scenario, desk_channels, Requirements(power=1.0))


@pytest.mark.slow
def test_model_objective_is_the_physical_matching_error(tiny_scenario, tiny_channels):
    layout = BlockLayout.per_slot(tiny_scenario.schedule)
    model = JointModel(ConicProgram('sensing'), tiny_scenario, tiny_channels, layout)
    model.add_matching_objective()
    model.add_power_equality()
    result = solve(model.program)
    assert result.optimal
    solution = model.assemble(result)
    config = tiny_scenario.config
    np.testing.assert_allclose(power_residual(solution, config.tx_power), 0.0, atol=1e-6)
    raw = matching_error(solution, tiny_scenario.desired_per_symbol(), tiny_scenario.steering())
    assert raw == pytest.approx(model.matching_error(result), rel=1e-4, abs=1e-8)


def test_assemble_rejects_unsolved(tiny_scenario, tiny_channels):
    model = JointModel(ConicProgram('unsolved'), tiny_scenario, tiny_channels,
                       BlockLayout.single(tiny_scenario.config.n_symbols))
    from iscapbeam.conic import SolveResult
    with pytest.raises(PreconditionError):
        model.assemble(SolveResult('infeasible'))


def random_blocks(rng, n_sc, n_blocks, n_streams, n_tx):
    """Full-rank normalized covariances with unit total trace per block."""
    blocks = np.array([[[random_psd(rng, n_tx) for _ in range(n_streams)] for _ in range(n_blocks)]
                       for _ in range(n_sc)])
    blocks = 0.5 * (blocks + np.conj(np.swapaxes(blocks, -1, -2)))
    traces = np.real(np.trace(blocks, axis1=-2, axis2=-1)).sum(axis=(0, 2))
    return blocks / traces[None, :, None, None, None]


def test_linearized_rate_is_a_tangent_minorant(desk_scenario, desk_channels):
    rng = np.random.default_rng(3)
    config = desk_scenario.config
    layout = BlockLayout.per_slot(desk_scenario.schedule)
    n_streams = desk_channels.n_ir + 1
    base = random_blocks(rng, config.n_subcarriers, layout.n_blocks, n_streams, config.n_tx)
    direction = random_blocks(rng, config.n_subcarriers, layout.n_blocks, n_streams, config.n_tx)

    def physical(blocks):
        return BeamformingSolution(config.tx_power * layout.expand(blocks))

    program = ConicProgram('tangent')
    model = JointModel(program, desk_scenario, desk_channels, layout)
    signal, total = model.local_powers(physical(base))
    model.add_linearized_rates(signal, total, 0.0)
    scale = config.n_symbols * config.n_subcarriers * np.log(2.0)

    def surrogate(blocks, k):
        for (n, b, s), variable in model.vars.items():
            variable.lifted.value = lift_hermitian(blocks[n, b, s])
        record = next(r for r in program.records if r.label == f"rate_{k}")
        # lhs >= rhs is stored as rhs - lhs <= 0
        return -float(np.sum(record.constraints[0].expr.value))

    def exact(blocks, k):
        return scale * average_rates(physical(blocks), desk_channels, config.noise_power_comm)[k]

    step = 1e-5
    for k in range(desk_channels.n_ir):
        assert surrogate(base, k) == pytest.approx(exact(base, k), rel=1e-9)
        moved = base + step * direction
        slope = (surrogate(moved, k) - surrogate(base, k)) / step
        exact_slope = (exact(moved, k) - exact(base, k)) / step
        assert slope == pytest.approx(exact_slope, rel=5e-3, abs=1e-6)
        far = base + 0.5 * direction
        assert surrogate(far, k) <= exact(far, k) + 1e-9
