import numpy as np
import pytest

from conftest import random_solution
from iscapbeam.errors import EquivalenceViolationError
from iscapbeam.formulation import Requirements
from iscapbeam.metrics import BeamformingSolution
from iscapbeam.rank1_extraction import beams, extract, info_rank_ratio, verify_equivalence


@pytest.fixture
def relaxed(desk_config):
    rng = np.random.default_rng(7)
    return random_solution(rng, desk_config.n_subcarriers, desk_config.n_symbols, 2,
                           desk_config.n_tx, desk_config.tx_power).with_zeta(0.3)


def test_extraction_preserves_signal_and_sum(relaxed, desk_channels):
    bar = extract(relaxed, desk_channels)
    h = desk_channels.ir_channels
    for k in range(2):
        hat_signal = np.einsum('ni,nlij,nj->nl', np.conj(h[:, k]), relaxed.covariances[:, :, k + 1], h[:, k])
        bar_signal = np.einsum('ni,nlij,nj->nl', np.conj(h[:, k]), bar.covariances[:, :, k + 1], h[:, k])
        np.testing.assert_allclose(np.real(bar_signal), np.real(hat_signal), rtol=1e-9)
    np.testing.assert_allclose(bar.transmit_covariance(), relaxed.transmit_covariance(), atol=1e-12)
    assert bar.zeta == relaxed.zeta


def test_extracted_streams_are_dominated_and_rank_one(relaxed, desk_channels):
    bar = extract(relaxed, desk_channels)
    assert np.max(info_rank_ratio(bar)) < 1e-8
    assert np.max(info_rank_ratio(relaxed)) > 1e-2
    gap = relaxed.covariances[:, :, 1:] - bar.covariances[:, :, 1:]
    traces = np.real(np.trace(relaxed.covariances[:, :, 1:], axis1=-2, axis2=-1))
    assert np.all(np.linalg.eigvalsh(gap)[..., 0] >= -1e-10 * traces)
    sensing = np.linalg.eigvalsh(bar.covariances[:, :, 0])[..., 0]
    assert np.all(sensing >= -1e-10)


def test_zero_stream_stays_zero(relaxed, desk_channels):
    covariances = np.array(relaxed.covariances)
    covariances[:, :, 2] = 0.0
    bar = extract(BeamformingSolution(covariances, relaxed.zeta), desk_channels, tx_power=1.0)
    assert np.all(bar.covariances[:, :, 2] == 0.0)
    np.testing.assert_allclose(bar.transmit_covariance(), covariances.sum(axis=2), atol=1e-12)


def test_rank_one_input_is_unchanged(desk_channels):
    rng = np.random.default_rng(11)
    vectors = rng.standard_normal((4, 8, 2, 4)) + 1j * rng.standard_normal((4, 8, 2, 4))
    covariances = np.zeros((4, 8, 3, 4, 4), dtype=complex)
    covariances[:, :, 1:] = np.einsum('nlki,nlkj->nlkij', vectors, np.conj(vectors))
    covariances[:, :, 0] = 0.1 * np.eye(4)
    solution = BeamformingSolution(covariances)
    bar = extract(solution, desk_channels)
    np.testing.assert_allclose(bar.covariances, covariances, atol=1e-9)
    recovered = beams(bar)
    np.testing.assert_allclose(np.abs(np.einsum('nlki,nlki->nlk', np.conj(recovered), vectors)),
                               np.sum(np.abs(vectors) ** 2, axis=-1), rtol=1e-8)


def test_verification_passes_on_extraction(relaxed, desk_scenario, desk_channels):
    bar = extract(relaxed, desk_channels)
    report = verify_equivalence(relaxed, bar, desk_scenario, desk_channels,
                                requirements=Requirements(), raise_on_failure=True)
    assert report.passed
    assert {'sum', 'signal', 'interference', 'psd', 'rank', 'matching_error', 'rate',
            'harvested', 'power', 'rate_requirement', 'power_requirement'} <= set(report.residuals)
    assert all(row['passed'] for row in report.rows())


def test_verification_of_identical_rank_one_solutions(relaxed, desk_scenario, desk_channels):
    bar = extract(relaxed, desk_channels)
    assert verify_equivalence(bar, bar, desk_scenario, desk_channels).passed


def test_verification_flags_indefinite_sensing_stream(relaxed, desk_scenario, desk_channels):
    bar = extract(relaxed, desk_channels)
    covariances = np.array(bar.covariances)
    covariances[0, 0, 0] -= (np.linalg.eigvalsh(covariances[0, 0, 0])[0] + 1e-3) * np.eye(4)
    broken = BeamformingSolution(covariances, bar.zeta)
    report = verify_equivalence(relaxed, broken, desk_scenario, desk_channels)
    assert 'psd' in report.failures
    assert not report.passed
    with pytest.raises(EquivalenceViolationError) as info:
        verify_equivalence(relaxed, broken, desk_scenario, desk_channels, raise_on_failure=True)
    assert 'psd' in info.value.report.failures


def test_verification_flags_relaxed_solution_rank(relaxed, desk_scenario, desk_channels):
    report = verify_equivalence(relaxed, relaxed, desk_scenario, desk_channels)
    assert report.failures == ['rank']
