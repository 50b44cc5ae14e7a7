import textwrap

import pandas as pd
import pytest
from click.testing import CliRunner

from iscapbeam import cli as cli_module
from iscapbeam.cli import cli
from iscapbeam.errors import PreconditionError
from iscapbeam.config import load_spec

TINY_SPEC = """\
methods: [zf, sensing_only]
scenario:
  n_tx: 3
  n_rx: 4
  n_symbols: 2
  n_subcarriers: 2
  n_slots: 2
  n_grid: 12
geometry:
  ir_angles_deg: [-50.0]
  ir_distances_m: [110.0]
  er_angles_deg: [-40.0]
  er_distances_m: [25.0]
beam:
  centers_deg: [-45.0, 45.0]
  width_deg: 60.0
requirements:
  rate_kbps: 120.0
  power_uw: 0.01
sweep:
  trials: 2
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ('ISCAP_WORKERS', 'ISCAP_OUTPUT_DIR', 'ISCAP_SOLVER', 'ISCAP_VERBOSE'):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def runner():
    return CliRunner()


def test_version(runner):
    result = runner.invoke(cli, ['--version'])
    assert result.exit_code == 0
    assert '1.0.0' in result.output


def test_init_writes_a_loadable_spec(runner, tmp_path):
    path = tmp_path / 'experiment.yaml'
    result = runner.invoke(cli, ['init', str(path)])
    assert result.exit_code == 0
    assert path.exists()
    assert load_spec(str(path)).methods == ['sca', 'zf', 'round_robin', 'sensing_only']


def test_init_keeps_existing_file_unless_confirmed(runner, tmp_path):
    path = tmp_path / 'experiment.yaml'
    path.write_text('methods: [zf]\n', encoding='utf-8')
    result = runner.invoke(cli, ['init', str(path)], input='n\n')
    assert result.exit_code == 0
    assert 'cancelled' in result.output
    assert path.read_text(encoding='utf-8') == 'methods: [zf]\n'
    assert runner.invoke(cli, ['init', str(path), '--force']).exit_code == 0
    assert 'round_robin' in path.read_text(encoding='utf-8')


def test_run_rejects_bad_spec(runner, tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text(textwrap.dedent("""\
        scenario:
          n_antennas: 8
        """), encoding='utf-8')
    result = runner.invoke(cli, ['run', str(path)])
    assert result.exit_code == 2


def test_run_rejects_missing_spec(runner, tmp_path):
    assert runner.invoke(cli, ['run', str(tmp_path / 'absent.yaml')]).exit_code == 2


def test_run_rejects_unknown_method(runner, tmp_path):
    path = tmp_path / 'spec.yaml'
    path.write_text(TINY_SPEC, encoding='utf-8')
    result = runner.invoke(cli, ['run', str(path), '--methods', 'zf,gradient', '--out', str(tmp_path / 'out')])
    assert result.exit_code == 2


def test_run_reports_broken_precondition_as_internal_error(runner, tmp_path, monkeypatch):
    def broken(spec):
        raise PreconditionError("covariance (0, 0, 1) has eigenvalue -1e-3 below PSD tolerance")

    monkeypatch.setattr(cli_module, 'run_experiment', broken)
    path = tmp_path / 'spec.yaml'
    path.write_text(TINY_SPEC, encoding='utf-8')
    result = runner.invoke(cli, ['run', str(path), '--out', str(tmp_path / 'out')])
    assert result.exit_code == 1
    assert 'Internal error' in result.output


def test_aggregate_writes_plot_data(runner, tmp_path):
    results = tmp_path / 'results.csv'
    pd.DataFrame({
        'axis_value': [0.0, 0.0, 0.0], 'seed': [0, 1, 2], 'method': ['zf'] * 3,
        'norm_error': [1.0, 2.0, 3.0], 'min_rate': [1.0] * 3, 'min_er_power': [1e-7] * 3,
        'status': ['optimal'] * 3, 'seconds': [None] * 3,
    }).to_csv(results, index=False)
    result = runner.invoke(cli, ['aggregate', str(results)])
    assert result.exit_code == 0
    plot = pd.read_csv(tmp_path / 'plot_data.csv')
    assert plot.loc[0, 'mean'] == pytest.approx(2.0)
    assert plot.loc[0, 'std'] == pytest.approx(1.0)
    assert plot.loc[0, 'status'] == 'ok'


def test_aggregate_rejects_foreign_csv(runner, tmp_path):
    path = tmp_path / 'other.csv'
    path.write_text('a,b\n1,2\n', encoding='utf-8')
    assert runner.invoke(cli, ['aggregate', str(path)]).exit_code == 2


@pytest.mark.slow
def test_tiny_run_writes_every_table(runner, tmp_path):
    spec = tmp_path / 'spec.yaml'
    spec.write_text(TINY_SPEC, encoding='utf-8')
    out = tmp_path / 'out'
    result = runner.invoke(cli, ['run', str(spec), '--out', str(out)])
    assert result.exit_code == 0, result.output
    for name in ('results', 'timings', 'plot_data', 'beampattern', 'metrics', 'traces', 'verification'):
        assert (out / f'{name}.csv').exists()
    frame = pd.read_csv(out / 'results.csv')
    assert len(frame) == 2 * 2
    assert list(frame.columns) == ['axis_value', 'seed', 'method', 'norm_error', 'min_rate',
                                   'min_er_power', 'status', 'seconds']
    assert sorted(frame['seed'].unique()) == [0, 1]


@pytest.mark.slow
def test_repeated_runs_are_byte_identical(runner, tmp_path):
    spec = tmp_path / 'spec.yaml'
    spec.write_text(TINY_SPEC, encoding='utf-8')
    for name in ('first', 'second'):
        assert runner.invoke(cli, ['run', str(spec), '--out', str(tmp_path / name)]).exit_code == 0
    for table in ('results.csv', 'plot_data.csv', 'beampattern.csv', 'metrics.csv'):
        assert (tmp_path / 'first' / table).read_bytes() == (tmp_path / 'second' / table).read_bytes()
