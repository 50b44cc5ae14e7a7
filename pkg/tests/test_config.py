import textwrap

import pytest

from iscapbeam.config import ConfigManager, ExperimentSpec, load_spec, unit_summary
from iscapbeam.errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ('ISCAP_WORKERS', 'ISCAP_OUTPUT_DIR', 'ISCAP_SOLVER', 'ISCAP_VERBOSE'):
        monkeypatch.delenv(name, raising=False)


def write_spec(tmp_path, body):
    path = tmp_path / 'spec.yaml'
    path.write_text(textwrap.dedent(body), encoding='utf-8')
    return str(path)


def test_defaults_convert_to_si(tmp_path):
    spec = load_spec(write_spec(tmp_path, "methods: [zf]\n"))
    config = spec.to_scenario_config()
    assert config.tx_power == pytest.approx(1.0)
    assert config.noise_power_comm == pytest.approx(1e-10)
    assert config.subcarrier_spacing == pytest.approx(120e3)
    assert config.rate_requirement == pytest.approx(0.5)
    assert config.power_requirement == pytest.approx(1e-7)
    assert spec.to_requirements().rate == pytest.approx(0.5)
    assert spec.methods == ['zf']


def test_methods_accept_a_comma_string(tmp_path):
    spec = load_spec(write_spec(tmp_path, "methods: 'SCA, sensing_only'\n"))
    assert spec.methods == ['sca', 'sensing_only']


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        load_spec(str(tmp_path / 'absent.yaml'))


def test_unknown_key_reports_its_line(tmp_path):
    path = write_spec(tmp_path, """\
        methods: [zf]
        scenario:
          n_tx: 4
          n_antennas: 8
        """)
    with pytest.raises(ConfigError) as info:
        load_spec(path)
    assert info.value.line == 4
    assert str(info.value).startswith(f"{path}:4:")
    assert 'n_antennas' in str(info.value)


def test_unknown_section(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_spec(write_spec(tmp_path, "methods: [zf]\nplotting:\n  dpi: 300\n"))
    assert info.value.line == 2


def test_invalid_yaml_reports_its_line(tmp_path):
    path = write_spec(tmp_path, "methods: [zf]\nscenario:\n  n_tx: [4\n")
    with pytest.raises(ConfigError) as info:
        load_spec(path)
    assert info.value.line is not None
    assert 'invalid YAML' in str(info.value)


@pytest.mark.parametrize('body, key', [
    ("methods: [gradient]\n", 'methods'),
    ("beam:\n  centers_deg: [0.0]\n", 'beam'),
    ("sweep:\n  axis: gamma_ir\n  values: [240, 120]\n", 'sweep'),
    ("sweep:\n  axis: k_ir\n  values: [1, 9]\n", 'sweep'),
    ("sweep:\n  axis: n_tx\n  values: [2.5]\n", 'sweep'),
    ("sweep:\n  axis: bandwidth\n  values: [1]\n", 'sweep'),
    ("scenario:\n  n_symbols: 10\n", 'scenario'),
    ("optimizer:\n  initial_point: random\n", 'optimizer'),
    ("solver:\n  log_policy: taylor\n", 'solver'),
    ("output:\n  workers: 0\n", 'output'),
])
def test_validation_errors(tmp_path, body, key):
    with pytest.raises(ConfigError) as info:
        load_spec(write_spec(tmp_path, body))
    assert info.value.line is not None


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv('ISCAP_WORKERS', '3')
    monkeypatch.setenv('ISCAP_OUTPUT_DIR', str(tmp_path / 'env_out'))
    monkeypatch.setenv('ISCAP_SOLVER', 'scs')
    monkeypatch.setenv('ISCAP_VERBOSE', 'yes')
    spec = load_spec(write_spec(tmp_path, "methods: [zf]\n"))
    assert spec.output.workers == 3
    assert spec.output.directory == str(tmp_path / 'env_out')
    assert spec.solver.backend == 'SCS'
    assert spec.output.verbose is True


def test_sweep_points():
    spec = ExperimentSpec()
    assert spec.sweep_points() == [None]
    spec.sweep.axis, spec.sweep.values = 'gamma_er', [0.05, 0.1]
    assert spec.sweep_points() == [0.05, 0.1]
    assert spec.at_point(0.05).requirements.power_uw == 0.05
    assert spec.requirements.power_uw == 0.1


def test_k_ir_sweep_extends_placements():
    spec = ExperimentSpec()
    spec.sweep.axis, spec.sweep.values = 'k_ir', [1, 4]
    assert spec.at_point(1).geometry.ir_angles_deg == [-50.0]
    wide = spec.at_point(4)
    assert wide.geometry.ir_angles_deg == [-50.0, -15.0, 15.0, 45.0]
    assert wide.to_geometry().n_ir == 4


def test_n_tx_sweep_keeps_enough_receivers():
    spec = ExperimentSpec()
    spec.sweep.axis, spec.sweep.values = 'n_tx', [4, 12]
    point = spec.at_point(12)
    assert point.scenario.n_tx == 12
    assert point.scenario.n_rx == 12
    assert point.to_scenario_config().n_tx == 12


def test_p0_sweep_changes_power():
    spec = ExperimentSpec()
    spec.sweep.axis, spec.sweep.values = 'p0', [20.0, 30.0]
    assert spec.at_point(20.0).to_scenario_config().tx_power == pytest.approx(0.1)


def test_save_and_reload(tmp_path):
    path = str(tmp_path / 'saved.yaml')
    spec = ExperimentSpec(methods=['fp', 'time_switching'])
    spec.sweep.axis, spec.sweep.values, spec.sweep.trials = 'gamma_ir', [0.0, 120.0], 2
    ConfigManager(path).save_config(spec)
    loaded = load_spec(path)
    assert loaded == spec


def test_unit_summary_mentions_requirements():
    labels = dict(unit_summary(ExperimentSpec()))
    assert labels['P_0'] == '1 W'
    assert 'bps/Hz' in labels['rate requirement']
