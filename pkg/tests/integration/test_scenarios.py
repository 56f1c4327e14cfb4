"""
Интеграционные тесты: сценарии целиком через ScenarioService.
"""

import json
from pathlib import Path

import pytest

from src.config.scenario import load_scenario, parse_scenario
from src.core.exceptions import ConfigurationError, NewtonNonconvergenceError
from src.services.scenario_service import ScenarioService
from src.utils.log_manager import MemoryLogStorage, RunLogManager

SCENARIO_DIR = Path(__file__).parent.parent.parent / 'src' / 'config' / 'scenarios'

SMALL_BAR = [
    'geometry.box_max=[2.0]',
    'geometry.h=[0.25]',
    'geometry.particles_per_cell=[2]',
    'schedule.steps=4',
    'schedule.output_steps=[2]',
]

SETTLING_BAR = """
scenario:
  kind: inverse
  name: inverse-settling-bar
geometry:
  dim: 1
  box_min: [0 m]
  box_max: [1 m]
  h: [0.25 m]
  particles_per_cell: [2]
material:
  kind: hencky
  density: 80 kg/m3
  E: 10 kPa
  nu: 0.0
schedule:
  steps: 3
loads:
  gravity: [-9.81 m/s2]
inverse:
  problem: settling-bar
  loss: terminal-displacement
  initial_factor: 1.5
  lr: 0.4
  max_iters: 20
"""


@pytest.fixture
def service():
    return ScenarioService(RunLogManager(storage=MemoryLogStorage()))


def test_bar_run_writes_outputs(service, tmp_path):
    """Тест прогона столба: файлы результатов и сводка."""
    config = load_scenario(SCENARIO_DIR / 'bar_elastic.yaml', SMALL_BAR)

    report = service.run(config, output_dir=tmp_path / 'bar')

    out = tmp_path / 'bar'
    for name in ('scenario.yaml', 'steps.csv', 'iterations.csv', 'particles_step_002.csv',
                 'particles_final.csv', 'stress_profile.csv', 'summary.json'):
        assert (out / name).exists(), name
    summary = json.loads((out / 'summary.json').read_text(encoding='utf-8'))
    assert summary['steps'] == 4
    assert summary['summary']['stress_error'] < 0.1
    assert {c['name'] for c in summary['checks']} >= {'stress_error', 'max_newton_iterations'}
    assert report.outputs[-1] == str(out / 'summary.json')


def test_saved_scenario_reproduces_config(service, tmp_path):
    """Тест: scenario.yaml в каталоге результатов разбирается в тот же сценарий."""
    config = load_scenario(SCENARIO_DIR / 'bar_elastic.yaml', SMALL_BAR)

    service.run(config, output_dir=tmp_path / 'bar')

    saved = parse_scenario((tmp_path / 'bar' / 'scenario.yaml').read_text(encoding='utf-8'))
    assert saved == config


def test_default_output_dir_from_settings(service, tmp_path):
    """Тест каталога по умолчанию: MPM_OUTPUT_DIR/<имя сценария>."""
    config = load_scenario(SCENARIO_DIR / 'bar_elastic.yaml', SMALL_BAR + ['schedule.steps=1'])

    service.run(config)

    assert (tmp_path / 'output' / 'bar-elastic' / 'summary.json').exists()


def test_invalid_scenario_not_run(service, tmp_path):
    """Тест: сценарий с ошибками проверки не запускается."""
    config = load_scenario(SCENARIO_DIR / 'bar_elastic.yaml', SMALL_BAR + ['solver.tolerance=2.0'])

    with pytest.raises(ConfigurationError):
        service.run(config, output_dir=tmp_path / 'bar')

    assert not (tmp_path / 'bar').exists()


def test_newton_failure_closes_session(tmp_path):
    """Тест: сбой Ньютона пробрасывается, сессия помечается как failed."""
    manager = RunLogManager(storage=MemoryLogStorage())
    config = load_scenario(SCENARIO_DIR / 'bar_elastic.yaml', SMALL_BAR + ['solver.max_iterations=1'])

    with pytest.raises(NewtonNonconvergenceError):
        ScenarioService(manager).run(config, output_dir=tmp_path / 'bar')

    assert manager.get_active_sessions() == []
    assert any(log['message'] == 'Сессия закрыта (failed)' for log in manager.get_logs())


def test_strategy_override(service, tmp_path):
    """Тест переопределения стратегии якобиана."""
    config = load_scenario(SCENARIO_DIR / 'bar_elastic.yaml', SMALL_BAR + ['schedule.steps=1'])

    service.run(config, output_dir=tmp_path / 'bar', strategy='dense')

    assert config.solver.jacobian == 'dense'


def test_triaxial_run(service, tmp_path):
    """Тест трёхосного сценария: рыхлый песок уплотняется, до пика ещё не дошёл."""
    config = load_scenario(
        SCENARIO_DIR / 'triaxial_loose.yaml',
        ['schedule.steps=20', 'loads.axial_strain=-0.02'],
    )

    report = service.run(config, output_dir=tmp_path / 'triaxial')

    checks = {c.name: c for c in report.checks}
    assert report.steps == 20
    assert checks['contraction_at_peak'].passed
    assert not checks['peak_then_softening'].passed
    assert checks['max_newton_iterations'].passed
    assert (tmp_path / 'triaxial' / 'response.csv').exists()


def test_consolidation_run(service, tmp_path):
    """Тест грубой колонны консолидации через сценарий."""
    config = load_scenario(
        SCENARIO_DIR / 'consolidation.yaml',
        [
            'geometry.box_max=[1 m]',
            'geometry.h=[0.125 m]',
            'material.mu_f=1.0e-3 Pa*s',
            'schedule.dt=10 s',
            'schedule.dt_max=100 s',
            'schedule.output_times_tv=[0.05, 0.2]',
        ],
    )

    report = service.run(config, output_dir=tmp_path / 'consolidation')

    names = [c.name for c in report.checks]
    assert names == ['profile_l2_tv_0.05', 'profile_l2_tv_0.2', 'final_settlement']
    assert report.summary['settlement_error'] < 0.05
    for name in ('pressure_profiles.csv', 'settlement.csv', 'steps.csv'):
        assert (tmp_path / 'consolidation' / name).exists()


def test_inverse_settling_bar_check(service, tmp_path):
    """Тест обратного анализа осадки столба в режиме проверки."""
    config = parse_scenario(SETTLING_BAR)

    report = service.run(config, output_dir=tmp_path / 'inverse', check=True)

    assert report.passed, [c.to_dict() for c in report.checks if not c.passed]
    assert any(c.name == 'gradient_fd_0' for c in report.checks)
    assert (tmp_path / 'inverse' / 'reference.csv').exists()
    assert (tmp_path / 'inverse' / 'optimization.csv').exists()


def test_inverse_reads_reference_csv(service, tmp_path):
    """Тест: существующий опорный CSV используется вместо синтетического."""
    reference = tmp_path / 'reference.csv'
    config = parse_scenario(SETTLING_BAR)
    service.run(config, output_dir=tmp_path / 'first')
    reference.write_text((tmp_path / 'first' / 'reference.csv').read_text(encoding='utf-8'), encoding='utf-8')

    config = parse_scenario(SETTLING_BAR + f"  reference_csv: {reference}\n")
    report = service.run(config, output_dir=tmp_path / 'second')

    assert report.summary['E'] == pytest.approx(1.0e4, rel=0.01)


@pytest.mark.slow
def test_bar_check_refinement_study(service, tmp_path):
    """Тест исследования сходимости столба по сетке."""
    config = load_scenario(
        SCENARIO_DIR / 'bar_elastic.yaml',
        SMALL_BAR + ['checks.refinement_levels=[2, 3, 4]'],
    )

    report = service.run(config, output_dir=tmp_path / 'bar', check=True)

    checks = {c.name: c for c in report.checks}
    assert 'convergence_slope' in checks
    assert checks['convergence_slope'].measured > 0.5
    assert (tmp_path / 'bar' / 'convergence.csv').exists()


@pytest.mark.slow
def test_jacobian_bench(service, tmp_path):
    """Тест сравнения стратегий на грубых сетках консоли."""
    config = load_scenario(
        SCENARIO_DIR / 'jacobian_bench.yaml',
        ['bench.levels=[1.0, 0.5]', 'bench.equivalence=[bar, consolidation]'],
    )

    report = service.run(config, output_dir=tmp_path / 'bench')

    checks = {c.name: c for c in report.checks}
    assert checks['equivalence_bar'].passed
    assert checks['passes_consolidation'].passed
    assert len(report.summary['benchmark']) == 4
    assert (tmp_path / 'bench' / 'benchmark.csv').exists()
