"""
Тесты CLI: подкоманды и коды возврата.
"""

from pathlib import Path

from src.cli import EXIT_CHECKS_FAILED, EXIT_CONFIG_ERROR, EXIT_OK, EXIT_SOLVER_FAILURE, build_parser, main

SCENARIO_DIR = Path(__file__).parent.parent.parent / 'src' / 'config' / 'scenarios'
BAR = str(SCENARIO_DIR / 'bar_elastic.yaml')
SMALL_BAR = ['--set', 'geometry.box_max=[2.0]', '--set', 'geometry.h=[0.25]',
             '--set', 'geometry.particles_per_cell=[2]', '--set', 'schedule.steps=2']


def test_parser_subcommands():
    """Тест разбора аргументов подкоманд."""
    args = build_parser().parse_args(['bench', BAR, '--strategy', 'dense', '--set', 'schedule.steps=2'])

    assert args.command == 'bench'
    assert args.strategy == 'dense'
    assert args.overrides == ['schedule.steps=2']


def test_no_command_prints_help(capsys):
    """Тест запуска без подкоманды."""
    assert main([]) == EXIT_CONFIG_ERROR
    assert 'usage' in capsys.readouterr().out


def test_validate_ok(capsys):
    """Тест проверки корректной конфигурации."""
    assert main(['validate', BAR]) == EXIT_OK
    assert 'bar-elastic' in capsys.readouterr().out


def test_validate_reports_issues(capsys):
    """Тест проверки конфигурации с ошибками."""
    code = main(['validate', BAR, '--set', 'solver.jacobian=forward'])

    assert code == EXIT_CONFIG_ERROR
    assert 'solver.jacobian' in capsys.readouterr().out


def test_missing_config_file(tmp_path):
    """Тест отсутствующего файла конфигурации."""
    assert main(['run', str(tmp_path / 'missing.yaml')]) == EXIT_CONFIG_ERROR


def test_unknown_key_is_configuration_error(capsys):
    """Тест неизвестного ключа: код 3 и путь ключа в сообщении."""
    code = main(['run', BAR, '--set', 'solver.tolerence=1e-8'])

    assert code == EXIT_CONFIG_ERROR
    assert 'solver.tolerence' in capsys.readouterr().out


def test_run_writes_results(tmp_path):
    """Тест прогона: код 0 независимо от проверок."""
    out = tmp_path / 'run'

    assert main(['run', BAR, *SMALL_BAR, '--output', str(out)]) == EXIT_OK
    assert (out / 'summary.json').exists()


def test_check_fails_on_unmet_threshold(tmp_path):
    """Тест режима проверки: недостижимый порог даёт код 1."""
    code = main([
        'check', BAR, *SMALL_BAR,
        '--set', 'checks.stress_error=1e-12',
        '--set', 'checks.refinement_levels=[2, 3]',
        '--output', str(tmp_path / 'check'),
    ])

    assert code == EXIT_CHECKS_FAILED


def test_solver_failure_exit_code(tmp_path):
    """Тест сбоя Ньютона: код 2."""
    code = main(['run', BAR, *SMALL_BAR, '--set', 'solver.max_iterations=1', '--output', str(tmp_path / 'fail')])

    assert code == EXIT_SOLVER_FAILURE
