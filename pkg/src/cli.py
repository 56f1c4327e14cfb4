"""CLI интерфейс."""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

load_dotenv()

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_SOLVER_FAILURE = 2
EXIT_CONFIG_ERROR = 3


def print_checks(report) -> None:
    """Печатает проверки: измерено / ожидается / допуск."""
    if not report.checks:
        return
    print("-" * 78)
    print(f"{'проверка':<28} {'измерено':>14} {'ожидается':>14} {'допуск':>10}  итог")
    print("-" * 78)
    for check in report.checks:
        mark = '✅' if check.passed else '❌'
        print(f"{check.name:<28} {check.measured:>14.6g} {check.expected:>14.6g} {check.tol:>10.3g}  {mark}")
        if check.detail:
            print(f"    {check.detail}")
    print("-" * 78)


def _execute(args, check: bool, strategy: Optional[str] = None) -> int:
    from src.config.scenario import load_scenario
    from src.services.scenario_service import ScenarioService

    config = load_scenario(Path(args.config), args.overrides)
    print(f"🚀 Сценарий {config.name} ({config.kind})")
    report = ScenarioService().run(
        config,
        output_dir=Path(args.output) if args.output else None,
        check=check,
        strategy=strategy,
    )
    print_checks(report)
    print(f"\n✅ Завершено: {report.steps} шагов за {report.wall_s:.2f} с")
    print(f"📁 Результаты: {Path(report.outputs[-1]).parent}")
    return EXIT_CHECKS_FAILED if check and not report.passed else EXIT_OK


def run_scenario(args) -> int:
    """Прогон сценария."""
    return _execute(args, check=False)


def check_scenario(args) -> int:
    """Прогон с приёмочными исследованиями; 0 только если все проверки пройдены."""
    code = _execute(args, check=True)
    print("✅ Все проверки пройдены" if code == EXIT_OK else "❌ Есть непройденные проверки")
    return code


def bench_scenario(args) -> int:
    """Прогон с заданной стратегией якобиана."""
    return _execute(args, check=False, strategy=args.strategy)


def validate_config(args) -> int:
    """Проверяет конфигурацию без прогона."""
    from src.config.scenario import load_scenario, validate_scenario

    config = load_scenario(Path(args.config), args.overrides)
    result = validate_scenario(config)
    for warning in result['warnings']:
        print(f"⚠️  {warning}")
    for issue in result['issues']:
        print(f"❌ {issue}")
    if result['valid']:
        print(f"✅ {config.name}: конфигурация корректна")
        return EXIT_OK
    return EXIT_CONFIG_ERROR


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('config', help='YAML-файл сценария')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='переопределить значение, например solver.tolerance=1e-10')
    parser.add_argument('--output', help='каталог результатов')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Differentiable implicit MPM CLI')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING (по умолчанию MPM_LOG_LEVEL)')
    subparsers = parser.add_subparsers(dest='command')

    p_run = subparsers.add_parser('run', help='прогнать сценарий')
    _add_common(p_run)
    p_run.set_defaults(func=run_scenario)

    p_check = subparsers.add_parser('check', help='прогнать сценарий и приёмочные проверки')
    _add_common(p_check)
    p_check.set_defaults(func=check_scenario)

    p_bench = subparsers.add_parser('bench', help='прогнать сценарий с заданной стратегией якобиана')
    _add_common(p_bench)
    p_bench.add_argument('--strategy', choices=['sparse', 'dense'], required=True)
    p_bench.set_defaults(func=bench_scenario)

    p_validate = subparsers.add_parser('validate', help='проверить конфигурацию')
    _add_common(p_validate)
    p_validate.set_defaults(func=validate_config)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    from src.core.exceptions import ConfigurationError, MpmEngineException
    from src.utils.log_manager import setup_logging

    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_CONFIG_ERROR

    setup_logging(args.log_level)
    try:
        return args.func(args)
    except ConfigurationError as e:
        where = f" ({e.key})" if e.key else ""
        print(f"❌ Ошибка конфигурации{where}: {e.message}")
        return EXIT_CONFIG_ERROR
    except MpmEngineException as e:
        print(f"❌ Ошибка решателя: {e}")
        return EXIT_SOLVER_FAILURE


if __name__ == "__main__":
    sys.exit(main())
