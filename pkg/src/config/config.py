"""
Настройки движка из переменных окружения.

Параметры конкретного прогона описываются сценарием (scenario.py);
здесь только общепроцессные ручки: логирование, каталоги вывода,
режим проверки интерференции при разреженном дифференцировании.
"""

import os
import logging
from typing import Dict, Any, List, Optional
from pathlib import Path
from dataclasses import dataclass, field
from functools import lru_cache

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).parent.parent.parent

INTERFERENCE_MODES = ('always', 'sampled', 'off')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


@dataclass
class LoggingConfig:
    """Конфигурация логирования"""
    level: str = "INFO"
    log_dir: str = "logs"
    max_entries: int = 5000


@dataclass
class OutputConfig:
    """Каталоги результатов"""
    output_dir: str = "output"


@dataclass
class JacobianConfig:
    """Параметры сборки якобиана"""
    interference_check: str = "always"
    sample_every: int = 8
    max_tape_nodes: int = 50_000_000
    dense_lu_limit: int = 400


@dataclass
class EngineSettings:
    """Основная конфигурация движка"""
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    jacobian: JacobianConfig = field(default_factory=JacobianConfig)

    @property
    def INTERFERENCE_CHECK(self) -> str:
        return self.jacobian.interference_check


def get_env_int(key: str, default: int) -> int:
    """Получить целочисленное значение из переменной окружения"""
    try:
        return int(os.getenv(key, str(default)).replace('_', ''))
    except ValueError:
        logger.error(f"Переменная окружения {key} должна быть целым числом, используется значение по умолчанию: {default}")
        return default


def load_settings() -> EngineSettings:
    """
    Загрузить настройки из переменных окружения с дефолтами

    Returns:
        Объект настроек
    """
    settings = EngineSettings(
        logging=LoggingConfig(
            level=os.getenv('MPM_LOG_LEVEL', 'INFO').upper(),
            log_dir=os.getenv('MPM_LOG_DIR', 'logs'),
            max_entries=get_env_int('MPM_LOG_MAX_ENTRIES', 5000)
        ),
        output=OutputConfig(
            output_dir=os.getenv('MPM_OUTPUT_DIR', 'output')
        ),
        jacobian=JacobianConfig(
            interference_check=os.getenv('MPM_INTERFERENCE_CHECK', 'always').lower(),
            sample_every=get_env_int('MPM_INTERFERENCE_SAMPLE_EVERY', 8),
            max_tape_nodes=get_env_int('MPM_MAX_TAPE_NODES', 50_000_000),
            dense_lu_limit=get_env_int('MPM_DENSE_LU_LIMIT', 400)
        )
    )

    logger.debug(
        f"Настройки загружены: log={settings.logging.level}, "
        f"interference={settings.jacobian.interference_check}"
    )
    return settings


@lru_cache(maxsize=1)
def get_settings() -> EngineSettings:
    """Получить экземпляр настроек (синглтон)"""
    return load_settings()


def reset_settings() -> None:
    """Сбросить кэшированные настройки (полезно для тестов)"""
    get_settings.cache_clear()


def validate_settings(settings: Optional[EngineSettings] = None) -> Dict[str, Any]:
    """
    Валидация настроек

    Returns:
        Словарь с результатами валидации
    """
    settings = settings or get_settings()
    issues: List[str] = []
    warnings: List[str] = []

    if settings.logging.level not in LOG_LEVELS:
        issues.append(f"MPM_LOG_LEVEL must be one of {LOG_LEVELS}, got {settings.logging.level!r}")

    if settings.jacobian.interference_check not in INTERFERENCE_MODES:
        issues.append(
            f"MPM_INTERFERENCE_CHECK must be one of {INTERFERENCE_MODES}, "
            f"got {settings.jacobian.interference_check!r}"
        )

    if settings.jacobian.sample_every < 1:
        issues.append("MPM_INTERFERENCE_SAMPLE_EVERY must be >= 1")

    if settings.jacobian.max_tape_nodes < 1000:
        issues.append("MPM_MAX_TAPE_NODES is too small")

    if settings.jacobian.interference_check == 'off':
        warnings.append("Interference check disabled: seeding faults will go undetected")

    return {
        'valid': len(issues) == 0,
        'issues': issues,
        'warnings': warnings
    }


__all__ = [
    'EngineSettings',
    'LoggingConfig',
    'OutputConfig',
    'JacobianConfig',
    'get_settings',
    'reset_settings',
    'validate_settings',
    'get_env_int',
    'PROJECT_ROOT',
]
