"""
Конфигурация движка и сценариев
"""

from pathlib import Path

# Определяем корневую директорию проекта
PROJECT_ROOT = Path(__file__).parent.parent.parent
ENV_FILE = PROJECT_ROOT / ".env"

# Загружаем .env при импорте пакета
from dotenv import load_dotenv

if ENV_FILE.exists():
    load_dotenv(ENV_FILE, override=False)

from .config import get_settings, reset_settings, validate_settings, EngineSettings

__all__ = ['get_settings', 'reset_settings', 'validate_settings', 'EngineSettings']
