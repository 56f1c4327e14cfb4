"""
Общие фикстуры: изолированные настройки и журнал прогонов.
"""

import pytest

from src.config import reset_settings
from src.utils.log_manager import reset_log_manager


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Каталоги журнала и результатов во временной папке теста."""
    monkeypatch.setenv('MPM_LOG_DIR', str(tmp_path / 'logs'))
    monkeypatch.setenv('MPM_OUTPUT_DIR', str(tmp_path / 'output'))
    monkeypatch.delenv('MPM_INTERFERENCE_CHECK', raising=False)
    reset_settings()
    reset_log_manager()
    yield
    reset_log_manager()
    reset_settings()
