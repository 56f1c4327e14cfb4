"""
Журнал прогонов: настройка логирования и персистентные записи по сессиям.

Одна сессия соответствует одному прогону сценария. Записи (итерации Ньютона,
проверки, исключения) сохраняются в JSON-файл журнала рядом с результатами.
"""

import json
import logging
import os
import uuid
from abc import ABC, abstractmethod
from datetime import datetime, timezone
from typing import List, Dict, Optional, Any
from pathlib import Path
from dataclasses import dataclass, asdict

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'


def setup_logging(level: Optional[str] = None) -> None:
    """Установить формат и уровень корневого логгера (уровень по умолчанию из MPM_LOG_LEVEL)."""
    if level is None:
        from src.config import get_settings
        level = get_settings().logging.level
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class LogEntry:
    """Структурированная запись лога."""
    timestamp: str
    level: str
    message: str
    session_id: str
    context: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        """Конвертация в словарь."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LogEntry':
        """Создание из словаря."""
        return cls(**data)


@dataclass
class Session:
    """Сессия прогона."""
    id: str
    created_at: str
    status: str
    scenario: Optional[str] = None
    closed_at: Optional[str] = None


class LogStorage(ABC):
    """Абстрактный интерфейс хранилища логов."""

    @abstractmethod
    def add_log(self, entry: LogEntry) -> None:
        """Добавить запись лога."""
        pass

    @abstractmethod
    def get_logs(self, limit: int = 100, session_id: Optional[str] = None) -> List[LogEntry]:
        """Получить записи логов."""
        pass

    @abstractmethod
    def create_session(self, scenario: Optional[str] = None) -> str:
        """Создать новую сессию, вернуть ID сессии."""
        pass

    @abstractmethod
    def close_session(self, session_id: str, status: str = 'closed') -> None:
        """Закрыть сессию."""
        pass

    @abstractmethod
    def get_active_sessions(self) -> List[Session]:
        """Получить активные сессии."""
        pass

    def flush(self) -> None:
        """Сбросить буфер на диск (если есть)."""


class MemoryLogStorage(LogStorage):
    """Хранилище в памяти (тесты, прогоны без каталога журнала)."""

    def __init__(self, max_logs: int = 5000):
        self.max_logs = max_logs
        self._logs: List[LogEntry] = []
        self._sessions: Dict[str, Session] = {}

    def add_log(self, entry: LogEntry) -> None:
        self._logs.append(entry)
        if len(self._logs) > self.max_logs:
            self._logs = self._logs[-self.max_logs:]

    def get_logs(self, limit: int = 100, session_id: Optional[str] = None) -> List[LogEntry]:
        logs = [e for e in self._logs if session_id is None or e.session_id == session_id]
        return logs[-limit:]

    def create_session(self, scenario: Optional[str] = None) -> str:
        session_id = str(uuid.uuid4())
        self._sessions[session_id] = Session(id=session_id, created_at=_now(), status='active', scenario=scenario)
        return session_id

    def close_session(self, session_id: str, status: str = 'closed') -> None:
        session = self._sessions.get(session_id)
        if session:
            session.status = status
            session.closed_at = _now()

    def get_active_sessions(self) -> List[Session]:
        return [s for s in self._sessions.values() if s.status == 'active']


class FileLogStorage(LogStorage):
    """
    Файловое хранилище логов.

    Записи буферизуются в памяти и пишутся на диск при закрытии сессии
    и при явном flush: итераций Ньютона много, переписывать файл на каждую
    запись незачем.
    """

    def __init__(self, log_dir: Path = Path('logs'), max_logs: int = 5000):
        """
        Инициализация файлового хранилища.

        Args:
            log_dir: Директория для файлов логов
            max_logs: Максимум логов для хранения
        """
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.max_logs = max_logs
        self.logs_file = self.log_dir / 'run_logs.json'
        self.sessions_file = self.log_dir / 'sessions.json'
        self._logs: List[Dict] = []
        self._sessions: Dict[str, Dict] = {}
        self._load_data()
        logger.debug(f"Файловое хранилище журнала: {self.log_dir}")

    def _load_data(self) -> None:
        """Загрузить данные из файлов."""
        if self.logs_file.exists():
            try:
                with open(self.logs_file, 'r', encoding='utf-8') as f:
                    self._logs = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                logger.warning(f"⚠ Не удалось загрузить журнал: {e}")
                self._logs = []

        if self.sessions_file.exists():
            try:
                with open(self.sessions_file, 'r', encoding='utf-8') as f:
                    self._sessions = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                logger.warning(f"⚠ Не удалось загрузить сессии: {e}")
                self._sessions = {}

    def _write_json(self, path: Path, data: Any) -> None:
        tmp = path.with_suffix(path.suffix + '.tmp')
        with open(tmp, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
        os.replace(tmp, path)

    def flush(self) -> None:
        """Сохранить данные в файлы."""
        try:
            self._write_json(self.logs_file, self._logs)
            self._write_json(self.sessions_file, self._sessions)
        except OSError as e:
            logger.error(f"Не удалось сохранить журнал: {e}")

    def add_log(self, entry: LogEntry) -> None:
        """Добавить запись лога."""
        self._logs.append(entry.to_dict())
        if len(self._logs) > self.max_logs:
            self._logs = self._logs[-self.max_logs:]

    def get_logs(self, limit: int = 100, session_id: Optional[str] = None) -> List[LogEntry]:
        """Получить логи."""
        logs = self._logs
        if session_id:
            logs = [log for log in logs if log.get('session_id') == session_id]
        logs = logs[-limit:] if len(logs) > limit else logs
        return [LogEntry.from_dict(log) for log in logs]

    def create_session(self, scenario: Optional[str] = None) -> str:
        """Создать новую сессию."""
        session_id = str(uuid.uuid4())
        self._sessions[session_id] = asdict(Session(
            id=session_id,
            created_at=_now(),
            status='active',
            scenario=scenario
        ))
        self.flush()
        return session_id

    def close_session(self, session_id: str, status: str = 'closed') -> None:
        """Закрыть сессию."""
        if session_id in self._sessions:
            self._sessions[session_id]['status'] = status
            self._sessions[session_id]['closed_at'] = _now()
        self.flush()

    def get_active_sessions(self) -> List[Session]:
        """Получить активные сессии."""
        return [
            Session(**data)
            for data in self._sessions.values()
            if data.get('status') == 'active'
        ]


class RunLogManager:
    """
    Менеджер журнала прогонов.

    Пишет в выбранное хранилище и дублирует сообщения в Python logger.
    """

    def __init__(self, storage: Optional[LogStorage] = None, log_dir: Optional[Path] = None, max_logs: int = 5000):
        """
        Инициализация менеджера логов.

        Args:
            storage: Готовое хранилище (приоритетнее log_dir)
            log_dir: Директория для файлового хранилища; None — журнал в памяти
            max_logs: Максимум логов для хранения
        """
        if storage is not None:
            self.storage = storage
        elif log_dir is not None:
            self.storage = FileLogStorage(Path(log_dir), max_logs)
        else:
            self.storage = MemoryLogStorage(max_logs)

    def add_log(
        self,
        message: str,
        level: str = "INFO",
        session_id: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
        echo: bool = True
    ) -> None:
        """Добавить запись лога."""
        entry = LogEntry(
            timestamp=_now(),
            level=level.upper(),
            message=message,
            session_id=session_id or 'default',
            context=context
        )
        self.storage.add_log(entry)

        if echo:
            log_func = getattr(logger, level.lower(), logger.info)
            log_func(f"[{(session_id or 'default')[:8]}] {message}")

    def log_iteration(self, session_id: Optional[str], step: int, iteration: int, relative_residual: float) -> None:
        """Запись итерации Ньютона (без дублирования в консоль)."""
        self.add_log(
            f"Итерация {iteration}: |r|/|r0| = {relative_residual:.3e}",
            "DEBUG",
            session_id,
            {'step': step, 'iteration': iteration, 'relative_residual': relative_residual},
            echo=False
        )

    def get_logs(self, limit: int = 100, session_id: Optional[str] = None) -> List[Dict[str, Any]]:
        """Получить логи как словари."""
        entries = self.storage.get_logs(limit, session_id)
        return [entry.to_dict() for entry in entries]

    def create_session(self, scenario: Optional[str] = None) -> str:
        """Создать новую сессию прогона."""
        session_id = self.storage.create_session(scenario)
        self.add_log(f"Сессия создана: {scenario or session_id}", "INFO", session_id)
        return session_id

    def close_session(self, session_id: str, status: str = 'closed') -> None:
        """Закрыть сессию прогона."""
        self.add_log(f"Сессия закрыта ({status})", "INFO", session_id)
        self.storage.close_session(session_id, status)

    def get_active_sessions(self) -> List[Dict[str, Any]]:
        """Получить активные сессии как словари."""
        sessions = self.storage.get_active_sessions()
        return [asdict(session) for session in sessions]


# Singleton экземпляр
_log_manager: Optional[RunLogManager] = None


def get_log_manager(log_dir: Optional[Path] = None) -> RunLogManager:
    """
    Получить или создать singleton RunLogManager.

    Args:
        log_dir: Директория журнала; по умолчанию из MPM_LOG_DIR

    Returns:
        RunLogManager: Singleton экземпляр
    """
    global _log_manager

    if _log_manager is None:
        from src.config import get_settings
        settings = get_settings()
        _log_manager = RunLogManager(
            log_dir=Path(log_dir or settings.logging.log_dir),
            max_logs=settings.logging.max_entries
        )

    return _log_manager


def reset_log_manager() -> None:
    """Сбросить singleton (тесты)."""
    global _log_manager
    _log_manager = None


__all__ = [
    'LOG_FORMAT',
    'setup_logging',
    'RunLogManager',
    'LogEntry',
    'Session',
    'LogStorage',
    'MemoryLogStorage',
    'FileLogStorage',
    'get_log_manager',
    'reset_log_manager',
]
