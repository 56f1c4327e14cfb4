"""
Запись результатов прогона: CSV с документированными заголовками и JSON-сводка.
"""

import csv
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


def _plain(value: Any) -> Any:
    """numpy-скаляры и массивы → встроенные типы для json/csv."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {key: _plain(val) for key, val in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(val) for val in value]
    return value


def write_csv(path: Path, rows: Iterable[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
    """
    Записать строки в CSV.

    Args:
        path: Путь файла (каталоги создаются)
        rows: Строки-словари
        columns: Порядок столбцов; по умолчанию ключи первой строки

    Returns:
        Путь записанного файла
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _plain(val) for key, val in row.items()})
    logger.debug(f"CSV записан: {path} ({len(rows)} строк)")
    return path


def read_csv(path: Path) -> List[Dict[str, float]]:
    """Прочитать числовой CSV (все значения — float)."""
    with open(path, newline='', encoding='utf-8') as f:
        return [{key: float(val) for key, val in row.items()} for row in csv.DictReader(f)]


def write_json_atomic(path: Path, data: Any) -> Path:
    """JSON через временный файл и os.replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'w', encoding='utf-8') as f:
        json.dump(_plain(data), f, ensure_ascii=False, indent=2)
    os.replace(tmp, path)
    return path


class OutputWriter:
    """
    Каталог результатов одного прогона.

    Запоминает записанные файлы; список попадает в сводку (outputs).
    """

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.manifest: List[str] = []
        self.logger = logging.getLogger(self.__class__.__name__)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def csv(self, name: str, rows: Iterable[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
        path = write_csv(self.path(name), rows, columns)
        self._remember(path)
        return path

    def json(self, name: str, data: Any) -> Path:
        path = write_json_atomic(self.path(name), data)
        self._remember(path)
        return path

    def text(self, name: str, content: str) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding='utf-8')
        self._remember(path)
        return path

    def _remember(self, path: Path) -> None:
        if str(path) not in self.manifest:
            self.manifest.append(str(path))


__all__ = [
    'OutputWriter',
    'write_csv',
    'read_csv',
    'write_json_atomic',
]
