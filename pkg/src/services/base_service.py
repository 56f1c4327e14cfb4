"""
Service Layer - прогоны движка.
Сервисы владеют состоянием своего прогона и возвращают DTO результатов.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, Generic, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar('T')


# ============================================================================
# DATA TRANSFER OBJECTS (DTOs)
# ============================================================================

@dataclass
class StepResult:
    """Итог шага нагружения."""
    step: int
    iterations: int
    residual_history: List[float]
    wall_s: float = 0.0
    diff_s: float = 0.0
    time: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else 0.0

    def to_dict(self) -> Dict[str, Any]:
        """Конвертация в словарь."""
        data = {
            'step': self.step,
            'iterations': self.iterations,
            'final_residual': self.final_residual,
            'wall_s': round(self.wall_s, 6),
        }
        if self.time is not None:
            data['time'] = self.time
        data.update(self.extra)
        return data

    def iteration_rows(self) -> List[Dict[str, Any]]:
        """Строки журнала итераций (step, iteration, relative_residual)."""
        return [
            {'step': self.step, 'iteration': k, 'relative_residual': r}
            for k, r in enumerate(self.residual_history)
        ]


@dataclass
class RunResult:
    """Итог прогона решателя."""
    steps: List[StepResult] = field(default_factory=list)
    wall_s: float = 0.0
    diff_s: float = 0.0
    n_dof: int = 0

    @property
    def max_iterations(self) -> int:
        return max((s.iterations for s in self.steps), default=0)

    def iteration_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for step in self.steps:
            rows.extend(step.iteration_rows())
        return rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            'steps': len(self.steps),
            'max_iterations': self.max_iterations,
            'wall_s': round(self.wall_s, 6),
            'diff_s': round(self.diff_s, 6),
            'n_dof': self.n_dof,
        }


@dataclass
class CheckResult:
    """Результат одной приёмочной проверки."""
    name: str
    measured: float
    expected: float
    tol: float
    passed: bool
    detail: Optional[str] = None

    @classmethod
    def at_most(cls, name: str, measured: float, limit: float, detail: Optional[str] = None) -> 'CheckResult':
        """measured ≤ limit."""
        return cls(name, float(measured), float(limit), 0.0, bool(measured <= limit), detail)

    @classmethod
    def at_least(cls, name: str, measured: float, limit: float, detail: Optional[str] = None) -> 'CheckResult':
        return cls(name, float(measured), float(limit), 0.0, bool(measured >= limit), detail)

    @classmethod
    def within(cls, name: str, measured: float, expected: float, tol: float, detail: Optional[str] = None) -> 'CheckResult':
        """|measured − expected| ≤ tol·|expected|."""
        ok = abs(measured - expected) <= tol * abs(expected)
        return cls(name, float(measured), float(expected), float(tol), bool(ok), detail)

    @classmethod
    def not_measurable(cls, name: str, limit: float, detail: str) -> 'CheckResult':
        """Величину не удалось измерить: проверка не пройдена, measured = 0."""
        return cls(name, 0.0, float(limit), 0.0, False, detail)

    @classmethod
    def between(cls, name: str, measured: float, low: float, high: float) -> 'CheckResult':
        return cls(
            name, float(measured), 0.5 * (low + high), 0.5 * (high - low),
            bool(low <= measured <= high), f"[{low}, {high}]"
        )

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'name': self.name,
            'measured': self.measured,
            'expected': self.expected,
            'tol': self.tol,
            'pass': self.passed,
        }
        if self.detail:
            data['detail'] = self.detail
        return data


@dataclass
class RunReport:
    """Машиночитаемая сводка прогона сценария."""
    scenario: str
    steps: int = 0
    wall_s: float = 0.0
    checks: List[CheckResult] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'scenario': self.scenario,
            'steps': self.steps,
            'wall_s': round(self.wall_s, 6),
            'checks': [c.to_dict() for c in self.checks],
            'outputs': list(self.outputs),
            'summary': self.summary,
        }


# ============================================================================
# BASE SERVICE
# ============================================================================

class BaseService(ABC, Generic[T]):
    """
    Базовый сервис прогона.
    Предоставляет логгер.
    """

    def __init__(self):
        self.logger = logging.getLogger(self.__class__.__name__)

    @abstractmethod
    def run(self, *args: Any, **kwargs: Any) -> T:
        """Выполнить прогон."""
        pass


# ============================================================================
# EXPORTS
# ============================================================================

__all__ = [
    # DTOs
    'StepResult',
    'RunResult',
    'CheckResult',
    'RunReport',

    # Services
    'BaseService',
]
