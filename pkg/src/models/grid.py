"""
Фоновая сетка, граничные условия и программа нагружения.

Узлы нумеруются в C-порядке по мульти-индексу; степени свободы —
узел за узлом, компонента внутри узла.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from src.core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

# Допуск попадания узла в ящик ограничения, в долях шага
BOX_TOLERANCE = 1e-9


@dataclass
class Grid:
    """Регулярная сетка: origin, шаг по осям и число узлов по осям."""
    origin: np.ndarray
    spacing: np.ndarray
    shape: Tuple[int, ...]

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(-1)
        self.spacing = np.asarray(self.spacing, dtype=float).reshape(-1)
        self.shape = tuple(int(n) for n in self.shape)
        if not (self.origin.size == self.spacing.size == len(self.shape)):
            raise ConfigurationError("Grid origin, spacing and shape must have equal dimension", key='geometry')
        if np.any(self.spacing <= 0.0):
            raise ConfigurationError("Grid spacing must be positive", key='geometry.h')

    @classmethod
    def from_box(
            cls,
            box_min: Sequence[float],
            box_max: Sequence[float],
            h: Any,
            margin: int = 1
    ) -> 'Grid':
        """Сетка, покрывающая ящик тела с запасом margin ячеек с каждой стороны."""
        box_min = np.asarray(box_min, dtype=float).reshape(-1)
        box_max = np.asarray(box_max, dtype=float).reshape(-1)
        spacing = np.broadcast_to(np.asarray(h, dtype=float), box_min.shape).copy()
        cells = np.rint((box_max - box_min) / spacing).astype(int)
        return cls(
            origin=box_min - margin * spacing,
            spacing=spacing,
            shape=tuple(int(c) + 2 * margin + 1 for c in cells),
        )

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def multi_index(self, nodes: Any = None) -> np.ndarray:
        """Мульти-индексы (n, d) для плоских индексов (по умолчанию — все узлы)."""
        if nodes is None:
            nodes = np.arange(self.n_nodes)
        return np.stack(np.unravel_index(np.asarray(nodes, dtype=np.int64), self.shape), axis=-1)

    def flat_index(self, multi: np.ndarray) -> np.ndarray:
        multi = np.asarray(multi, dtype=np.int64)
        return np.ravel_multi_index(tuple(multi[..., a] for a in range(self.dim)), self.shape)

    def node_positions(self, nodes: Any = None) -> np.ndarray:
        return self.origin + self.multi_index(nodes) * self.spacing

    def nodes_in_box(self, box_min: Sequence[float], box_max: Sequence[float]) -> np.ndarray:
        """Плоские индексы узлов внутри ящика (границы включены)."""
        x = self.node_positions()
        tol = BOX_TOLERANCE * self.spacing
        lo = np.asarray(box_min, dtype=float) - tol
        hi = np.asarray(box_max, dtype=float) + tol
        inside = np.all((x >= lo) & (x <= hi), axis=1)
        return np.flatnonzero(inside)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'origin': self.origin.tolist(),
            'spacing': self.spacing.tolist(),
            'shape': list(self.shape),
        }


@dataclass
class NodeConstraint:
    """
    Заданные приращения узловых неизвестных внутри ящика.

    increment — приращение за шаг для каждой из components (0 — закрепление).
    Компонента с номером dim — поровое давление в связанной задаче.
    """
    box_min: np.ndarray
    box_max: np.ndarray
    components: Tuple[int, ...]
    increment: np.ndarray = None

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=float).reshape(-1)
        self.box_max = np.asarray(self.box_max, dtype=float).reshape(-1)
        self.components = tuple(int(c) for c in self.components)
        if self.increment is None:
            self.increment = np.zeros(len(self.components))
        self.increment = np.broadcast_to(
            np.asarray(self.increment, dtype=float), (len(self.components),)
        ).copy()


@dataclass
class DofMap:
    """
    Нумерация неизвестных шага.

    free_flat — позиции свободных неизвестных в плоском векторе (N·n_comp),
    prescribed_flat / prescribed_values — заданные приращения.
    """
    n_nodes: int
    n_comp: int
    active: np.ndarray
    free_flat: np.ndarray
    prescribed_flat: np.ndarray
    prescribed_values: np.ndarray

    @property
    def n_free(self) -> int:
        return int(self.free_flat.size)

    @property
    def free_nodes(self) -> np.ndarray:
        return self.free_flat // self.n_comp

    @property
    def free_components(self) -> np.ndarray:
        return self.free_flat % self.n_comp

    def dof_table(self) -> np.ndarray:
        """Таблица (N, n_comp): номер свободной неизвестной или -1."""
        table = np.full(self.n_nodes * self.n_comp, -1, dtype=np.int64)
        table[self.free_flat] = np.arange(self.n_free)
        return table.reshape(self.n_nodes, self.n_comp)

    def prescribed_vector(self) -> np.ndarray:
        u = np.zeros(self.n_nodes * self.n_comp)
        u[self.prescribed_flat] = self.prescribed_values
        return u


def number_dofs(
        grid: Grid,
        active: np.ndarray,
        constraints: List[NodeConstraint],
        n_comp: int
) -> DofMap:
    """
    Свободные неизвестные — компоненты активных узлов без ограничений.

    Для узла, попавшего в несколько ящиков, действует последнее ограничение.
    """
    prescribed = np.full(grid.n_nodes * n_comp, np.nan)
    for constraint in constraints:
        nodes = grid.nodes_in_box(constraint.box_min, constraint.box_max)
        nodes = nodes[active[nodes]]
        for component, value in zip(constraint.components, constraint.increment):
            if not 0 <= component < n_comp:
                raise ConfigurationError(
                    f"Constraint component {component} out of range for {n_comp} unknowns per node",
                    key='loads.constraints'
                )
            prescribed[nodes * n_comp + component] = value

    active_flat = np.repeat(active, n_comp)
    fixed = ~np.isnan(prescribed) & active_flat
    free_flat = np.flatnonzero(active_flat & ~fixed)
    prescribed_flat = np.flatnonzero(fixed)
    return DofMap(
        n_nodes=grid.n_nodes,
        n_comp=n_comp,
        active=active,
        free_flat=free_flat,
        prescribed_flat=prescribed_flat,
        prescribed_values=prescribed[prescribed_flat],
    )


@dataclass
class LoadSchedule:
    """
    Программа нагружения по шагам.

    Множители нагрузок растут линейно от 1/n до 1 (ramp) либо постоянны.
    Заданные перемещения задаются приращениями в NodeConstraint.
    """
    n_steps: int
    body_force_ramp: bool = True
    traction_ramp: bool = True
    point_load_ramp: bool = True
    output_steps: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigurationError("Schedule needs at least one step", key='schedule.steps')

    def _scale(self, step: int, ramp: bool) -> float:
        return step / self.n_steps if ramp else 1.0

    def body_scale(self, step: int) -> float:
        return self._scale(step, self.body_force_ramp)

    def traction_scale(self, step: int) -> float:
        return self._scale(step, self.traction_ramp)

    def point_scale(self, step: int) -> float:
        return self._scale(step, self.point_load_ramp)

    def is_output_step(self, step: int) -> bool:
        return step in self.output_steps or step == self.n_steps


__all__ = [
    'Grid',
    'NodeConstraint',
    'DofMap',
    'LoadSchedule',
    'number_dofs',
]
