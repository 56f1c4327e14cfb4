"""
Материальные точки: лагранжевы носители массы, объёма, F, напряжений и истории.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class ParticleSet:
    """
    Набор частиц размерности d (1–3).

    F и stress хранятся как 3×3 (плоская деформация и одномерный случай
    дополняются единичными строками). traction_force — мёртвая нагрузка
    t·A_p, point_force — сосредоточенные силы; обе масштабируются программой.
    """
    X: np.ndarray
    x: np.ndarray
    mass: np.ndarray
    volume0: np.ndarray
    lp0: np.ndarray
    lp: np.ndarray
    F: np.ndarray
    stress: np.ndarray
    traction_force: np.ndarray
    point_force: np.ndarray
    state: Dict[str, np.ndarray] = field(default_factory=dict)
    pore_pressure: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    @property
    def J(self) -> np.ndarray:
        return np.linalg.det(self.F)

    @property
    def volume(self) -> np.ndarray:
        """V = det(F)·V0."""
        return self.J * self.volume0

    @property
    def density(self) -> np.ndarray:
        return self.mass / self.volume

    @property
    def displacement(self) -> np.ndarray:
        return self.x - self.X

    @classmethod
    def fill_box(
            cls,
            box_min: Sequence[float],
            box_max: Sequence[float],
            h: Any,
            particles_per_cell: Any,
            density: float
    ) -> 'ParticleSet':
        """
        Равномерное заполнение ящика: ppc частиц на ячейку по каждой оси,
        в центрах подъячеек.
        """
        box_min = np.asarray(box_min, dtype=float).reshape(-1)
        box_max = np.asarray(box_max, dtype=float).reshape(-1)
        dim = box_min.size
        h = np.broadcast_to(np.asarray(h, dtype=float), (dim,))
        ppc = np.broadcast_to(np.asarray(particles_per_cell, dtype=int), (dim,))
        if density <= 0.0:
            raise ConfigurationError(f"Density must be positive, got {density}", key='material.density')

        axes = []
        for a in range(dim):
            n_cells = int(np.rint((box_max[a] - box_min[a]) / h[a]))
            if n_cells < 1:
                raise ConfigurationError("Body must span at least one cell per axis", key='geometry')
            sub = h[a] / ppc[a]
            axes.append(box_min[a] + (np.arange(n_cells * ppc[a]) + 0.5) * sub)
        mesh = np.meshgrid(*axes, indexing='ij')
        X = np.stack([m.ravel() for m in mesh], axis=-1)

        n = X.shape[0]
        sub = h / ppc
        volume0 = np.full(n, float(np.prod(sub)))
        lp0 = np.tile(0.5 * sub, (n, 1))
        logger.debug(f"Заполнение ящика: {n} частиц, d={dim}")
        return cls(
            X=X,
            x=X.copy(),
            mass=density * volume0,
            volume0=volume0,
            lp0=lp0,
            lp=lp0.copy(),
            F=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
            stress=np.zeros((n, 3, 3)),
            traction_force=np.zeros((n, dim)),
            point_force=np.zeros((n, dim)),
        )

    def select(self, box_min: Sequence[float], box_max: Sequence[float]) -> np.ndarray:
        """Индексы частиц, чьи текущие положения лежат в ящике (границы включены)."""
        lo = np.asarray(box_min, dtype=float)
        hi = np.asarray(box_max, dtype=float)
        return np.flatnonzero(np.all((self.x >= lo) & (self.x <= hi), axis=1))

    def apply_traction(self, indices: np.ndarray, traction: Sequence[float], normal_axis: int) -> None:
        """Мёртвая поверхностная нагрузка: сила t·A_p, A_p = V0 / (2·lp0 по нормали)."""
        area = self.volume0[indices] / (2.0 * self.lp0[indices, normal_axis])
        self.traction_force[indices] += area[:, None] * np.asarray(traction, dtype=float)[None, :]

    def apply_point_load(self, indices: np.ndarray, force: Sequence[float]) -> None:
        """Сосредоточенная сила, поровну распределённая по частицам набора."""
        if indices.size == 0:
            raise ConfigurationError("Point load selects no particles", key='loads.point_load')
        self.point_force[indices] += np.asarray(force, dtype=float)[None, :] / indices.size

    def copy(self) -> 'ParticleSet':
        return ParticleSet(
            X=self.X.copy(),
            x=self.x.copy(),
            mass=self.mass.copy(),
            volume0=self.volume0.copy(),
            lp0=self.lp0.copy(),
            lp=self.lp.copy(),
            F=self.F.copy(),
            stress=self.stress.copy(),
            traction_force=self.traction_force.copy(),
            point_force=self.point_force.copy(),
            state={key: np.array(val) for key, val in self.state.items()},
            pore_pressure=None if self.pore_pressure is None else self.pore_pressure.copy(),
        )

    def rows(self) -> List[Dict[str, float]]:
        """Строки CSV состояния частиц: положения, напряжения, F."""
        axes = 'xyz'[:self.dim]
        rows = []
        for p in range(self.n):
            row: Dict[str, float] = {'particle': p}
            for a, name in enumerate(axes):
                row[name] = float(self.x[p, a])
            for a, name in enumerate(axes):
                row[f'{name}0'] = float(self.X[p, a])
            for i in range(self.dim):
                for j in range(i, self.dim):
                    row[f'sigma_{axes[i]}{axes[j]}'] = float(self.stress[p, i, j])
            for i in range(self.dim):
                for j in range(self.dim):
                    row[f'F_{axes[i]}{axes[j]}'] = float(self.F[p, i, j])
            if self.pore_pressure is not None:
                row['pore_pressure'] = float(self.pore_pressure[p])
            rows.append(row)
        return rows


__all__ = ['ParticleSet']
