"""
Сборка якобиана Ньютона обратным режимом AD.

Плотная стратегия: один обратный проход на строку. Разреженная: узлы
сетки разбиты на непересекающиеся блоки b^d; за проход затравка ставится
на один узел каждого блока (все узлы с одинаковым остатком мульти-индекса
по модулю b), так что строки разных затравленных узлов не пересекаются.
Векторные неизвестные узла затравливаются столбцами одного пакетного прохода.
"""

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from src.autodiff.tape import Tape
from src.core.exceptions import ConfigurationError, SeedingFaultError
from src.mechanics.shape_functions import get_kind
from src.models.grid import DofMap, Grid

logger = logging.getLogger(__name__)

STRATEGIES = ('dense', 'sparse')
INTERFERENCE_THRESHOLD = 1e-12


# ============================================================================
# РАЗБИЕНИЕ НА БЛОКИ
# ============================================================================

@dataclass
class BlockPartition:
    """
    Разбиение свободных неизвестных по блокам b^d.

    free_multi — мульти-индекс узла каждой свободной неизвестной,
    free_comp — её компонента; dof_table (N, n_comp) — обратная таблица.
    """
    grid_shape: Tuple[int, ...]
    block: int
    free_multi: np.ndarray
    free_comp: np.ndarray
    dof_table: np.ndarray

    @classmethod
    def from_dofs(cls, grid: Grid, dofs: DofMap, kind: str) -> 'BlockPartition':
        return cls(
            grid_shape=grid.shape,
            block=get_kind(kind).block_size,
            free_multi=grid.multi_index(dofs.free_nodes),
            free_comp=dofs.free_components,
            dof_table=dofs.dof_table(),
        )

    @property
    def dim(self) -> int:
        return len(self.grid_shape)

    @property
    def reach(self) -> int:
        return (self.block - 1) // 2

    @property
    def n_free(self) -> int:
        return int(self.free_comp.size)

    @property
    def n_comp(self) -> int:
        return int(self.dof_table.shape[1])

    @property
    def pass_count(self) -> int:
        """Число обратных проходов: b^d."""
        return self.block ** self.dim

    def offsets(self) -> List[Tuple[int, ...]]:
        return list(itertools.product(range(self.block), repeat=self.dim))

    def group(self, offset: Sequence[int]) -> np.ndarray:
        """Свободные неизвестные узлов с остатком offset по модулю b."""
        local = self.free_multi % self.block
        return np.flatnonzero(np.all(local == np.asarray(offset), axis=1))

    def owners(self, offset: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Для каждого столбца — единственный затравленный узел в пределах ±reach.

        s = m + ((o − m + r) mod b) − r по каждой оси.
        Returns:
            (плоские индексы узлов-владельцев, маска попадания в сетку)
        """
        m = self.free_multi
        r = self.reach
        owner = m + np.mod(np.asarray(offset) - m + r, self.block) - r
        shape = np.asarray(self.grid_shape)
        inside = np.all((owner >= 0) & (owner < shape), axis=1)
        clipped = np.clip(owner, 0, shape - 1)
        flat = np.ravel_multi_index(tuple(clipped[:, a] for a in range(self.dim)), self.grid_shape)
        return flat, inside


def sparsity_pattern(grid: Grid, kind: str, dofs: Optional[DofMap] = None, n_comp: int = 1) -> sp.csr_matrix:
    """
    Структурный шаблон связей: узел связан с узлами в пределах ±(b−1)/2 ячеек
    по каждой оси, по всем компонентам.

    Без dofs — шаблон по всем узлам сетки и n_comp компонентам.
    """
    r = get_kind(kind).reach
    if dofs is None:
        table = np.arange(grid.n_nodes * n_comp, dtype=np.int64).reshape(grid.n_nodes, n_comp)
        nodes = np.repeat(np.arange(grid.n_nodes), n_comp)
    else:
        table = dofs.dof_table()
        n_comp = dofs.n_comp
        nodes = dofs.free_nodes
    n = int(np.count_nonzero(table >= 0))
    multi = grid.multi_index(nodes)
    shape = np.asarray(grid.shape)

    rows = []
    cols = []
    for shift in itertools.product(range(-r, r + 1), repeat=grid.dim):
        neighbour = multi + np.asarray(shift)
        inside = np.all((neighbour >= 0) & (neighbour < shape), axis=1)
        if not inside.any():
            continue
        idx = np.flatnonzero(inside)
        flat = grid.flat_index(neighbour[idx])
        for c in range(n_comp):
            col = table[flat, c]
            keep = col >= 0
            rows.append(idx[keep])
            cols.append(col[keep])
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    pattern = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    pattern.data[:] = 1.0
    return pattern


# ============================================================================
# ДИФФЕРЕНЦИРОВАНИЕ
# ============================================================================

def _to_csr(rows: List[np.ndarray], cols: List[np.ndarray], vals: List[np.ndarray], n: int) -> sp.csr_matrix:
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    matrix = sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()
    matrix.sort_indices()
    return matrix


def dense_jacobian(tape: Tape, n_dof: int) -> Tuple[sp.csr_matrix, int]:
    """
    Строка i — обратный проход с затравкой e_i.

    Выходы ленты сверх первых n_dof (отклики) получают нулевую затравку;
    столбцы — первые n_dof входов.

    Returns:
        (J, число проходов)
    """
    n_out = tape.output_count
    rows, cols, vals = [], [], []
    seed = np.zeros(n_out)
    for i in range(n_dof):
        seed[i] = 1.0
        row = tape.backward(seed)[:n_dof]
        seed[i] = 0.0
        nz = np.flatnonzero(row)
        rows.append(np.full(nz.size, i, dtype=np.int64))
        cols.append(nz)
        vals.append(row[nz])
    return _to_csr(rows, cols, vals, n_dof), n_dof


def sparse_jacobian(
        tape: Tape,
        partition: BlockPartition,
        check: str = 'always',
        sample_every: int = 8
) -> Tuple[sp.csr_matrix, int]:
    """
    Блочная затравка: b^d пакетных проходов по n_comp столбцов.

    Результат прохода разносится по строкам узлов-владельцев; всё, что
    не нашло владельца, — интерференция.

    Raises:
        SeedingFaultError: неприсвоенный вклад выше 1e-12 от максимума прохода
    """
    n = partition.n_free
    n_out = tape.output_count
    n_comp = partition.n_comp
    columns = np.arange(n)
    rows, cols, vals = [], [], []
    passes = 0

    for index, offset in enumerate(partition.offsets()):
        group = partition.group(offset)
        if group.size == 0:
            continue
        seed = np.zeros((n_out, n_comp))
        seed[group, partition.free_comp[group]] = 1.0
        adjoint = tape.backward(seed)[:n]
        passes += 1

        owner_nodes, inside = partition.owners(offset)
        verify = check == 'always' or (check == 'sampled' and index % sample_every == 0)
        scale = float(np.max(np.abs(adjoint))) if verify else 0.0

        for c in range(n_comp):
            row = np.where(inside, partition.dof_table[owner_nodes, c], -1)
            claimed = row >= 0
            rows.append(row[claimed])
            cols.append(columns[claimed])
            vals.append(adjoint[claimed, c])

            if verify and scale > 0.0:
                leak = ~claimed & (np.abs(adjoint[:, c]) > INTERFERENCE_THRESHOLD * scale)
                if leak.any():
                    j = int(np.flatnonzero(leak)[0])
                    raise SeedingFaultError(
                        seeded_node=tuple(int(o) for o in offset),
                        offending_node=tuple(int(v) for v in partition.free_multi[j]),
                        magnitude=float(abs(adjoint[j, c])),
                        context={'component': c, 'column': j}
                    )

    return _to_csr(rows, cols, vals, n), passes


# ============================================================================
# СЕРВИС
# ============================================================================

@dataclass
class JacobianStats:
    """Счётчики сборки якобиана за прогон."""
    assemblies: int = 0
    passes: int = 0
    diff_s: float = 0.0
    last_passes: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'assemblies': self.assemblies,
            'passes': self.passes,
            'diff_s': self.diff_s,
            'passes_per_assembly': self.last_passes,
        }


class JacobianAssembler:
    """Выбранная стратегия дифференцирования и её статистика."""

    def __init__(
            self,
            strategy: str = 'sparse',
            interference_check: Optional[str] = None,
            sample_every: Optional[int] = None
    ):
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"Unknown Jacobian strategy: {strategy}", key='solver.jacobian')
        if interference_check is None or sample_every is None:
            from src.config import get_settings
            settings = get_settings().jacobian
            interference_check = interference_check or settings.interference_check
            sample_every = sample_every or settings.sample_every
        self.strategy = strategy
        self.interference_check = interference_check
        self.sample_every = sample_every
        self.stats = JacobianStats()
        self.logger = logging.getLogger(self.__class__.__name__)

    def assemble(self, tape: Tape, grid: Grid, dofs: DofMap, kind: str) -> sp.csr_matrix:
        started = time.perf_counter()
        if self.strategy == 'dense':
            matrix, passes = dense_jacobian(tape, dofs.n_free)
        else:
            partition = BlockPartition.from_dofs(grid, dofs, kind)
            matrix, passes = sparse_jacobian(tape, partition, self.interference_check, self.sample_every)
        elapsed = time.perf_counter() - started

        self.stats.assemblies += 1
        self.stats.passes += passes
        self.stats.last_passes = passes
        self.stats.diff_s += elapsed
        self.logger.debug(f"Якобиан ({self.strategy}): {dofs.n_free} неизвестных, {passes} проходов, {elapsed:.3f} с")
        return matrix


# ============================================================================
# СРАВНЕНИЕ СТРАТЕГИЙ
# ============================================================================

BENCHMARK_COLUMNS = ('grid_size', 'strategy', 'total_s', 'diff_s', 'diff_share')


@dataclass
class BenchmarkRow:
    grid_size: str
    strategy: str
    total_s: float
    diff_s: float
    passes: int = 0
    n_dof: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def diff_share(self) -> float:
        return 100.0 * self.diff_s / self.total_s if self.total_s > 0.0 else 0.0

    def to_row(self) -> Dict[str, Any]:
        return {
            'grid_size': self.grid_size,
            'strategy': self.strategy,
            'total_s': round(self.total_s, 6),
            'diff_s': round(self.diff_s, 6),
            'diff_share': round(self.diff_share, 2),
        }


def differentiation_benchmark(
        runner: Callable[[Any, str], Tuple[float, JacobianStats, int]],
        levels: Sequence[Any],
        strategies: Sequence[str] = STRATEGIES,
        label: Callable[[Any], str] = str
) -> List[BenchmarkRow]:
    """
    Прогнать сценарий на каждом уровне измельчения каждой стратегией.

    runner(level, strategy) -> (полное время, статистика якобиана, число неизвестных).
    """
    rows = []
    for level in levels:
        for strategy in strategies:
            total_s, stats, n_dof = runner(level, strategy)
            row = BenchmarkRow(
                grid_size=label(level),
                strategy=strategy,
                total_s=total_s,
                diff_s=stats.diff_s,
                passes=stats.last_passes,
                n_dof=n_dof,
            )
            logger.info(
                f"✓ {row.grid_size} [{strategy}]: всего {total_s:.2f} с, "
                f"дифференцирование {row.diff_s:.2f} с ({row.diff_share:.1f}%)"
            )
            rows.append(row)
    return rows


__all__ = [
    'STRATEGIES',
    'BlockPartition',
    'JacobianAssembler',
    'JacobianStats',
    'BenchmarkRow',
    'BENCHMARK_COLUMNS',
    'sparsity_pattern',
    'dense_jacobian',
    'sparse_jacobian',
    'differentiation_benchmark',
]
