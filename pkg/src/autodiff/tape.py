"""
Лента обратного режима автоматического дифференцирования.

Каждый узел ленты — скалярная элементарная операция с не более чем двумя
родителями и локальными частными производными. Узлы пишутся блоками: одна
векторная операция numpy над массивом даёт блок скалярных узлов с подряд
идущими индексами. Константы (не зависящие от входов элементы) узлов не
порождают и имеют индекс -1.
"""

import logging
from collections import Counter
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import (
    SeedDimensionError,
    TapeCapacityError,
    TapeException,
    UnsupportedOperationError,
)

logger = logging.getLogger(__name__)

CONSTANT = -1


class _Block:
    """Блок из count скалярных узлов с индексами start .. start + count - 1."""

    __slots__ = ('opcode', 'start', 'count', 'parents', 'partials')

    def __init__(
            self,
            opcode: str,
            start: int,
            count: int,
            parents: Tuple[np.ndarray, ...],
            partials: Tuple[np.ndarray, ...]
    ):
        self.opcode = opcode
        self.start = start
        self.count = count
        self.parents = parents
        self.partials = partials


class Tape:
    """
    Записанный вычислительный граф.

    Инварианты: родители узла предшествуют ему; у узла не более двух
    родителей; входы занимают первые input_count индексов.
    """

    def __init__(self, max_nodes: Optional[int] = None):
        self.max_nodes = max_nodes
        self._blocks: List[_Block] = []
        self._size = 0
        self.input_count = 0
        self.output_ids: Optional[np.ndarray] = None
        self.output_values: Optional[np.ndarray] = None
        self._frozen = False

    # ------------------------------------------------------------------
    # Состояние
    # ------------------------------------------------------------------

    @property
    def size(self) -> int:
        """Полное число узлов, включая входы."""
        return self._size

    @property
    def output_count(self) -> int:
        return 0 if self.output_ids is None else int(self.output_ids.size)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def reset(self) -> 'Tape':
        """Очистить ленту для повторной записи (структура графа может меняться)."""
        self._blocks.clear()
        self._size = 0
        self.input_count = 0
        self.output_ids = None
        self.output_values = None
        self._frozen = False
        return self

    def opcode_counts(self) -> Dict[str, int]:
        """Число узлов по кодам операций (входы не считаются)."""
        counts: Counter = Counter()
        for block in self._blocks:
            counts[block.opcode] += block.count
        return dict(counts)

    def iter_nodes(self) -> Iterator[Tuple[int, str, Tuple[int, ...], Tuple[float, ...]]]:
        """Поузловой обход (index, opcode, parents, partials) — для отладки и тестов."""
        for block in self._blocks:
            for k in range(block.count):
                parents = tuple(int(p[k]) for p in block.parents)
                partials = tuple(float(d[k]) for d in block.partials)
                yield block.start + k, block.opcode, parents, partials

    # ------------------------------------------------------------------
    # Запись
    # ------------------------------------------------------------------

    def input(self, values: Any) -> 'Tracked':
        """Зарегистрировать независимые переменные."""
        if self._frozen:
            raise TapeException("Tape is frozen; reset it before recording again")
        if self._size != self.input_count:
            raise TapeException(
                "Inputs must be registered before any operation",
                context={'size': self._size, 'input_count': self.input_count}
            )
        arr = np.array(values, dtype=float)
        ids = np.arange(self._size, self._size + arr.size, dtype=np.int64).reshape(arr.shape)
        self._size += arr.size
        self.input_count += arr.size
        return Tracked(self, arr, ids)

    def emit(
            self,
            opcode: str,
            value: np.ndarray,
            parents: Sequence[np.ndarray],
            partials: Sequence[Any],
            alias: Optional[Tuple[np.ndarray, np.ndarray]] = None,
            constant: Optional[np.ndarray] = None
    ) -> 'Tracked':
        """
        Добавить блок узлов.

        alias — (маска, индексы): элементы, совпадающие с уже записанным узлом
        (x + 0, x * 1); constant — маска элементов, заведомо не зависящих от входов.
        """
        if self._frozen:
            raise TapeException("Tape is frozen; reset it before recording again")
        shape = value.shape
        active = np.zeros(shape, dtype=bool)
        for p in parents:
            active |= p >= 0
        out = np.full(shape, CONSTANT, dtype=np.int64)
        if constant is not None:
            active &= ~constant
        if alias is not None:
            mask, ids = alias
            mask = mask & active
            out[mask] = ids[mask]
            active &= ~mask
        n = int(np.count_nonzero(active))
        if n:
            start = self._size
            out[active] = np.arange(start, start + n, dtype=np.int64)
            block = _Block(
                opcode,
                start,
                n,
                tuple(np.ascontiguousarray(p[active]) for p in parents),
                tuple(
                    np.array(np.broadcast_to(np.asarray(d, dtype=float), shape)[active], dtype=float)
                    for d in partials
                ),
            )
            self._blocks.append(block)
            self._size += n
            if self.max_nodes is not None and self._size > self.max_nodes:
                raise TapeCapacityError(self._size, self.max_nodes)
        return Tracked(self, value, out)

    def set_outputs(self, outputs: Any) -> None:
        """Зафиксировать выходы; после этого лента неизменяема."""
        if isinstance(outputs, Tracked):
            if outputs.tape is not self:
                raise TapeException("Outputs belong to a different tape")
            ids = outputs.ids.ravel().copy()
            values = outputs.value.ravel().copy()
        else:
            values = np.array(outputs, dtype=float).ravel()
            ids = np.full(values.shape, CONSTANT, dtype=np.int64)
        self.output_ids = ids
        self.output_values = values
        self._frozen = True

    # ------------------------------------------------------------------
    # Обратный проход
    # ------------------------------------------------------------------

    def backward(self, seed: Any) -> np.ndarray:
        """
        Произведение Jᵀe для затравки e (вектор или матрица n_out × k).

        Структура ленты не меняется; каждый вызов работает со своим буфером
        сопряжённых переменных.
        """
        if self.output_ids is None:
            raise TapeException("Tape has no outputs; call set_outputs first")
        e = np.asarray(seed, dtype=float)
        if e.ndim not in (1, 2) or e.shape[0] != self.output_ids.size:
            raise SeedDimensionError(int(self.output_ids.size), int(e.shape[0]) if e.ndim else 0)

        batch = e.ndim == 2
        adjoint = np.zeros((self._size,) + e.shape[1:], dtype=float)
        live = self.output_ids >= 0
        np.add.at(adjoint, self.output_ids[live], e[live])

        for block in reversed(self._blocks):
            g = adjoint[block.start:block.start + block.count]
            nonzero = np.any(g != 0.0, axis=1) if batch else g != 0.0
            if not nonzero.any():
                continue
            dense = bool(nonzero.all())
            for parents, partial in zip(block.parents, block.partials):
                select = parents >= 0
                if not dense:
                    select &= nonzero
                if not select.any():
                    continue
                if batch:
                    contribution = g[select] * partial[select][:, None]
                else:
                    contribution = g[select] * partial[select]
                np.add.at(adjoint, parents[select], contribution)

        return adjoint[:self.input_count].copy()


class Tracked:
    """
    Массив, значения которого записываются на ленту.

    value — значения (numpy), ids — индексы узлов той же формы (-1 для констант).
    Предикаты ветвлений берутся только из value и не дифференцируются.
    """

    __slots__ = ('tape', 'value', 'ids')
    __array_priority__ = 1000.0

    def __init__(self, tape: Tape, value: np.ndarray, ids: np.ndarray):
        self.tape = tape
        self.value = value
        self.ids = ids

    # --- форма -----------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self) -> int:
        return len(self.value)

    def __getitem__(self, key: Any) -> 'Tracked':
        return Tracked(self.tape, self.value[key], self.ids[key])

    def __setitem__(self, key: Any, item: Any) -> None:
        raise UnsupportedOperationError('setitem')

    def reshape(self, *shape: Any) -> 'Tracked':
        return Tracked(self.tape, self.value.reshape(*shape), self.ids.reshape(*shape))

    def ravel(self) -> 'Tracked':
        return Tracked(self.tape, self.value.ravel(), self.ids.ravel())

    def swapaxes(self, a: int, b: int) -> 'Tracked':
        return Tracked(self.tape, self.value.swapaxes(a, b), self.ids.swapaxes(a, b))

    def transpose(self, *axes: Any) -> 'Tracked':
        return Tracked(self.tape, self.value.transpose(*axes), self.ids.transpose(*axes))

    @property
    def T(self) -> 'Tracked':
        return self.transpose()

    def __repr__(self) -> str:
        return f"Tracked(shape={self.shape}, nodes={int(np.count_nonzero(self.ids >= 0))})"

    # --- арифметика --------------------------------------------------------

    def __add__(self, other: Any) -> 'Tracked':
        return add(self, other)

    def __radd__(self, other: Any) -> 'Tracked':
        return add(other, self)

    def __sub__(self, other: Any) -> 'Tracked':
        return sub(self, other)

    def __rsub__(self, other: Any) -> 'Tracked':
        return sub(other, self)

    def __mul__(self, other: Any) -> 'Tracked':
        return mul(self, other)

    def __rmul__(self, other: Any) -> 'Tracked':
        return mul(other, self)

    def __truediv__(self, other: Any) -> 'Tracked':
        return div(self, other)

    def __rtruediv__(self, other: Any) -> 'Tracked':
        return div(other, self)

    def __neg__(self) -> 'Tracked':
        return neg(self)

    def __pos__(self) -> 'Tracked':
        return self

    def __pow__(self, exponent: Any) -> 'Tracked':
        from src.autodiff import ops
        return ops.power(self, exponent)

    def __abs__(self) -> 'Tracked':
        from src.autodiff import ops
        return ops.abs(self)

    def __matmul__(self, other: Any) -> 'Tracked':
        raise UnsupportedOperationError('matmul')

    # --- предикаты по значениям ------------------------------------------

    def __lt__(self, other: Any) -> np.ndarray:
        return self.value < value_of(other)

    def __le__(self, other: Any) -> np.ndarray:
        return self.value <= value_of(other)

    def __gt__(self, other: Any) -> np.ndarray:
        return self.value > value_of(other)

    def __ge__(self, other: Any) -> np.ndarray:
        return self.value >= value_of(other)

    def __bool__(self) -> bool:
        raise UnsupportedOperationError('bool')

    def __array__(self, *args: Any, **kwargs: Any) -> np.ndarray:
        raise UnsupportedOperationError('array conversion')

    def __array_ufunc__(self, ufunc: np.ufunc, method: str, *inputs: Any, **kwargs: Any) -> Any:
        from src.autodiff import ops

        if method != '__call__' or kwargs:
            raise UnsupportedOperationError(f"{ufunc.__name__}.{method}")
        handlers: Dict[str, Callable] = {
            'add': add,
            'subtract': sub,
            'multiply': mul,
            'true_divide': div,
            'divide': div,
            'negative': neg,
            'log': ops.log,
            'exp': ops.exp,
            'sqrt': ops.sqrt,
            'absolute': ops.abs,
            'power': ops.power,
            'maximum': ops.maximum,
            'minimum': ops.minimum,
        }
        handler = handlers.get(ufunc.__name__)
        if handler is None:
            raise UnsupportedOperationError(ufunc.__name__)
        return handler(*inputs)


# ============================================================================
# ВСПОМОГАТЕЛЬНОЕ
# ============================================================================

def is_tracked(x: Any) -> bool:
    return isinstance(x, Tracked)


def value_of(x: Any) -> np.ndarray:
    """Значения без привязки к ленте."""
    if isinstance(x, Tracked):
        return x.value
    return np.asarray(x, dtype=float)


def tape_of(*items: Any) -> Optional[Tape]:
    """Общая лента аргументов (None, если аргументы не отслеживаются)."""
    tape = None
    for item in items:
        if isinstance(item, Tracked):
            if tape is None:
                tape = item.tape
            elif item.tape is not tape:
                raise TapeException("Operands recorded on different tapes")
    return tape


def split(x: Any) -> Tuple[np.ndarray, np.ndarray]:
    """(значения, индексы узлов); у констант индексы -1."""
    if isinstance(x, Tracked):
        return x.value, x.ids
    v = np.asarray(x, dtype=float)
    return v, np.broadcast_to(np.int64(CONSTANT), v.shape)


def _broadcast(a: Any, b: Any) -> Tuple[Tape, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    tape = tape_of(a, b)
    va, ia = split(a)
    vb, ib = split(b)
    shape = np.broadcast_shapes(va.shape, vb.shape)
    return (
        tape,
        np.broadcast_to(va, shape),
        np.broadcast_to(ia, shape),
        np.broadcast_to(vb, shape),
        np.broadcast_to(ib, shape),
    )


# ============================================================================
# ЭЛЕМЕНТАРНЫЕ БИНАРНЫЕ ОПЕРАЦИИ
# ============================================================================

def add(a: Any, b: Any) -> Any:
    if not (isinstance(a, Tracked) or isinstance(b, Tracked)):
        return np.add(a, b)
    tape, va, ia, vb, ib = _broadcast(a, b)
    value = va + vb
    b_zero = (ib < 0) & (vb == 0.0)
    a_zero = (ia < 0) & (va == 0.0)
    alias_ids = np.where(b_zero, ia, ib)
    return tape.emit('add', value, (ia, ib), (1.0, 1.0), alias=(b_zero | a_zero, alias_ids))


def sub(a: Any, b: Any) -> Any:
    if not (isinstance(a, Tracked) or isinstance(b, Tracked)):
        return np.subtract(a, b)
    tape, va, ia, vb, ib = _broadcast(a, b)
    value = va - vb
    b_zero = (ib < 0) & (vb == 0.0)
    return tape.emit('sub', value, (ia, ib), (1.0, -1.0), alias=(b_zero, ia))


def mul(a: Any, b: Any) -> Any:
    if not (isinstance(a, Tracked) or isinstance(b, Tracked)):
        return np.multiply(a, b)
    tape, va, ia, vb, ib = _broadcast(a, b)
    value = va * vb
    b_one = (ib < 0) & (vb == 1.0)
    a_one = (ia < 0) & (va == 1.0)
    zero = ((ib < 0) & (vb == 0.0)) | ((ia < 0) & (va == 0.0))
    alias_ids = np.where(b_one, ia, ib)
    return tape.emit('mul', value, (ia, ib), (vb, va), alias=(b_one | a_one, alias_ids), constant=zero)


def div(a: Any, b: Any) -> Any:
    if not (isinstance(a, Tracked) or isinstance(b, Tracked)):
        return np.true_divide(a, b)
    tape, va, ia, vb, ib = _broadcast(a, b)
    value = va / vb
    b_one = (ib < 0) & (vb == 1.0)
    a_zero = (ia < 0) & (va == 0.0)
    with np.errstate(divide='ignore', invalid='ignore'):
        partials = (1.0 / vb, -value / vb)
    return tape.emit('div', value, (ia, ib), partials, alias=(b_one, ia), constant=a_zero)


def neg(a: Any) -> Any:
    if not isinstance(a, Tracked):
        return np.negative(a)
    return a.tape.emit('neg', -a.value, (a.ids,), (-1.0,))


# ============================================================================
# ЗАПИСЬ ФУНКЦИИ
# ============================================================================

def record(
        f: Callable[..., Any],
        *inputs: Any,
        tape: Optional[Tape] = None,
        max_nodes: Optional[int] = None
) -> Tuple[Tape, np.ndarray]:
    """
    Записать f(*inputs) на ленту.

    Returns:
        (лента, значения выходов); значения совпадают с прямым вычислением f
        на numpy побитно, так как используют те же операции numpy.
    """
    if tape is None:
        tape = Tape(max_nodes=max_nodes)
    else:
        tape.reset()
    tracked = [tape.input(x) for x in inputs]
    outputs = f(*tracked)
    tape.set_outputs(outputs)
    logger.debug(f"Лента записана: {tape.size} узлов, {tape.input_count} входов, {tape.output_count} выходов")
    return tape, tape.output_values.copy()


def backward(tape: Tape, seed: Any) -> np.ndarray:
    """Jᵀe для записанной ленты."""
    return tape.backward(seed)


__all__ = [
    'CONSTANT',
    'Tape',
    'Tracked',
    'is_tracked',
    'value_of',
    'tape_of',
    'split',
    'add',
    'sub',
    'mul',
    'div',
    'neg',
    'record',
    'backward',
]
