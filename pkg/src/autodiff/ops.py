"""
Операции над массивами, одинаково работающие с numpy и Tracked.

Одна и та же функция вычисляет значение на numpy и записывает его на ленту:
порядок арифметики общий, поэтому значения совпадают побитно.
"""

from typing import Any, Sequence

import numpy as np

from src.autodiff.tape import (
    CONSTANT,
    Tracked,
    add,
    is_tracked,
    split,
    tape_of,
    value_of,
)
from src.core.exceptions import DomainError, UnsupportedOperationError


def _domain_check(name: str, x: Any, bad: np.ndarray) -> None:
    if not np.any(bad):
        return
    element = tuple(int(i) for i in np.argwhere(bad)[0]) if bad.ndim else None
    node = None
    if isinstance(x, Tracked):
        node_id = int(x.ids[element] if element is not None else x.ids)
        node = node_id if node_id >= 0 else None
    v = value_of(x)
    bad_value = float(v[element] if element is not None else v)
    raise DomainError(name, node, bad_value, element)


# ============================================================================
# УНАРНЫЕ ОПЕРАЦИИ
# ============================================================================

def log(x: Any) -> Any:
    v = value_of(x)
    _domain_check('log', x, ~(v > 0.0))
    value = np.log(v)
    if not isinstance(x, Tracked):
        return value
    return x.tape.emit('log', value, (x.ids,), (1.0 / v,))


def exp(x: Any) -> Any:
    value = np.exp(value_of(x))
    if not isinstance(x, Tracked):
        return value
    return x.tape.emit('exp', value, (x.ids,), (value,))


def sqrt(x: Any) -> Any:
    v = value_of(x)
    _domain_check('sqrt', x, v < 0.0)
    value = np.sqrt(v)
    if not isinstance(x, Tracked):
        return value
    with np.errstate(divide='ignore'):
        partial = 0.5 / value
    return x.tape.emit('sqrt', value, (x.ids,), (partial,))


def power(x: Any, exponent: Any) -> Any:
    """x ** c для постоянного показателя c."""
    if is_tracked(exponent):
        raise UnsupportedOperationError('power with tracked exponent')
    c = float(exponent)
    v = value_of(x)
    if c != int(c):
        _domain_check('pow', x, v < 0.0)
    if c == 2.0:
        value = v * v
    else:
        value = np.power(v, c)
    if not isinstance(x, Tracked):
        return value
    with np.errstate(divide='ignore', invalid='ignore'):
        partial = c * np.power(v, c - 1.0)
    return x.tape.emit('pow', value, (x.ids,), (partial,))


def abs(x: Any) -> Any:
    v = value_of(x)
    value = np.abs(v)
    if not isinstance(x, Tracked):
        return value
    return x.tape.emit('abs', value, (x.ids,), (np.sign(v),))


# ============================================================================
# ВЕТВЛЕНИЕ ПО ЗНАЧЕНИЯМ
# ============================================================================

def where(predicate: Any, a: Any, b: Any) -> Any:
    """Поэлементный выбор; узлов не создаёт, производная идёт в выбранную ветвь."""
    pred = np.asarray(predicate, dtype=bool)
    tape = tape_of(a, b)
    if tape is None:
        return np.where(pred, a, b)
    va, ia = split(a)
    vb, ib = split(b)
    return Tracked(tape, np.where(pred, va, vb), np.where(pred, ia, ib))


def maximum(a: Any, b: Any) -> Any:
    """max(a, b); при равенстве выбирается a."""
    return where(value_of(a) >= value_of(b), a, b)


def minimum(a: Any, b: Any) -> Any:
    """min(a, b); при равенстве выбирается a."""
    return where(value_of(a) <= value_of(b), a, b)


# ============================================================================
# ФОРМА
# ============================================================================

def stack(items: Sequence[Any], axis: int = 0) -> Any:
    tape = tape_of(*items)
    if tape is None:
        return np.stack([np.asarray(i, dtype=float) for i in items], axis=axis)
    parts = [split(i) for i in items]
    shape = np.broadcast_shapes(*(p[0].shape for p in parts))
    values = np.stack([np.broadcast_to(p[0], shape) for p in parts], axis=axis)
    ids = np.stack([np.broadcast_to(p[1], shape) for p in parts], axis=axis)
    return Tracked(tape, values, ids)


def concatenate(items: Sequence[Any], axis: int = 0) -> Any:
    tape = tape_of(*items)
    if tape is None:
        return np.concatenate([np.asarray(i, dtype=float) for i in items], axis=axis)
    parts = [split(i) for i in items]
    return Tracked(
        tape,
        np.concatenate([p[0] for p in parts], axis=axis),
        np.concatenate([p[1] for p in parts], axis=axis),
    )


def broadcast_to(x: Any, shape: Sequence[int]) -> Any:
    if not isinstance(x, Tracked):
        return np.broadcast_to(np.asarray(x, dtype=float), shape)
    return Tracked(x.tape, np.broadcast_to(x.value, shape), np.broadcast_to(x.ids, shape))


def expand_dims(x: Any, axis: int) -> Any:
    if not isinstance(x, Tracked):
        return np.expand_dims(np.asarray(x, dtype=float), axis)
    return Tracked(x.tape, np.expand_dims(x.value, axis), np.expand_dims(x.ids, axis))


def place(size: int, index: Any, values: Any) -> Any:
    """Массив длины size (по первой оси) с values в позициях index и нулями в остальных."""
    index = np.asarray(index, dtype=np.int64)
    if not isinstance(values, Tracked):
        v = np.asarray(values, dtype=float)
        out = np.zeros((size,) + v.shape[1:], dtype=float)
        out[index] = v
        return out
    out_value = np.zeros((size,) + values.shape[1:], dtype=float)
    out_ids = np.full((size,) + values.shape[1:], CONSTANT, dtype=np.int64)
    out_value[index] = values.value
    out_ids[index] = values.ids
    return Tracked(values.tape, out_value, out_ids)


def merge(mask: Any, on_true: Any, on_false: Any) -> Any:
    """
    Слить значения, вычисленные на подмножествах первой оси.

    on_true — строки для mask, on_false — для ~mask. Узлов не создаёт:
    каждая позиция берётся ровно из одной ветви.
    """
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    return add(place(n, np.flatnonzero(mask), on_true), place(n, np.flatnonzero(~mask), on_false))


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(shape, dtype=float)


# ============================================================================
# РЕДУКЦИИ
# ============================================================================

def sum_axis(x: Any, axis: int = -1) -> Any:
    """Последовательная сумма вдоль оси: ((x0 + x1) + x2) + ..."""
    ndim = value_of(x).ndim
    axis = axis % ndim
    n = value_of(x).shape[axis]
    lead = (slice(None),) * axis
    if n == 0:
        shape = value_of(x).shape[:axis] + value_of(x).shape[axis + 1:]
        return np.zeros(shape, dtype=float)
    total = x[lead + (0,)]
    for k in range(1, n):
        total = total + x[lead + (k,)]
    return total


def segment_sum(values: Any, segments: Any, n_segments: int) -> Any:
    """
    Сумма по сегментам попарным деревом.

    values — массив (m, ...), segments — номер сегмента для каждой строки.
    Порядок сложения детерминирован: устойчивая сортировка по сегментам,
    затем попарное сложение соседей внутри сегмента до одного элемента.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if segments.size == 0:
        return place(n_segments, segments, np.zeros((0,) + value_of(values).shape[1:]))
    order = np.argsort(segments, kind='stable')
    seg = segments[order]
    vals = values[order]

    while True:
        boundary = np.empty(seg.size, dtype=bool)
        boundary[0] = True
        boundary[1:] = seg[1:] != seg[:-1]
        starts = np.flatnonzero(boundary)
        counts = np.diff(np.append(starts, seg.size))
        if counts.max() == 1:
            break
        rank = np.arange(seg.size) - np.repeat(starts, counts)
        count = np.repeat(counts, counts)
        even = rank % 2 == 0
        pair = even & (rank + 1 < count)
        single = even & ~pair
        left = np.flatnonzero(pair)
        keep = np.flatnonzero(single)
        summed = vals[left] + vals[left + 1]
        position = np.concatenate([left, keep])
        perm = np.argsort(position, kind='stable')
        vals = concatenate([summed, vals[keep]], axis=0)[perm]
        seg = seg[position[perm]]

    return place(n_segments, seg, vals)


def dot_last(a: Any, b: Any) -> Any:
    """Скалярное произведение по последней оси."""
    return sum_axis(a * b, axis=-1)


def sum_all(x: Any) -> Any:
    """Сумма всех элементов (последовательно по плоскому массиву)."""
    flat = x.ravel() if isinstance(x, Tracked) else np.asarray(x, dtype=float).ravel()
    return sum_axis(flat, axis=0)


def as_float(x: Any) -> float:
    return float(value_of(x))


def is_constant(x: Any) -> bool:
    """True, если x не зависит от входов ленты."""
    if not isinstance(x, Tracked):
        return True
    return bool(np.all(x.ids < 0))


__all__ = [
    'log',
    'exp',
    'sqrt',
    'power',
    'abs',
    'where',
    'maximum',
    'minimum',
    'stack',
    'concatenate',
    'broadcast_to',
    'expand_dims',
    'place',
    'merge',
    'zeros',
    'sum_axis',
    'segment_sum',
    'dot_last',
    'sum_all',
    'as_float',
    'is_constant',
    'add',
]
