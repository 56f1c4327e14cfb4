"""
Функции формы cpGIMP и линейные функции формы.

Одномерные веса и их производные по положению частицы считаются
кусочно; многомерные — тензорным произведением одномерных. Все функции
работают как с numpy, так и с Tracked (положения частиц и полуширины
могут быть входами ленты).
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import value_of
from src.core.exceptions import (
    ConfigurationError,
    InvalidKinematicsError,
    OutOfDomainError,
    ParticleDomainOverflowError,
    UnregisteredKindError,
)

logger = logging.getLogger(__name__)

SLOTS_PER_AXIS = 3


@dataclass(frozen=True)
class ShapeFunctionKind:
    """Зарегистрированный тип функций формы."""
    name: str
    block_size: int
    implemented: bool

    @property
    def reach(self) -> int:
        """Радиус связи узлов в ячейках: (b - 1) / 2."""
        return (self.block_size - 1) // 2


SHAPE_FUNCTIONS: Dict[str, ShapeFunctionKind] = {
    'linear': ShapeFunctionKind('linear', 3, True),
    'gimp': ShapeFunctionKind('gimp', 5, True),
    'quadratic-bspline': ShapeFunctionKind('quadratic-bspline', 5, False),
    'cubic-bspline': ShapeFunctionKind('cubic-bspline', 7, False),
}


def get_kind(kind: str) -> ShapeFunctionKind:
    try:
        return SHAPE_FUNCTIONS[kind]
    except KeyError:
        raise UnregisteredKindError(kind) from None


def block_size(kind: str) -> int:
    """Размер блока для разреженного дифференцирования."""
    return get_kind(kind).block_size


# ============================================================================
# ОДНОМЕРНЫЕ ВЕСА
# ============================================================================

def gimp_weight_1d(xi: Any, lp: Any, h: float) -> Tuple[Any, Any]:
    """
    Вес cpGIMP и его производная по положению частицы.

    Args:
        xi: x_p - x_i, знаковое расстояние от узла до частицы
        lp: полуширина области частицы, 0 < lp < h/2
        h: шаг сетки

    Интервалы ветвей полуоткрытые: |ξ| < lp, lp ≤ |ξ| < h - lp,
    h - lp ≤ |ξ| < h + lp.
    """
    lp_value = value_of(lp)
    if np.any(lp_value <= 0.0) or np.any(lp_value >= 0.5 * h):
        raise ConfigurationError(
            f"GIMP half-width must satisfy 0 < lp < h/2 (h={h}, lp range "
            f"[{float(np.min(lp_value)):.6g}, {float(np.max(lp_value)):.6g}])",
            key='lp'
        )
    r = np.abs(value_of(xi))
    sign = np.sign(value_of(xi))
    a = ops.abs(xi)

    inner = 1.0 - (xi * xi + lp * lp) / (2.0 * h * lp)
    d_inner = -xi / (h * lp)
    middle = 1.0 - a / h
    d_middle = -sign / h
    gap = (h + lp) - a
    outer = gap * gap / (4.0 * h * lp)
    d_outer = -sign * gap / (2.0 * h * lp)

    in_inner = r < lp_value
    in_middle = (r >= lp_value) & (r < h - lp_value)
    in_outer = (r >= h - lp_value) & (r < h + lp_value)

    w = ops.where(in_inner, inner, ops.where(in_middle, middle, ops.where(in_outer, outer, 0.0)))
    dw = ops.where(in_inner, d_inner, ops.where(in_middle, d_middle, ops.where(in_outer, d_outer, 0.0)))
    return w, dw


def linear_weight_1d(xi: Any, h: float) -> Tuple[Any, Any]:
    """Линейная «шапочка» и её производная."""
    r = np.abs(value_of(xi))
    sign = np.sign(value_of(xi))
    inside = r < h
    w = ops.where(inside, 1.0 - ops.abs(xi) / h, 0.0)
    dw = ops.where(inside, -sign / h, 0.0)
    return w, dw


def weight_1d(kind: str, xi: Any, lp: Any, h: float) -> Tuple[Any, Any]:
    spec = get_kind(kind)
    if not spec.implemented:
        raise UnregisteredKindError(kind)
    if spec.name == 'gimp':
        return gimp_weight_1d(xi, lp, h)
    return linear_weight_1d(xi, h)


def weight_nd(
        kind: str,
        particle_position: Any,
        lp: Any,
        node_position: Any,
        h: Any
) -> Tuple[Any, Any]:
    """
    Вес узла для одной частицы и его градиент (тензорное произведение).

    Returns:
        (w, grad_w) — скаляр и вектор длины d
    """
    xp = particle_position
    h = np.asarray(h, dtype=float).reshape(-1)
    d = h.size
    node = np.asarray(node_position, dtype=float).reshape(-1)
    ws = []
    dws = []
    for axis in range(d):
        lp_axis = lp[axis] if np.ndim(value_of(lp)) else lp
        w, dw = weight_1d(kind, xp[axis] - node[axis], lp_axis, float(h[axis]))
        ws.append(w)
        dws.append(dw)
    weight = ws[0]
    for axis in range(1, d):
        weight = weight * ws[axis]
    grads = []
    for axis in range(d):
        g = dws[axis]
        for other in range(d):
            if other != axis:
                g = g * ws[other]
        grads.append(g)
    return weight, ops.stack(grads)


# ============================================================================
# СТЕНСИЛ ЧАСТИЦ
# ============================================================================

@dataclass
class Stencil:
    """
    Узлы, веса и градиенты весов для набора частиц.

    nodes: (P, S) плоские индексы узлов; weights: (P, S); grads: (P, S, d),
    S = 3^d слотов. Слоты вне сетки имеют нулевой вес и индекс, прижатый к границе.
    """
    nodes: np.ndarray
    weights: Any
    grads: Any

    @property
    def slots(self) -> int:
        return self.nodes.shape[1]


def compute_stencil(
        kind: str,
        positions: Any,
        lp: Any,
        origin: np.ndarray,
        spacing: np.ndarray,
        shape: Tuple[int, ...]
) -> Stencil:
    """
    Веса частиц на сетке: по 3 узла на ось, тензорное произведение.

    Raises:
        OutOfDomainError: носитель частицы выходит за сетку
    """
    spec = get_kind(kind)
    if not spec.implemented:
        raise UnregisteredKindError(kind)

    x_value = value_of(positions)
    n_particles, dim = x_value.shape
    lp_value = value_of(lp) if spec.name == 'gimp' else np.zeros_like(x_value)
    offsets = np.arange(SLOTS_PER_AXIS)

    axis_weights = []
    axis_grads = []
    axis_nodes = []
    for axis in range(dim):
        h = float(spacing[axis])
        base = np.ceil((x_value[:, axis] - h - lp_value[:, axis] - origin[axis]) / h).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        node_x = origin[axis] + idx * h
        xi = positions[:, axis:axis + 1] - node_x
        lp_axis = lp[:, axis:axis + 1] if spec.name == 'gimp' else None
        w, dw = weight_1d(kind, xi, lp_axis, h)

        outside = (idx < 0) | (idx >= shape[axis])
        leaking = outside & (value_of(w) != 0.0)
        if np.any(leaking):
            pid = int(np.argwhere(leaking)[0][0])
            raise OutOfDomainError(pid)

        axis_nodes.append(np.clip(idx, 0, shape[axis] - 1))
        axis_weights.append(w)
        axis_grads.append(dw)

    weights = axis_weights[0]
    grads = [axis_grads[0]]
    nodes = axis_nodes[0]
    for axis in range(1, dim):
        w_next = axis_weights[axis][:, None, :]
        grads = [(g[:, :, None] * w_next).reshape(n_particles, -1) for g in grads]
        grads.append((weights[:, :, None] * axis_grads[axis][:, None, :]).reshape(n_particles, -1))
        weights = (weights[:, :, None] * w_next).reshape(n_particles, -1)
        nodes = (nodes[:, :, None] * shape[axis] + axis_nodes[axis][:, None, :]).reshape(n_particles, -1)

    return Stencil(nodes=nodes, weights=weights, grads=ops.stack(grads, axis=-1))


# ============================================================================
# ОБНОВЛЕНИЕ ОБЛАСТИ ЧАСТИЦЫ
# ============================================================================

def update_particle_domain(F: Any, lp0: Any, spacing: Any = None) -> Any:
    """
    lp_α = lp0_α · F_αα.

    Raises:
        InvalidKinematicsError: det F ≤ 0
        ParticleDomainOverflowError: lp ≥ h/2 по какой-либо оси
    """
    F_value = value_of(F)
    det = np.linalg.det(F_value)
    bad = det <= 0.0
    if np.any(bad):
        pid = int(np.argwhere(np.atleast_1d(bad))[0][0]) if np.ndim(bad) else None
        raise InvalidKinematicsError(float(np.atleast_1d(det)[pid or 0]), pid)

    lp0_value = value_of(lp0)
    dim = lp0_value.shape[-1]
    diagonal = ops.stack([F[..., a, a] for a in range(dim)], axis=-1)
    lp = lp0 * diagonal

    if spacing is not None:
        half = 0.5 * np.asarray(spacing, dtype=float)
        over = value_of(lp) >= half
        if np.any(over):
            where = np.argwhere(np.atleast_2d(over))[0]
            pid, axis = int(where[0]), int(where[1])
            lp_bad = float(np.atleast_2d(value_of(lp))[pid, axis])
            raise ParticleDomainOverflowError(pid, axis, lp_bad, float(np.asarray(spacing).reshape(-1)[axis]))
    return lp


__all__ = [
    'ShapeFunctionKind',
    'SHAPE_FUNCTIONS',
    'Stencil',
    'block_size',
    'get_kind',
    'gimp_weight_1d',
    'linear_weight_1d',
    'weight_1d',
    'weight_nd',
    'compute_stencil',
    'update_particle_domain',
]
