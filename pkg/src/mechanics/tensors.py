"""Тензорная алгебра 3×3 над массивами (..., 3, 3), общая для numpy и Tracked."""

from typing import Any, List, Sequence

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import value_of

IDENTITY = np.eye(3)


def from_components(rows: Sequence[Sequence[Any]]) -> Any:
    """Собрать (..., 3, 3) из вложенного списка компонент."""
    return ops.stack([ops.stack(list(row), axis=-1) for row in rows], axis=-2)


def components(A: Any) -> List[List[Any]]:
    return [[A[..., i, j] for j in range(3)] for i in range(3)]


def embed(grad: Any, dim: int) -> Any:
    """I + ∇u: градиент (..., d, d) дополняется единичной матрицей до 3×3."""
    batch = value_of(grad).shape[:-2]
    rows = []
    for i in range(3):
        row = []
        for j in range(3):
            delta = 1.0 if i == j else 0.0
            if i < dim and j < dim:
                row.append(grad[..., i, j] + delta)
            else:
                row.append(np.full(batch, delta))
        rows.append(row)
    return from_components(rows)


def transpose(A: Any) -> Any:
    return A.swapaxes(-1, -2)


def matmul(A: Any, B: Any) -> Any:
    return ops.sum_axis(A[..., :, :, None] * B[..., None, :, :], axis=-2)


def trace(A: Any) -> Any:
    return (A[..., 0, 0] + A[..., 1, 1]) + A[..., 2, 2]


def det(A: Any) -> Any:
    c = components(A)
    return (
        c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1])
        - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
        + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0])
    )


def cofactor(A: Any) -> Any:
    """Матрица алгебраических дополнений: cof(A) = det(A) · A⁻ᵀ."""
    c = components(A)
    return from_components([
        [c[1][1] * c[2][2] - c[1][2] * c[2][1],
         c[1][2] * c[2][0] - c[1][0] * c[2][2],
         c[1][0] * c[2][1] - c[1][1] * c[2][0]],
        [c[0][2] * c[2][1] - c[0][1] * c[2][2],
         c[0][0] * c[2][2] - c[0][2] * c[2][0],
         c[0][1] * c[2][0] - c[0][0] * c[2][1]],
        [c[0][1] * c[1][2] - c[0][2] * c[1][1],
         c[0][2] * c[1][0] - c[0][0] * c[1][2],
         c[0][0] * c[1][1] - c[0][1] * c[1][0]],
    ])


def inverse_transpose(A: Any) -> Any:
    J = det(A)
    return cofactor(A) / J[..., None, None]


def scale(A: Any, s: Any) -> Any:
    """s · A для скаляра на частицу."""
    return A * ops.expand_dims(ops.expand_dims(s, -1), -1)


def identity_like(A: Any) -> np.ndarray:
    return np.broadcast_to(IDENTITY, value_of(A).shape)


def deviator(A: Any) -> Any:
    return A - scale(identity_like(A), trace(A) / 3.0)


def double_contract(A: Any, B: Any) -> Any:
    """A : B."""
    flat_a = A.reshape(value_of(A).shape[:-2] + (9,))
    flat_b = B.reshape(value_of(B).shape[:-2] + (9,))
    return ops.sum_axis(flat_a * flat_b, axis=-1)


def symmetric_part(A: Any) -> Any:
    return 0.5 * (A + transpose(A))


__all__ = [
    'IDENTITY',
    'from_components',
    'components',
    'embed',
    'transpose',
    'matmul',
    'trace',
    'det',
    'cofactor',
    'inverse_transpose',
    'scale',
    'identity_like',
    'deviator',
    'double_contract',
    'symmetric_part',
]
