"""
Тесты ленты обратного режима и элементарных операций.
"""

import numpy as np
import pytest

from src.autodiff import ops
from src.autodiff.tape import Tape, is_tracked, record, value_of
from src.core.exceptions import (
    DomainError,
    SeedDimensionError,
    TapeCapacityError,
    TapeException,
    UnsupportedOperationError,
)


def test_record_values_match_numpy():
    """Тест побитного совпадения значений ленты с numpy."""
    x = np.array([0.3, 1.7, 2.5])

    def f(v):
        return ops.exp(v) * ops.log(v) + ops.sqrt(v) / (v + 1.0)

    expected = np.exp(x) * np.log(x) + np.sqrt(x) / (x + 1.0)
    _, values = record(f, x)

    assert np.array_equal(values, expected)


def test_backward_polynomial():
    """Тест градиента x² + 3x."""
    x = np.array([-1.0, 0.5, 2.0])
    tape, _ = record(lambda v: v * v + 3.0 * v, x)

    grad = tape.backward(np.ones(3))

    np.testing.assert_allclose(grad, 2.0 * x + 3.0)


def test_backward_batched_seed():
    """Тест пакетной затравки: столбцы дают строки якобиана."""
    x = np.array([2.0, 5.0])

    def f(v):
        return ops.stack([v[0] * v[1], v[0] - v[1]])

    tape, values = record(f, x)
    adjoint = tape.backward(np.eye(2))

    np.testing.assert_allclose(values, [10.0, -3.0])
    # adjoint[i, k] = d y_k / d x_i
    np.testing.assert_allclose(adjoint, [[5.0, 1.0], [2.0, -1.0]])


def test_backward_is_repeatable():
    """Тест повторного обратного прохода по той же ленте."""
    x = np.array([1.5, 3.0])
    tape, _ = record(lambda v: v * v * v, x)

    first = tape.backward(np.ones(2))
    second = tape.backward(np.ones(2))

    np.testing.assert_array_equal(first, second)
    np.testing.assert_allclose(first, 3.0 * x ** 2)


def test_seed_dimension_mismatch():
    """Тест затравки неверной длины."""
    tape, _ = record(lambda v: v * 2.0, np.ones(3))

    with pytest.raises(SeedDimensionError):
        tape.backward(np.ones(4))


def test_backward_without_outputs():
    """Тест обратного прохода без выходов."""
    tape = Tape()
    tape.input([1.0])

    with pytest.raises(TapeException):
        tape.backward(np.ones(1))


def test_frozen_tape_rejects_new_inputs():
    """Тест неизменяемости ленты после фиксации выходов."""
    tape, _ = record(lambda v: v + 1.0, np.ones(2))

    with pytest.raises(TapeException):
        tape.input([2.0])


def test_tape_reuse_resets():
    """Тест повторной записи в ту же ленту."""
    tape, _ = record(lambda v: v * v, np.array([3.0]))
    tape, values = record(lambda v: v * 4.0, np.array([2.0]), tape=tape)

    assert values[0] == 8.0
    np.testing.assert_allclose(tape.backward(np.ones(1)), [4.0])


def test_identity_operations_do_not_create_nodes():
    """Тест: x + 0 и x * 1 не добавляют узлов."""
    tape, _ = record(lambda v: (v + 0.0) * 1.0, np.ones(4))

    assert tape.size == tape.input_count
    assert tape.opcode_counts() == {}


def test_multiplication_by_zero_is_constant():
    """Тест: произведение на нулевую константу не зависит от входов."""
    tape = Tape()
    x = tape.input([1.0, 2.0])
    y = x * np.array([0.0, 2.0])

    assert not ops.is_constant(y)
    assert y.ids[0] < 0
    assert y.ids[1] >= 0


def test_log_domain_error():
    """Тест log от неположительного значения."""
    with pytest.raises(DomainError) as exc_info:
        record(lambda v: ops.log(v), np.array([1.0, -2.0]))

    assert exc_info.value.op_name == 'log'
    assert exc_info.value.node == 1


def test_sqrt_domain_error():
    """Тест sqrt от отрицательного значения."""
    with pytest.raises(DomainError):
        record(lambda v: ops.sqrt(v - 5.0), np.array([1.0]))


def test_tracked_exponent_unsupported():
    """Тест степени с отслеживаемым показателем."""
    with pytest.raises(UnsupportedOperationError):
        record(lambda v: ops.power(2.0, v), np.array([1.0]))


def test_branch_on_tracked_value_unsupported():
    """Тест: ветвление по отслеживаемому значению запрещено."""
    tape = Tape()
    x = tape.input([1.0])

    with pytest.raises(UnsupportedOperationError):
        bool(x)
    with pytest.raises(UnsupportedOperationError):
        np.asarray(x)


def test_comparisons_return_plain_masks():
    """Тест: сравнения возвращают numpy-маски без узлов."""
    tape = Tape()
    x = tape.input([1.0, -1.0])
    mask = x > 0.0

    assert isinstance(mask, np.ndarray)
    assert mask.tolist() == [True, False]
    assert tape.size == 2


def test_capacity_limit():
    """Тест ограничения размера ленты."""
    with pytest.raises(TapeCapacityError):
        record(lambda v: v * v * v * v, np.ones(10), max_nodes=25)


def test_where_routes_gradient():
    """Тест: where пропускает градиент только в выбранную ветвь."""
    x = np.array([-2.0, 3.0])
    tape, values = record(lambda v: ops.where(v > 0.0, v * v, -v), x)

    np.testing.assert_allclose(values, [2.0, 9.0])
    np.testing.assert_allclose(tape.backward(np.ones(2)), [-1.0, 6.0])


def test_power_gradient():
    """Тест производной степени с постоянным показателем."""
    x = np.array([0.5, 2.0])
    tape, _ = record(lambda v: ops.power(v, 1.5), x)

    np.testing.assert_allclose(tape.backward(np.ones(2)), 1.5 * np.sqrt(x))


def test_segment_sum_matches_add_at():
    """Тест сегментной суммы против np.add.at."""
    rng = np.random.default_rng(7)
    values = rng.normal(size=(11, 2))
    segments = np.array([0, 2, 2, 1, 0, 2, 2, 4, 1, 2, 0])
    expected = np.zeros((5, 2))
    np.add.at(expected, segments, values)

    tape, out = record(lambda v: ops.segment_sum(v, segments, 5), values)

    np.testing.assert_allclose(out.reshape(5, 2), expected, rtol=1e-14, atol=1e-15)
    assert np.all(out.reshape(5, 2)[3] == 0.0)
    np.testing.assert_allclose(tape.backward(np.ones(10)).reshape(11, 2), 1.0)


def test_segment_sum_is_deterministic():
    """Тест детерминированного порядка сложения."""
    values = np.array([1e16, 1.0, -1e16, 1.0])
    segments = np.zeros(4, dtype=int)

    first = ops.segment_sum(values, segments, 1)
    second = ops.segment_sum(values, segments, 1)

    assert np.array_equal(first, second)


def test_merge_takes_each_branch_once():
    """Тест слияния значений с подмножеств."""
    tape = Tape()
    x = tape.input([1.0, 2.0, 3.0])
    mask = np.array([True, False, True])
    merged = ops.merge(mask, x[mask] * 2.0, x[~mask] * 10.0)

    np.testing.assert_allclose(value_of(merged), [2.0, 20.0, 6.0])
    assert is_tracked(merged)
    assert tape.opcode_counts().get('add', 0) == 0


def test_helpers_on_plain_arrays():
    """Тест операций без ленты: результат — обычный numpy."""
    x = np.array([1.0, 4.0])

    assert np.allclose(ops.sqrt(x), [1.0, 2.0])
    assert ops.is_constant(x)
    assert ops.as_float(ops.sum_all(x)) == 5.0


@pytest.mark.parametrize('op,a,b', [
    (ops.maximum, 3.0, 3.0),
    (ops.minimum, 2.0, 2.0),
])
def test_max_min_tie_selects_first_argument(op, a, b):
    """Тест: при равенстве max/min производная идёт в первый аргумент."""
    tape, values = record(lambda u, v: op(u, v), np.array([a]), np.array([b]))

    assert values[0] == a
    np.testing.assert_array_equal(tape.backward(np.ones(1)), [1.0, 0.0])


def _nonlinear(v):
    return ops.stack([v[0] * v[1], ops.log(v[0] + v[2]), v[1] / v[2] + ops.exp(v[0])])


def test_backward_is_linear_in_seed():
    """Тест линейности обратного прохода по затравке."""
    x = np.array([0.7, -1.3, 2.1])
    tape, _ = record(_nonlinear, x)
    e1 = np.array([1.0, -2.0, 0.5])
    e2 = np.array([0.0, 3.0, -1.0])

    combined = tape.backward(2.5 * e1 - 4.0 * e2)

    np.testing.assert_allclose(combined, 2.5 * tape.backward(e1) - 4.0 * tape.backward(e2), rtol=1e-14, atol=1e-14)


def test_backward_is_transpose_of_jacobian():
    """Тест: eᵀ(J u) = (Jᵀ e)ᵀ u, J — центральные разности."""
    x = np.array([0.7, -1.3, 2.1])
    tape, _ = record(_nonlinear, x)
    step = 1e-6
    jacobian = np.column_stack([
        (_nonlinear(x + step * np.eye(3)[i]) - _nonlinear(x - step * np.eye(3)[i])) / (2.0 * step)
        for i in range(3)
    ])
    e = np.array([0.3, -1.1, 0.8])
    u = np.array([1.0, 0.5, -2.0])

    assert e @ (jacobian @ u) == pytest.approx(tape.backward(e) @ u, rel=1e-8)
    np.testing.assert_allclose(tape.backward(np.eye(3)), jacobian.T, rtol=1e-8, atol=1e-9)
