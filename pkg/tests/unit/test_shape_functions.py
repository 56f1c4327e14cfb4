"""
Тесты функций формы cpGIMP и линейных.
"""

import numpy as np
import pytest

from src.autodiff.tape import record
from src.core.exceptions import (
    ConfigurationError,
    InvalidKinematicsError,
    OutOfDomainError,
    ParticleDomainOverflowError,
    UnregisteredKindError,
)
from src.mechanics.shape_functions import (
    block_size,
    compute_stencil,
    get_kind,
    gimp_weight_1d,
    linear_weight_1d,
    update_particle_domain,
    weight_nd,
)
from src.models.grid import Grid


def _grid_2d() -> Grid:
    return Grid.from_box([0.0, 0.0], [2.0, 1.0], 0.25)


def test_block_sizes():
    """Тест размеров блоков зарегистрированных функций формы."""
    assert block_size('linear') == 3
    assert block_size('gimp') == 5
    assert block_size('cubic-bspline') == 7
    assert get_kind('gimp').reach == 2


def test_unregistered_kind():
    """Тест неизвестного типа функций формы."""
    with pytest.raises(UnregisteredKindError):
        get_kind('hermite')


def test_registered_but_not_implemented_kind():
    """Тест: зарегистрированный без реализации тип нельзя использовать."""
    grid = _grid_2d()
    x = np.array([[0.5, 0.5]])
    with pytest.raises(UnregisteredKindError):
        compute_stencil('cubic-bspline', x, np.full((1, 2), 0.06), grid.origin, grid.spacing, grid.shape)


def test_gimp_weight_continuous_at_branch_edges():
    """Тест непрерывности веса на границах ветвей."""
    h, lp = 1.0, 0.25
    eps = 1e-12
    for r in (lp, h - lp, h + lp):
        below, _ = gimp_weight_1d(np.array([r - eps]), lp, h)
        above, _ = gimp_weight_1d(np.array([r + eps]), lp, h)
        assert abs(below[0] - above[0]) < 1e-9


def test_gimp_weight_values():
    """Тест значений веса в характерных точках."""
    h, lp = 1.0, 0.25
    w, dw = gimp_weight_1d(np.array([0.0, 0.5, -0.5, 1.3]), lp, h)

    np.testing.assert_allclose(w, [1.0 - lp / (2.0 * h), 0.5, 0.5, 0.0])
    np.testing.assert_allclose(dw, [0.0, -1.0, 1.0, 0.0])


def test_gimp_derivative_matches_tape():
    """Тест аналитической производной веса против обратного прохода ленты."""
    h, lp = 0.5, 0.1
    xi = np.array([-0.58, -0.45, -0.2, -0.05, 0.03, 0.3, 0.47, 0.55])

    tape, _ = record(lambda x: gimp_weight_1d(x, lp, h)[0], xi)
    _, dw = gimp_weight_1d(xi, lp, h)

    np.testing.assert_allclose(tape.backward(np.ones(xi.size)), dw, atol=1e-14)


def test_gimp_half_width_bounds():
    """Тест: полуширина должна лежать в (0, h/2)."""
    with pytest.raises(ConfigurationError):
        gimp_weight_1d(np.array([0.1]), 0.5, 1.0)
    with pytest.raises(ConfigurationError):
        gimp_weight_1d(np.array([0.1]), 0.0, 1.0)


def test_linear_weight():
    """Тест линейной «шапочки»."""
    w, dw = linear_weight_1d(np.array([0.25, -0.75, 1.5]), 1.0)

    np.testing.assert_allclose(w, [0.75, 0.25, 0.0])
    np.testing.assert_allclose(dw, [-1.0, 1.0, 0.0])


@pytest.mark.parametrize('kind', ['gimp', 'linear'])
def test_stencil_partition_of_unity(kind):
    """Тест разбиения единицы и нулевой суммы градиентов."""
    grid = _grid_2d()
    rng = np.random.default_rng(3)
    x = rng.uniform([0.05, 0.05], [1.95, 0.95], size=(20, 2))
    lp = np.full_like(x, 0.0625)

    stencil = compute_stencil(kind, x, lp, grid.origin, grid.spacing, grid.shape)

    assert stencil.slots == 9
    np.testing.assert_allclose(stencil.weights.sum(axis=1), 1.0, atol=1e-13)
    np.testing.assert_allclose(stencil.grads.sum(axis=1), 0.0, atol=1e-11)


def test_stencil_reproduces_linear_field():
    """Тест: интерполяция линейного поля точна."""
    grid = _grid_2d()
    x = np.array([[0.4, 0.3], [1.1, 0.77], [1.62, 0.5]])
    lp = np.full_like(x, 0.0625)
    field = grid.node_positions() @ np.array([2.0, -1.0]) + 0.5

    stencil = compute_stencil('gimp', x, lp, grid.origin, grid.spacing, grid.shape)
    interpolated = np.sum(stencil.weights * field[stencil.nodes], axis=1)

    np.testing.assert_allclose(interpolated, x @ np.array([2.0, -1.0]) + 0.5, atol=1e-12)


def test_stencil_out_of_domain():
    """Тест: носитель частицы за пределами сетки."""
    grid = Grid(origin=np.zeros(1), spacing=np.ones(1), shape=(5,))
    x = np.array([[0.2]])

    with pytest.raises(OutOfDomainError) as exc_info:
        compute_stencil('gimp', x, np.array([[0.25]]), grid.origin, grid.spacing, grid.shape)

    assert exc_info.value.particle_id == 0


def test_update_particle_domain_stretch():
    """Тест: полуширина следует диагонали градиента деформации."""
    F = np.array([[[1.2, 0.1], [0.0, 0.8]]])
    lp0 = np.array([[0.1, 0.1]])

    lp = update_particle_domain(F, lp0, spacing=[0.5, 0.5])

    np.testing.assert_allclose(lp, [[0.12, 0.08]])


def test_update_particle_domain_overflow():
    """Тест переполнения области частицы."""
    F = np.array([[[1.0, 0.0], [0.0, 1.5]]])
    lp0 = np.array([[0.1, 0.2]])

    with pytest.raises(ParticleDomainOverflowError):
        update_particle_domain(F, lp0, spacing=[0.5, 0.5])


def test_update_particle_domain_inverted():
    """Тест вырожденного градиента деформации."""
    F = np.array([[[1.0, 0.0], [0.0, -0.5]]])

    with pytest.raises(InvalidKinematicsError):
        update_particle_domain(F, np.array([[0.1, 0.1]]))


@pytest.mark.parametrize('kind', ['gimp', 'linear'])
def test_weight_nd_partition_of_unity(kind):
    """Тест веса пары частица–узел: сумма по узлам равна 1, сумма градиентов 0, совпадение со стенсилом."""
    grid = _grid_2d()
    xp = np.array([0.61, 0.37])
    lp = np.array([0.0625, 0.0625])

    pairs = [weight_nd(kind, xp, lp, node, grid.spacing) for node in grid.node_positions()]
    total = sum(float(w) for w, _ in pairs)
    grad_total = np.sum([np.asarray(g, dtype=float) for _, g in pairs], axis=0)

    assert total == pytest.approx(1.0, abs=1e-13)
    np.testing.assert_allclose(grad_total, 0.0, atol=1e-11)

    stencil = compute_stencil(kind, xp[None], lp[None], grid.origin, grid.spacing, grid.shape)
    expected = [float(weight_nd(kind, xp, lp, node, grid.spacing)[0]) for node in grid.node_positions(stencil.nodes[0])]
    np.testing.assert_allclose(stencil.weights[0], expected, atol=1e-14)
