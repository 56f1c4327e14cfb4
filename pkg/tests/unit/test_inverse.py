"""
Тесты обратного анализа: наклон МНК, сопряжённый шаг, градиент по ln E, спуск.
"""

from types import SimpleNamespace

import numpy as np
import pytest
import scipy.sparse as sp

from src.autodiff import ops
from src.autodiff.tape import record
from src.core.exceptions import AdjointSolveError, ConfigurationError
from src.mechanics.constitutive import ElasticParams, HenckyJ2, J2Params
from src.services.inverse_service import (
    InverseAnalysis,
    LossSpec,
    OptimizerState,
    adjoint_step,
    least_squares_slope,
    read_reference,
    settling_bar_problem,
    strip_footing_problem,
    write_reference,
)


def _bar_analysis():
    problem = settling_bar_problem(h=0.25, n_steps=3)
    analysis = InverseAnalysis(problem)
    analysis.set_loss(analysis.reference('terminal-displacement'))
    return analysis


def test_least_squares_slope():
    """Тест наклона МНК-прямой и его производных по силам."""
    slope, weights = least_squares_slope([1.0, 2.0, 3.0], [2.5, 4.5, 6.5])

    assert slope == pytest.approx(2.0)
    np.testing.assert_allclose(weights, [-0.5, 0.0, 0.5])


def test_least_squares_slope_degenerate():
    """Тест вырожденных данных для наклона."""
    with pytest.raises(ConfigurationError):
        least_squares_slope([1.0], [1.0])
    with pytest.raises(ConfigurationError):
        least_squares_slope([1.0, 1.0], [1.0, 2.0])


def test_loss_spec_validation():
    """Тест проверки вида функции потерь."""
    with pytest.raises(ConfigurationError):
        LossSpec(kind='huber')
    with pytest.raises(ConfigurationError):
        LossSpec(kind='terminal-displacement')

    loss = LossSpec(kind='slope', displacement=(0.0, 1.0, 2.0), force=(0.0, 3.0, 6.0))
    assert loss.reference_slope == pytest.approx(3.0)
    assert loss.columns == ('displacement', 'force')


def _slope_simulation(force):
    return SimpleNamespace(
        problem=None,
        records=[None] * len(force),
        final_positions=np.zeros((2, 2)),
        displacements=np.array([0.001, 0.002, 0.003]),
        responses=np.asarray(force, dtype=float),
    )


def test_slope_loss_is_normalised_squared_difference():
    """Тест потерь по наклону: (s − s_ref)²/(s·s_ref) и их производная по силам."""
    loss = LossSpec(kind='slope', displacement=(0.001, 0.002, 0.003), force=(-10.0, -20.0, -30.0))
    force = np.array([-8.0, -16.0, -24.0])

    value, y_bar, x_bar = loss.evaluate(_slope_simulation(force))

    assert value == pytest.approx((-8000.0 + 10000.0) ** 2 / (8000.0 * 10000.0))
    assert not np.any(x_bar)
    step = 1e-4
    for n in range(3):
        plus = force.copy()
        minus = force.copy()
        plus[n] += step
        minus[n] -= step
        fd = (loss.evaluate(_slope_simulation(plus))[0] - loss.evaluate(_slope_simulation(minus))[0]) / (2.0 * step)
        assert y_bar[n] == pytest.approx(fd, rel=1e-6)


def test_slope_loss_rejects_opposite_slopes():
    """Тест: наклоны разных знаков не сравниваются."""
    loss = LossSpec(kind='slope', displacement=(0.001, 0.002, 0.003), force=(-10.0, -20.0, -30.0))

    with pytest.raises(ConfigurationError):
        loss.evaluate(_slope_simulation([10.0, 20.0, 30.0]))


def test_read_reference_requires_columns(tmp_path):
    """Тест опорного CSV без нужных столбцов."""
    path = tmp_path / 'reference.csv'
    path.write_text('u,f\n0.0,1.0\n', encoding='utf-8')

    with pytest.raises(ConfigurationError) as exc_info:
        read_reference(path, 'slope')

    assert exc_info.value.key == 'inverse.reference_csv'


def test_reference_csv_is_readable(tmp_path):
    """Тест чтения записанного опорного отклика."""
    loss = LossSpec(kind='slope', displacement=(0.001, 0.002), force=(-10.0, -21.0))

    loaded = read_reference(write_reference(tmp_path / 'reference.csv', loss), 'slope')

    assert loaded.reference_slope == pytest.approx(loss.reference_slope)


def test_adjoint_step_on_scalar_equation():
    """Тест сопряжённого шага: r = θu − f, L = (u − u*)², dL/dθ = −2(u − u*)·f/θ²."""
    theta, f, target = 2.0, 3.0, 1.0
    u = f / theta

    tape, _ = record(lambda uu, th: ops.concatenate([th * uu - f, uu]), np.array([u]), np.array([theta]))
    jacobian = sp.csr_matrix([[theta]])
    seed = np.array([2.0 * (u - target)])

    adjoint = adjoint_step(tape, 1, jacobian, seed)

    assert adjoint[0] == pytest.approx(-2.0 * (u - target) * f / theta ** 2)


def test_adjoint_step_singular_system():
    """Тест вырожденной транспонированной системы."""
    tape, _ = record(lambda uu, th: ops.concatenate([th * uu, uu]), np.array([1.0]), np.array([0.0]))

    with pytest.raises(AdjointSolveError):
        adjoint_step(tape, 1, sp.csr_matrix([[0.0]]), np.array([1.0]), step=3)


def test_history_dependent_material_rejected():
    """Тест: пластичность с невыразимой историей не допускается к обратному анализу."""
    problem = settling_bar_problem(h=0.25, n_steps=2)
    problem.template = HenckyJ2(J2Params(ElasticParams(E=1e4, nu=0.0), 100.0))

    with pytest.raises(ConfigurationError):
        InverseAnalysis(problem)


def test_loss_required():
    """Тест: без опорного отклика потери не считаются."""
    analysis = InverseAnalysis(settling_bar_problem(h=0.25, n_steps=2))

    with pytest.raises(ConfigurationError) as exc_info:
        analysis.loss_value(np.log(1e4))

    assert exc_info.value.key == 'inverse.reference_csv'


def test_slope_loss_needs_reaction_box():
    """Тест: потери по наклону требуют ящика реакций."""
    analysis = InverseAnalysis(settling_bar_problem(h=0.25, n_steps=2))

    with pytest.raises(ConfigurationError):
        analysis.set_loss(LossSpec(kind='slope', displacement=(0.0, 1.0), force=(0.0, 1.0)))


def test_loss_vanishes_at_true_modulus():
    """Тест: при истинном модуле потери и градиент нулевые."""
    analysis = _bar_analysis()

    loss, gradient, _ = analysis.parameter_gradient(np.log(analysis.problem.E_true))

    assert loss == pytest.approx(0.0, abs=1e-20)
    assert gradient == pytest.approx(0.0, abs=1e-10)


def test_gradient_matches_finite_difference():
    """Тест сопряжённого градиента против центральной разности (осадка столба)."""
    analysis = _bar_analysis()
    theta = np.log(1.3 * analysis.problem.E_true)

    loss, gradient, _ = analysis.parameter_gradient(theta)
    fd = analysis.finite_difference_gradient(theta)

    assert loss > 0.0
    assert gradient > 0.0
    assert gradient == pytest.approx(fd, rel=1e-4)


def test_descent_recovers_modulus():
    """Тест градиентного спуска: модуль восстанавливается."""
    analysis = _bar_analysis()
    E_true = analysis.problem.E_true

    state = analysis.gradient_descent(np.log(1.5 * E_true), lr=0.4, loss_threshold=1e-6, max_iters=20)

    assert state.converged
    assert state.E == pytest.approx(E_true, rel=0.01)
    assert state.loss_history[-1] < state.loss_history[0]
    assert len(state.rows()) == state.iterations + 1


def test_descent_rejects_nonpositive_rate():
    """Тест недопустимого шага спуска."""
    analysis = _bar_analysis()

    with pytest.raises(ConfigurationError):
        analysis.gradient_descent(0.0, lr=0.0)


def test_optimizer_state_summary():
    """Тест сводки траектории спуска."""
    state = OptimizerState(theta=1.0, lr=0.2)
    state.theta_history = [0.5, 1.0]
    state.loss_history = [0.3, 0.01]
    state.gradient_history = [-2.5, -0.1]

    assert state.iterations == 1
    assert state.to_dict()['loss'] == 0.01
    assert state.rows()[0]['E'] == pytest.approx(np.exp(0.5))


@pytest.mark.slow
def test_strip_footing_slope_gradient():
    """Тест градиента потерь по наклону сила–осадка для штампа."""
    problem = strip_footing_problem(n_steps=3)
    analysis = InverseAnalysis(problem)
    analysis.set_loss(analysis.reference('slope'))
    theta = np.log(0.8 * problem.E_true)

    loss, gradient, simulation = analysis.parameter_gradient(theta)
    fd = analysis.finite_difference_gradient(theta)

    assert np.all(simulation.responses != 0.0)
    assert loss == pytest.approx(0.2 ** 2 / 0.8, rel=0.05)
    assert gradient == pytest.approx(fd, rel=1e-4)
