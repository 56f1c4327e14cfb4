"""
Тесты моделей материала: Генки, Генки-J2, нео-Гук, линейная упругость.
"""

import numpy as np
import pytest
from scipy.linalg import logm
from scipy.spatial.transform import Rotation

from src.autodiff.tape import record
from src.core.exceptions import ConfigurationError, InvalidKinematicsError
from src.mechanics.constitutive import (
    ElasticParams,
    HenckyElastic,
    J2Params,
    LinearElastic,
    NeoHookean,
    build_material,
    check_kinematics,
    hencky_strain,
    hencky_stress,
    j2_return_map,
    neo_hookean_stress,
)


def _plane_F(a, b, c, d):
    return np.array([[[a, b, 0.0], [c, d, 0.0], [0.0, 0.0, 1.0]]])


def test_lame_round_trip():
    """Тест пересчёта E, ν ↔ λ, μ."""
    params = ElasticParams(E=1e4, nu=0.25)

    assert params.lam == pytest.approx(4000.0)
    assert params.mu == pytest.approx(4000.0)
    back = ElasticParams.from_lame(params.lam, params.mu)
    assert back.E == pytest.approx(1e4)
    assert back.nu == pytest.approx(0.25)
    assert params.constrained_modulus == pytest.approx(12000.0)


def test_invalid_elastic_params():
    """Тест недопустимых упругих параметров."""
    with pytest.raises(ConfigurationError):
        ElasticParams(E=-1.0, nu=0.2).validate()
    with pytest.raises(ConfigurationError):
        ElasticParams(E=1.0, nu=0.5).validate()


def test_hencky_strain_matches_matrix_log():
    """Тест логарифмической деформации против scipy.linalg.logm."""
    F = _plane_F(1.1, 0.3, 0.05, 0.95)
    b = F @ np.swapaxes(F, -1, -2)

    eps = hencky_strain(b)

    np.testing.assert_allclose(eps[0], 0.5 * np.real(logm(b[0])), atol=1e-12)


def test_hencky_strain_near_isotropic_branch():
    """Тест ветви ряда при почти равных собственных значениях."""
    F = _plane_F(1.01, 1e-5, 0.0, 1.01)
    b = F @ np.swapaxes(F, -1, -2)

    eps = hencky_strain(b)

    np.testing.assert_allclose(eps[0], 0.5 * np.real(logm(b[0])), atol=1e-14)


def test_hencky_uniaxial_stress():
    """Тест одноосного растяжения без бокового эффекта (ν = 0)."""
    params = ElasticParams(E=1e4, nu=0.0)
    stretch = 1.2
    F = np.diag([stretch, 1.0, 1.0])[None]

    sigma = hencky_stress(F, params)

    assert sigma[0, 0, 0] == pytest.approx(1e4 * np.log(stretch) / stretch)
    assert sigma[0, 1, 1] == pytest.approx(0.0, abs=1e-12)


def test_stress_free_reference():
    """Тест нулевых напряжений при F = I."""
    params = ElasticParams(E=1e6, nu=0.3)
    F = np.eye(3)[None]

    np.testing.assert_allclose(hencky_stress(F, params), 0.0, atol=1e-12)
    np.testing.assert_allclose(neo_hookean_stress(F, params), 0.0, atol=1e-12)


def test_hencky_stress_derivative_matches_finite_difference():
    """Тест производной напряжений Генки по F против центральной разности."""
    params = ElasticParams(E=1e4, nu=0.3)
    F0 = _plane_F(1.05, 0.2, -0.1, 0.9)

    tape, _ = record(lambda F: hencky_stress(F, params), F0)
    adjoint = tape.backward(np.eye(9))

    step = 1e-6
    for i, j in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        plus = F0.copy()
        minus = F0.copy()
        plus[0, i, j] += step
        minus[0, i, j] -= step
        fd = (hencky_stress(plus, params) - hencky_stress(minus, params)).ravel() / (2.0 * step)
        np.testing.assert_allclose(adjoint[3 * i + j], fd, rtol=1e-6, atol=1e-4)


def test_inverted_kinematics():
    """Тест неположительного det F."""
    F = np.stack([np.eye(3), np.diag([1.0, -1.0, 1.0])])

    with pytest.raises(InvalidKinematicsError) as exc_info:
        check_kinematics(F)

    assert exc_info.value.particle_id == 1


def test_j2_return_map_lands_on_yield_surface():
    """Тест радиального возврата: после шага ‖dev σ‖ = κ."""
    kappa = 100.0
    params = J2Params(ElasticParams(E=1e4, nu=0.3), kappa)
    F = np.diag([1.1, 1.0 / 1.1, 1.0])

    sigma, state = j2_return_map(F, {}, params)

    s = sigma - np.trace(sigma) / 3.0 * np.eye(3)
    assert np.linalg.norm(s) == pytest.approx(kappa, rel=1e-10)
    assert float(np.asarray(state['alpha']).ravel()[0]) > 0.0


def test_j2_elastic_step_keeps_history():
    """Тест упругого шага J2: пластическая деформация не растёт."""
    params = J2Params(ElasticParams(E=1e4, nu=0.3), 1e6)
    F = np.diag([1.01, 1.0, 1.0])

    sigma, state = j2_return_map(F, {}, params)

    np.testing.assert_allclose(sigma, hencky_stress(F[None], params.elastic)[0], atol=1e-10)
    assert float(np.asarray(state['alpha']).ravel()[0]) == 0.0


def test_linear_elastic_small_strain():
    """Тест линейной упругости малых деформаций."""
    model = LinearElastic(ElasticParams(E=2e5, nu=0.25))
    eps = np.zeros((1, 3, 3))
    eps[0, 0, 0] = 1e-3

    sigma, trial = model.small_strain_stress(eps, model.initial_state(1))

    assert sigma[0, 0, 0] == pytest.approx(model.params.constrained_modulus * 1e-3)
    assert sigma[0, 1, 1] == pytest.approx(model.params.lam * 1e-3)
    assert model.small_strain


def test_build_material_registry():
    """Тест создания моделей по имени."""
    assert isinstance(build_material('hencky', {'E': 1e4, 'nu': 0.2}), HenckyElastic)
    assert isinstance(build_material('neo-hookean', {'E': 1e4, 'nu': 0.2}), NeoHookean)
    linear = build_material('linear-elastic', {'lam': 6e5, 'mu': 6e5})
    assert linear.params.lam == pytest.approx(6e5)

    with pytest.raises(ConfigurationError):
        build_material('cam-clay', {'E': 1e4, 'nu': 0.2})
    with pytest.raises(ConfigurationError):
        build_material('hencky-j2', {'E': 1e4, 'nu': 0.2})
    with pytest.raises(ConfigurationError):
        build_material('hencky', {'nu': 0.2})


def test_with_modulus_copies_model():
    """Тест копии модели с другим модулем Юнга."""
    model = build_material('hencky', {'E': 1e4, 'nu': 0.2})
    other = model.with_modulus(2e4)

    assert other.params.E == 2e4
    assert model.params.E == 1e4
    assert other.params.nu == 0.2


# ============================================================================
# ТРЁХМЕРНАЯ КИНЕМАТИКА И ОБЪЕКТИВНОСТЬ
# ============================================================================

F_GENERAL = np.array([[
    [1.10, 0.20, 0.05],
    [0.10, 0.95, 0.08],
    [-0.03, 0.04, 1.02],
]])

ROTATION = Rotation.from_euler('xyz', [0.3, -0.4, 0.7]).as_matrix()


def test_hencky_strain_matches_matrix_log_3d():
    """Тест логарифмической деформации общего трёхмерного F против logm."""
    b = F_GENERAL @ np.swapaxes(F_GENERAL, -1, -2)

    eps = hencky_strain(b)

    np.testing.assert_allclose(eps[0], 0.5 * np.real(logm(b[0])), atol=1e-12)
    np.testing.assert_allclose(eps[0], eps[0].T, atol=0.0)


def test_hencky_strain_of_rotation_is_zero():
    """Тест: чистый поворот даёт b = I и нулевую деформацию (совпадающие собственные значения)."""
    b = ROTATION[None] @ ROTATION.T[None]

    np.testing.assert_allclose(hencky_strain(b), 0.0, atol=1e-14)


def test_hencky_stress_derivative_3d():
    """Тест производной напряжений Генки по всем компонентам трёхмерного F."""
    params = ElasticParams(E=1e4, nu=0.3)

    tape, _ = record(lambda F: hencky_stress(F, params), F_GENERAL)
    adjoint = tape.backward(np.eye(9))

    step = 1e-6
    for i in range(3):
        for j in range(3):
            plus = F_GENERAL.copy()
            minus = F_GENERAL.copy()
            plus[0, i, j] += step
            minus[0, i, j] -= step
            fd = (hencky_stress(plus, params) - hencky_stress(minus, params)).ravel() / (2.0 * step)
            np.testing.assert_allclose(adjoint[3 * i + j], fd, rtol=1e-6, atol=1e-4)


@pytest.mark.parametrize('stress', [
    lambda F: hencky_stress(F, ElasticParams(E=1e6, nu=0.3)),
    lambda F: neo_hookean_stress(F, ElasticParams(E=1e6, nu=0.3)),
    lambda F: j2_return_map(F[0], {}, J2Params(ElasticParams(E=1e6, nu=0.3), 1e3))[0][None],
], ids=['hencky', 'neo-hookean', 'hencky-j2'])
def test_objectivity_under_rotation(stress):
    """Тест объективности: σ(R·F) = R·σ(F)·Rᵀ."""
    sigma = stress(F_GENERAL)[0]
    rotated = stress(ROTATION[None] @ F_GENERAL)[0]

    scale = np.max(np.abs(sigma))
    np.testing.assert_allclose(rotated, ROTATION @ sigma @ ROTATION.T, atol=1e-10 * scale)


@pytest.mark.parametrize('stress', [hencky_stress, neo_hookean_stress], ids=['hencky', 'neo-hookean'])
def test_pure_rotation_is_stress_free(stress):
    """Тест: поворот без деформации не создаёт напряжений."""
    params = ElasticParams(E=1e6, nu=0.3)

    np.testing.assert_allclose(stress(ROTATION[None], params), 0.0, atol=1e-6)


@pytest.mark.parametrize('stress', [
    lambda F, p: hencky_stress(F, p),
    lambda F, p: neo_hookean_stress(F, p),
    lambda F, p: j2_return_map(F[0], {}, J2Params(p, 1e12))[0][None],
], ids=['hencky', 'neo-hookean', 'hencky-j2'])
def test_small_strain_matches_linear_elasticity(stress):
    """Тест: при F = I + δ∇u напряжения совпадают с линейной упругостью до O(δ²)."""
    params = ElasticParams(E=1e6, nu=0.3)
    grad_u = np.array([[0.3, -0.2, 0.5], [0.1, 0.4, -0.3], [0.2, 0.1, -0.6]])
    delta = 1e-5
    eps = 0.5 * delta * (grad_u + grad_u.T)
    linear = params.lam * np.trace(eps) * np.eye(3) + 2.0 * params.mu * eps

    sigma = stress((np.eye(3) + delta * grad_u)[None], params)[0]

    np.testing.assert_allclose(sigma, linear, atol=1e-8 * params.E)
