"""
Определяющие соотношения: упругость Генки, Генки + J2, неогуковская
упругость и линейная упругость малых деформаций.

Конечные деформации описываются через τ (Кирхгоф) как функцию приращения
f = I + ∇Δu и градиента F_n в начале шага. Знак: сжатие отрицательно.
Все функции записываемы на ленту; ветвление (упругость/пластичность)
выбирается по значениям.
"""

import logging
from abc import ABC
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import value_of
from src.core.exceptions import ConfigurationError, DomainError, InvalidKinematicsError
from src.mechanics import tensors as T

logger = logging.getLogger(__name__)

# Порог переключения на ряд для atanh(√y)/√y
SERIES_THRESHOLD = 1e-3


# ============================================================================
# ПАРАМЕТРЫ
# ============================================================================

@dataclass
class ElasticParams:
    """Упругие параметры; E может быть Tracked при обратном анализе."""
    E: Any
    nu: float

    @property
    def lam(self) -> Any:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    @property
    def mu(self) -> Any:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def constrained_modulus(self) -> Any:
        return self.lam + 2.0 * self.mu

    def validate(self) -> None:
        if not float(value_of(self.E)) > 0.0:
            raise ConfigurationError(f"Young's modulus must be positive, got {float(value_of(self.E))}", key='material.E')
        if not -1.0 < self.nu < 0.5:
            raise ConfigurationError(f"Poisson's ratio must lie in (-1, 0.5), got {self.nu}", key='material.nu')

    @classmethod
    def from_lame(cls, lam: float, mu: float) -> 'ElasticParams':
        nu = lam / (2.0 * (lam + mu))
        E = mu * (3.0 * lam + 2.0 * mu) / (lam + mu)
        return cls(E=E, nu=nu)


@dataclass
class J2Params:
    elastic: ElasticParams
    kappa: float

    def validate(self) -> None:
        self.elastic.validate()
        if not self.kappa > 0.0:
            raise ConfigurationError(f"Yield strength must be positive, got {self.kappa}", key='material.kappa')


# ============================================================================
# КИНЕМАТИКА
# ============================================================================

def check_kinematics(F: Any) -> np.ndarray:
    """det F по значениям; неположительный детерминант — ошибка с номером частицы."""
    J = np.linalg.det(value_of(F))
    bad = np.atleast_1d(J <= 0.0)
    if np.any(bad):
        pid = int(np.flatnonzero(bad)[0])
        raise InvalidKinematicsError(float(np.atleast_1d(J)[pid]), pid if np.ndim(J) else None)
    return J


def _atanh_ratio(y: np.ndarray) -> np.ndarray:
    """G(y) = atanh(√y)/√y; ряд при малых y (совпадающие собственные значения)."""
    small = y < SERIES_THRESHOLD
    safe = np.where(small, 0.25, y)
    s = np.sqrt(safe)
    closed = 0.5 * np.log((1.0 + s) / (1.0 - s)) / s
    series = 1.0 + y * (1.0 / 3.0 + y * (1.0 / 5.0 + y * (1.0 / 7.0 + y * (1.0 / 9.0 + y / 11.0))))
    return np.where(small, series, closed)


def _log_derivative(lam: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """
    D_ijkl = ∂(½ ln b)_ij / ∂b_kl для симметричного b = Q diag(λ) Qᵀ.

    Разделённые разности L_ab = (ln λa − ln λb)/(λa − λb) записаны как
    2 G(d²)/(λa + λb), d = (λa − λb)/(λa + λb): при λa = λb это 1/λa.
    """
    total = lam[..., :, None] + lam[..., None, :]
    d = (lam[..., :, None] - lam[..., None, :]) / total
    L = 2.0 * _atanh_ratio(d * d) / total
    D = 0.5 * np.einsum('...ia,...jb,...ab,...ka,...lb->...ijkl', Q, Q, L, Q, Q, optimize=True)
    return 0.5 * (D + np.swapaxes(D, -4, -3))


def hencky_strain(b: Any) -> Any:
    """
    ε = ½ ln b для симметричного положительно определённого b (..., 3, 3).

    Значение берётся из спектрального разложения; на ленту пишется линейный
    член D : (b − b_value) с нулевым значением и точной первой производной.
    Диагональный b без связи компонент считается поэлементно.
    """
    b_value = value_of(b)
    off = (b[..., 0, 1], b[..., 0, 2], b[..., 1, 2])
    if all(ops.is_constant(c) and not np.any(value_of(c)) for c in off):
        zero = np.zeros(b_value.shape[:-2])
        e = [0.5 * ops.log(b[..., a, a]) for a in range(3)]
        return T.from_components([
            [e[0], zero, zero],
            [zero, e[1], zero],
            [zero, zero, e[2]],
        ])

    lam, Q = np.linalg.eigh(b_value)
    if np.any(lam <= 0.0):
        raise DomainError('log', None, float(lam.min()))
    eps_value = 0.5 * np.einsum('...ia,...a,...ja->...ij', Q, np.log(lam), Q)
    eps_value = 0.5 * (eps_value + np.swapaxes(eps_value, -2, -1))
    if ops.is_constant(b):
        return eps_value

    D = _log_derivative(lam, Q)
    delta = ops.expand_dims(ops.expand_dims(b - b_value, -3), -3)
    linear = ops.sum_axis(ops.sum_axis(D * delta, axis=-1), axis=-1)
    return eps_value + linear


def hencky_kirchhoff(eps: Any, lam: Any, mu: Any) -> Any:
    """τ = λ tr(ε) I + 2μ ε."""
    return T.scale(T.identity_like(eps), lam * T.trace(eps)) + (2.0 * mu) * eps


def left_cauchy_green(F: Any) -> Any:
    return T.matmul(F, T.transpose(F))


def _exp_symmetric(eps: np.ndarray) -> np.ndarray:
    """exp(2ε) для симметричного ε (значения, без ленты)."""
    w, v = np.linalg.eigh(eps)
    return np.einsum('...ij,...j,...kj->...ik', v, np.exp(2.0 * w), v)


# ============================================================================
# МОДЕЛИ
# ============================================================================

class MaterialModel(ABC):
    """
    Базовая модель материала.

    Модели конечных деформаций реализуют kirchhoff(f, F_n, state),
    модели малых деформаций — small_strain_stress(eps, state).
    """

    kind: str = ''
    small_strain: bool = False
    # commit(trial) совпадает с trial по значениям
    differentiable_history: bool = True

    def __init__(self):
        self.logger = logging.getLogger(self.__class__.__name__)

    def initial_state(self, n_particles: int) -> Dict[str, np.ndarray]:
        return {}

    def kirchhoff(self, f: Any, F_n: Any, state: Dict[str, np.ndarray]) -> Tuple[Any, Dict[str, Any]]:
        raise NotImplementedError(f"{self.kind} is a small-strain model")

    def small_strain_stress(self, eps: Any, state: Dict[str, np.ndarray]) -> Tuple[Any, Dict[str, Any]]:
        raise NotImplementedError(f"{self.kind} is a finite-strain model")

    def commit(self, trial_state: Dict[str, Any]) -> Dict[str, np.ndarray]:
        """Зафиксировать историю по значениям принятого шага."""
        return {key: np.array(value_of(val)) for key, val in trial_state.items()}

    def with_modulus(self, E: Any) -> 'MaterialModel':
        """Копия модели с другим модулем Юнга (для обратного анализа)."""
        raise ConfigurationError(f"Material '{self.kind}' has no Young's modulus to identify", key='inverse.parameter')


class HenckyElastic(MaterialModel):
    kind = 'hencky'

    def __init__(self, params: ElasticParams):
        super().__init__()
        self.params = params

    def kirchhoff(self, f: Any, F_n: Any, state: Dict[str, np.ndarray]) -> Tuple[Any, Dict[str, Any]]:
        F = T.matmul(f, F_n)
        check_kinematics(F)
        eps = hencky_strain(left_cauchy_green(F))
        return hencky_kirchhoff(eps, self.params.lam, self.params.mu), {}

    def with_modulus(self, E: Any) -> 'HenckyElastic':
        return HenckyElastic(ElasticParams(E=E, nu=self.params.nu))


class HenckyJ2(MaterialModel):
    """Упругость Генки + J2 с радиальным возвратом в пространстве логарифмических деформаций."""

    kind = 'hencky-j2'
    differentiable_history = False

    def __init__(self, params: J2Params):
        super().__init__()
        self.params = params

    def initial_state(self, n_particles: int) -> Dict[str, np.ndarray]:
        return {
            'be': np.broadcast_to(np.eye(3), (n_particles, 3, 3)).copy(),
            'alpha': np.zeros(n_particles),
        }

    def kirchhoff(self, f: Any, F_n: Any, state: Dict[str, np.ndarray]) -> Tuple[Any, Dict[str, Any]]:
        check_kinematics(T.matmul(f, F_n))
        b_trial = T.matmul(T.matmul(f, state['be']), T.transpose(f))
        eps_trial = hencky_strain(b_trial)
        return self.return_map(eps_trial, state)

    def return_map(self, eps_trial: Any, state: Dict[str, np.ndarray]) -> Tuple[Any, Dict[str, Any]]:
        lam = self.params.elastic.lam
        mu = self.params.elastic.mu
        kappa = self.params.kappa

        tau_trial = hencky_kirchhoff(eps_trial, lam, mu)
        s_value = value_of(T.deviator(tau_trial))
        norm_value = np.sqrt(np.sum(s_value * s_value, axis=(-2, -1)))
        plastic = np.atleast_1d(norm_value > kappa)
        alpha_n = np.atleast_1d(state['alpha'])

        if not plastic.any():
            return tau_trial, {'eps_e': eps_trial, 'alpha': alpha_n}

        batch_shape = value_of(tau_trial).shape[:-2]
        tau_flat = tau_trial.reshape((-1, 3, 3))
        eps_flat = eps_trial.reshape((-1, 3, 3))
        p_tau = tau_flat[plastic]
        p_eps = eps_flat[plastic]

        s = T.deviator(p_tau)
        norm = ops.sqrt(T.double_contract(s, s))
        excess = norm - kappa
        n_hat = T.scale(s, 1.0 / norm)
        tau_plastic = p_tau - T.scale(n_hat, excess)
        delta_gamma = excess / (2.0 * mu)
        eps_plastic = p_eps - T.scale(n_hat, delta_gamma)

        tau = ops.merge(plastic, tau_plastic, tau_flat[~plastic]).reshape(batch_shape + (3, 3))
        eps = ops.merge(plastic, eps_plastic, eps_flat[~plastic]).reshape(batch_shape + (3, 3))
        alpha = alpha_n + ops.merge(plastic, delta_gamma, np.zeros(int((~plastic).sum())))
        return tau, {'eps_e': eps, 'alpha': alpha}

    def commit(self, trial_state: Dict[str, Any]) -> Dict[str, np.ndarray]:
        eps = np.array(value_of(trial_state['eps_e']))
        return {
            'be': _exp_symmetric(eps),
            'alpha': np.array(value_of(trial_state['alpha'])),
        }

    def with_modulus(self, E: Any) -> 'HenckyJ2':
        return HenckyJ2(J2Params(ElasticParams(E=E, nu=self.params.elastic.nu), self.params.kappa))


class NeoHookean(MaterialModel):
    """τ = μ(b − I) + λ ln J I."""

    kind = 'neo-hookean'

    def __init__(self, params: ElasticParams):
        super().__init__()
        self.params = params

    def kirchhoff(self, f: Any, F_n: Any, state: Dict[str, np.ndarray]) -> Tuple[Any, Dict[str, Any]]:
        F = T.matmul(f, F_n)
        check_kinematics(F)
        b = left_cauchy_green(F)
        identity = T.identity_like(b)
        tau = self.params.mu * (b - identity) + T.scale(identity, self.params.lam * ops.log(T.det(F)))
        return tau, {}

    def with_modulus(self, E: Any) -> 'NeoHookean':
        return NeoHookean(ElasticParams(E=E, nu=self.params.nu))


class LinearElastic(MaterialModel):
    """Линейная упругость малых деформаций: σ = λ tr(ε) I + 2μ ε."""

    kind = 'linear-elastic'
    small_strain = True

    def __init__(self, params: ElasticParams):
        super().__init__()
        self.params = params

    def initial_state(self, n_particles: int) -> Dict[str, np.ndarray]:
        return {'eps': np.zeros((n_particles, 3, 3))}

    def small_strain_stress(self, eps: Any, state: Dict[str, np.ndarray]) -> Tuple[Any, Dict[str, Any]]:
        """eps — полная деформация на конец шага."""
        return hencky_kirchhoff(eps, self.params.lam, self.params.mu), {'eps': eps}

    def with_modulus(self, E: Any) -> 'LinearElastic':
        return LinearElastic(ElasticParams(E=E, nu=self.params.nu))


# ============================================================================
# ФУНКЦИИ НАПРЯЖЕНИЙ
# ============================================================================

def _cauchy(tau: Any, F: Any) -> Any:
    return T.scale(tau, 1.0 / T.det(F))


def hencky_stress(F: Any, params: ElasticParams) -> Any:
    """σ = τ/J, τ = λ tr(ε) I + 2μ ε, ε = ½ ln(F Fᵀ)."""
    check_kinematics(F)
    eps = hencky_strain(left_cauchy_green(F))
    return _cauchy(hencky_kirchhoff(eps, params.lam, params.mu), F)


def neo_hookean_stress(F: Any, params: ElasticParams) -> Any:
    """σ = [μ(F Fᵀ − I) + λ ln J I] / J."""
    tau, _ = NeoHookean(params).kirchhoff(F, np.eye(3), {})
    return _cauchy(tau, F)


def j2_return_map(F_trial: Any, state: Dict[str, np.ndarray], params: J2Params) -> Tuple[Any, Dict[str, np.ndarray]]:
    """
    Возврат на поверхность √(2J₂) = κ.

    state: {'F': F в начале шага, 'be': упругий левый тензор Коши–Грина, 'alpha': накопленный Δγ}.
    Returns:
        (σ, новое состояние по значениям)
    """
    check_kinematics(F_trial)
    F_n = np.asarray(state.get('F', np.eye(3)), dtype=float)
    f = T.matmul(F_trial, np.linalg.inv(F_n))
    model = HenckyJ2(params)
    history = {'be': state.get('be', np.eye(3)), 'alpha': state.get('alpha', np.zeros(()))}
    tau, trial = model.kirchhoff(f, F_n, history)
    committed = model.commit(trial)
    committed['F'] = np.array(value_of(F_trial))
    return _cauchy(tau, F_trial), committed


# ============================================================================
# РЕЕСТР
# ============================================================================

def build_material(kind: str, params: Dict[str, Any]) -> MaterialModel:
    """
    Создать модель по имени и словарю параметров (СИ).

    Raises:
        ConfigurationError: неизвестная модель или недопустимые параметры
    """
    if kind == 'nor-sand':
        from src.mechanics.norsand import NorSand, NorSandParams
        ns = NorSandParams(**params)
        ns.validate()
        return NorSand(ns)

    if 'E' in params:
        elastic = ElasticParams(E=float(params['E']), nu=float(params.get('nu', 0.0)))
    elif 'lam' in params and 'mu' in params:
        elastic = ElasticParams.from_lame(float(params['lam']), float(params['mu']))
    else:
        raise ConfigurationError(f"Material '{kind}' needs E and nu (or lam and mu)", key='material')
    elastic.validate()

    if kind == 'hencky':
        return HenckyElastic(elastic)
    if kind == 'hencky-j2':
        j2 = J2Params(elastic, float(params.get('kappa', 0.0)))
        j2.validate()
        return HenckyJ2(j2)
    if kind == 'neo-hookean':
        return NeoHookean(elastic)
    if kind == 'linear-elastic':
        return LinearElastic(elastic)
    raise ConfigurationError(f"Unknown material kind: {kind}", key='material.kind')


MATERIAL_KINDS = ('hencky', 'hencky-j2', 'neo-hookean', 'linear-elastic', 'nor-sand')


__all__ = [
    'ElasticParams',
    'J2Params',
    'MaterialModel',
    'HenckyElastic',
    'HenckyJ2',
    'NeoHookean',
    'LinearElastic',
    'hencky_strain',
    'hencky_kirchhoff',
    'hencky_stress',
    'neo_hookean_stress',
    'j2_return_map',
    'check_kinematics',
    'build_material',
    'MATERIAL_KINDS',
]
