"""
Nor-Sand: модель критического состояния для песков.

Малые деформации в главных осях, массивы (P, 3); сжатие отрицательно.
Упругость с давлением p = p0·exp(−ε_v^e / λ̃) и модулем сдвига G ∝ −p.
Возврат на поверхность решается локальным Ньютоном с якобианом от AD,
а решение подключается к внешней ленте одним шагом по теореме о неявной
функции, поэтому касательная на внешней ленте точная.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Any, Dict, Tuple

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import Tape, record, value_of
from src.core.exceptions import ConfigurationError, DomainError, ReturnMapNonconvergenceError
from src.mechanics.constitutive import MaterialModel

logger = logging.getLogger(__name__)

SQRT_2_3 = float(np.sqrt(2.0 / 3.0))
SQRT_3_2 = float(np.sqrt(1.5))

# Допуск на f пробного состояния относительно |p_i|
YIELD_TOLERANCE = 1e-10
MAX_BACKTRACKS = 8

# Опорное давление линии критического состояния: v_c0 задан при 1 кПа
CSL_REFERENCE_PRESSURE = 1.0e3


@dataclass
class NorSandParams:
    """Параметры Nor-Sand (давления в Па, сжатие отрицательно)."""
    M: float = 1.27
    N: float = 0.4
    h_mod: float = 70.0
    lambda_tilde: float = 0.02
    v_c0: float = 1.8911
    v0: float = 1.75
    p_i0: float = -332.30e3
    K0: float = 0.45
    p0: float = -390.0e3
    chi_i: float = 3.5
    shear_ratio: float = 0.75
    tolerance: float = 1e-12
    max_iterations: int = 50

    def validate(self) -> None:
        checks = [
            (self.M > 0.0, 'M', "M must be positive"),
            (0.0 <= self.N < 1.0, 'N', "N must lie in [0, 1)"),
            (self.h_mod > 0.0, 'h_mod', "hardening modulus must be positive"),
            (self.lambda_tilde > 0.0, 'lambda_tilde', "lambda_tilde must be positive"),
            (self.v0 > 1.0, 'v0', "specific volume must exceed 1"),
            (self.p_i0 < 0.0, 'p_i0', "image pressure must be negative (compression)"),
            (self.p0 < 0.0, 'p0', "initial mean stress must be negative (compression)"),
            (self.K0 > 0.0, 'K0', "K0 must be positive"),
            (self.chi_i > 0.0, 'chi_i', "chi_i must be positive"),
            (self.shear_ratio > 0.0, 'shear_ratio', "shear_ratio must be positive"),
        ]
        for ok, key, message in checks:
            if not ok:
                raise ConfigurationError(f"Nor-Sand: {message}", key=f'material.{key}')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def loose(cls) -> 'NorSandParams':
        return cls()

    @classmethod
    def dense(cls) -> 'NorSandParams':
        return cls(h_mod=120.0, p_i0=-534.47e3, v0=1.57, p0=-425.0e3, K0=0.38)

    @property
    def initial_stress(self) -> np.ndarray:
        """Главные напряжения при K0: (σ_a, σ_r, σ_r), p = p0."""
        sigma_a = 3.0 * self.p0 / (1.0 + 2.0 * self.K0)
        sigma_r = self.K0 * sigma_a
        return np.array([sigma_a, sigma_r, sigma_r])


# ============================================================================
# ЗАВИСИМОСТИ МОДЕЛИ
# ============================================================================

def pressure(ev_e: Any, params: NorSandParams) -> Any:
    return params.p0 * ops.exp(-ev_e / params.lambda_tilde)


def shear_modulus(p: Any, params: NorSandParams) -> Any:
    return -p * (params.shear_ratio / params.lambda_tilde)


def yield_ratio(p: Any, p_i: Any, params: NorSandParams) -> Any:
    """η на поверхности текучести как функция p/p_i."""
    M, N = params.M, params.N
    if N == 0.0:
        return M * (1.0 + ops.log(p_i / p))
    return (M / N) * (1.0 - (1.0 - N) * ops.power(p / p_i, N / (1.0 - N)))


def yield_function(p: Any, q: Any, p_i: Any, params: NorSandParams) -> Any:
    """f = q + η·p (допустимо f ≤ 0)."""
    return q + yield_ratio(p, p_i, params) * p


def critical_volume(p_i: Any, params: NorSandParams) -> Any:
    """v_c = v_c0 − λ̃ ln(−p_i / 1 кПа)."""
    return params.v_c0 - params.lambda_tilde * ops.log(-p_i / CSL_REFERENCE_PRESSURE)


def max_image_ratio(psi: Any, params: NorSandParams) -> Any:
    """Предельное отношение p_i/p при параметре состояния ψ_i."""
    M, N, chi = params.M, params.N, params.chi_i
    if N == 0.0:
        return ops.exp(-chi * psi / M)
    return ops.power(1.0 + N * chi * psi / M, -(1.0 - N) / N)


def stress_invariants(sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(p, q) для главных напряжений (..., 3)."""
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.mean(axis=-1)
    s = sigma - p[..., None]
    q = SQRT_3_2 * np.sqrt(np.sum(s * s, axis=-1))
    return p, q


# ============================================================================
# ЛОКАЛЬНАЯ ЗАДАЧА
# ============================================================================

def local_residual(
        x: Any,
        ev_trial: Any,
        es_trial: Any,
        ev_total: Any,
        p_i_n: np.ndarray,
        params: NorSandParams
) -> Any:
    """
    Невязка возврата для неизвестных x = (ε_v^e, Δλ, p_i/|p_i,n|), форма (m, 3).

    Все три уравнения безразмерны.
    """
    scale = np.abs(p_i_n)
    ev_e = x[:, 0]
    dl = x[:, 1]
    p_i = x[:, 2] * scale

    p = pressure(ev_e, params)
    G = shear_modulus(p, params)
    es_e = es_trial - dl
    q = 3.0 * G * es_e
    dilatancy = (params.M - q / (-p)) / (1.0 - params.N)

    r_volume = ev_e - ev_trial - dilatancy * dl
    r_yield = yield_function(p, q, p_i, params) / scale

    v = params.v0 * ops.exp(ev_total)
    psi = v - critical_volume(p_i, params)
    p_image = p * max_image_ratio(psi, params)
    r_hardening = (p_i - p_i_n - params.h_mod * (p_image - p_i) * dl) / scale

    return ops.stack([r_volume, r_yield, r_hardening], axis=-1)


def _block_seeds(m: int, width: int) -> np.ndarray:
    """Затравки (m·width, width): столбец c выделяет c-е уравнение каждой частицы."""
    seeds = np.zeros((m * width, width))
    for c in range(width):
        seeds[c::width, c] = 1.0
    return seeds


def _local_jacobian(tape: Tape, m: int) -> np.ndarray:
    adjoint = tape.backward(_block_seeds(m, 3))
    return adjoint.reshape(m, 3, 3).transpose(0, 2, 1)


def _finite(x: np.ndarray, inputs: Tuple[Any, ...], params: NorSandParams) -> bool:
    try:
        r = local_residual(x, *inputs, params)
    except DomainError:
        return False
    return bool(np.all(np.isfinite(r)))


def solve_local(
        ev_trial: np.ndarray,
        es_trial: np.ndarray,
        ev_total: np.ndarray,
        p_i_n: np.ndarray,
        params: NorSandParams
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Локальный Ньютон по значениям.

    Returns:
        (x*, якобиан в x*, число итераций)

    Raises:
        ReturnMapNonconvergenceError: не сошлось за max_iterations
    """
    m = ev_trial.shape[0]
    inputs = (ev_trial, es_trial, ev_total, p_i_n)
    x = np.stack([ev_trial, np.zeros(m), p_i_n / np.abs(p_i_n)], axis=-1)
    tape = Tape()
    history = []

    for iteration in range(params.max_iterations + 1):
        tape, r = record(lambda xx: local_residual(xx, *inputs, params), x, tape=tape)
        residual = float(np.max(np.abs(r)))
        history.append(residual)
        jacobian = _local_jacobian(tape, m)
        if residual <= params.tolerance:
            return x, jacobian, iteration
        if iteration == params.max_iterations:
            break
        try:
            delta = np.linalg.solve(jacobian, -r.reshape(m, 3)[..., None])[..., 0]
        except np.linalg.LinAlgError as e:
            raise ReturnMapNonconvergenceError(
                iteration, residual, {'reason': 'singular local Jacobian', 'error': str(e)}
            ) from e

        step = 1.0
        for _ in range(MAX_BACKTRACKS):
            if _finite(x + step * delta, inputs, params):
                break
            step *= 0.5
        x = x + step * delta

    worst = int(np.argmax(np.max(np.abs(r.reshape(m, 3)), axis=1)))
    raise ReturnMapNonconvergenceError(
        params.max_iterations,
        history[-1],
        {'particle': worst, 'residual_history': history, 'plastic_points': m}
    )


def reattach(
        x_star: np.ndarray,
        jacobian: np.ndarray,
        inputs: Tuple[Any, ...],
        params: NorSandParams
) -> Any:
    """x = x* − J⁻¹ R(x*, входы): значения ≈ x*, производные по входам по теореме о неявной функции."""
    r = local_residual(x_star, *inputs, params)
    correction = ops.sum_axis(np.linalg.inv(jacobian) * ops.expand_dims(r, 1), axis=-1)
    return x_star - correction


# ============================================================================
# ОБНОВЛЕНИЕ НАПРЯЖЕНИЙ
# ============================================================================

def norsand_update(
        strain_increment: Any,
        state: Dict[str, np.ndarray],
        params: NorSandParams
) -> Tuple[Any, Dict[str, Any]]:
    """
    Шаг Nor-Sand по приращению главных деформаций (P, 3).

    state: eps_e (P, 3) упругие деформации, p_i (P,), eps_v (P,) полная
    объёмная деформация, alpha (P,) накопленный Δλ.

    Returns:
        (главные напряжения (P, 3), пробное состояние для commit)
    """
    eps_e_n = np.asarray(state['eps_e'], dtype=float)
    p_i_n = np.asarray(state['p_i'], dtype=float)
    alpha_n = np.asarray(state['alpha'], dtype=float)

    eps_trial = eps_e_n + strain_increment
    ev_trial = ops.sum_axis(eps_trial, axis=-1)
    e_trial = eps_trial - ops.expand_dims(ev_trial, -1) / 3.0
    ev_total = np.asarray(state['eps_v'], dtype=float) + ops.sum_axis(strain_increment, axis=-1)

    p_trial = pressure(ev_trial, params)
    G_trial = shear_modulus(p_trial, params)
    sigma_trial = ops.expand_dims(p_trial, -1) + ops.expand_dims(2.0 * G_trial, -1) * e_trial

    e_value = value_of(e_trial)
    norm_value = np.sqrt(np.sum(e_value * e_value, axis=-1))
    q_value = 3.0 * value_of(G_trial) * SQRT_2_3 * norm_value
    f_value = value_of(yield_function(value_of(p_trial), q_value, p_i_n, params))
    plastic = (f_value > YIELD_TOLERANCE * np.abs(p_i_n)) & (norm_value > 0.0)

    if not plastic.any():
        return sigma_trial, {'eps_e': eps_trial, 'p_i': p_i_n, 'eps_v': ev_total, 'alpha': alpha_n}

    e_p = e_trial[plastic]
    norm = ops.sqrt(ops.sum_axis(e_p * e_p, axis=-1))
    es_trial = SQRT_2_3 * norm
    inputs = (ev_trial[plastic], es_trial, ev_total[plastic], p_i_n[plastic])

    x_star, jacobian, iterations = solve_local(*(value_of(v) for v in inputs), params)
    logger.debug(f"Nor-Sand: возврат {int(plastic.sum())} точек за {iterations} итераций")
    x = reattach(x_star, jacobian, inputs, params)

    ev_e = x[:, 0]
    dl = x[:, 1]
    p_i = x[:, 2] * np.abs(p_i_n[plastic])
    p = pressure(ev_e, params)
    G = shear_modulus(p, params)
    es_e = es_trial - dl
    n_hat = e_p / ops.expand_dims(norm, -1)
    sigma_plastic = ops.expand_dims(p, -1) + ops.expand_dims(2.0 * SQRT_3_2 * G * es_e, -1) * n_hat
    eps_plastic = ops.expand_dims(ev_e / 3.0, -1) + ops.expand_dims(SQRT_3_2 * es_e, -1) * n_hat

    elastic = ~plastic
    sigma = ops.merge(plastic, sigma_plastic, sigma_trial[elastic])
    trial_state = {
        'eps_e': ops.merge(plastic, eps_plastic, eps_trial[elastic]),
        'p_i': ops.merge(plastic, p_i, p_i_n[elastic]),
        'eps_v': ev_total,
        'alpha': ops.merge(plastic, alpha_n[plastic] + dl, alpha_n[elastic]),
    }
    return sigma, trial_state


class NorSand(MaterialModel):
    """Nor-Sand для точечного драйвера (главные оси, малые деформации)."""

    kind = 'nor-sand'
    small_strain = True

    def __init__(self, params: NorSandParams):
        super().__init__()
        self.params = params

    def initial_state(self, n_particles: int) -> Dict[str, np.ndarray]:
        sigma0 = self.params.initial_stress
        G0 = float(shear_modulus(self.params.p0, self.params))
        deviator0 = (sigma0 - sigma0.mean()) / (2.0 * G0)
        return {
            'eps_e': np.tile(deviator0, (n_particles, 1)),
            'p_i': np.full(n_particles, self.params.p_i0),
            'eps_v': np.zeros(n_particles),
            'alpha': np.zeros(n_particles),
        }

    def principal_update(self, strain_increment: Any, state: Dict[str, np.ndarray]) -> Tuple[Any, Dict[str, Any]]:
        return norsand_update(strain_increment, state, self.params)

    def yield_value(self, sigma: np.ndarray, state: Dict[str, np.ndarray]) -> np.ndarray:
        p, q = stress_invariants(sigma)
        return value_of(yield_function(p, q, np.asarray(state['p_i']), self.params))

    def state_parameter(self, state: Dict[str, np.ndarray]) -> np.ndarray:
        """ψ_i = v − v_c(p_i)."""
        v = self.params.v0 * np.exp(np.asarray(state['eps_v']))
        return v - value_of(critical_volume(np.asarray(state['p_i']), self.params))


__all__ = [
    'CSL_REFERENCE_PRESSURE',
    'NorSandParams',
    'NorSand',
    'norsand_update',
    'solve_local',
    'reattach',
    'local_residual',
    'pressure',
    'shear_modulus',
    'yield_ratio',
    'yield_function',
    'critical_volume',
    'max_image_ratio',
    'stress_invariants',
]
