"""
Точечный драйвер: смешанное управление по деформациям и напряжениям.

Главные оси; компоненты с управлением по деформации получают заданное
приращение, остальные находятся Ньютоном так, чтобы напряжения держались
на целевых значениях. Касательная берётся обратным проходом по ленте
обновления модели.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import Tape, record, value_of
from src.core.exceptions import ConfigurationError, NewtonNonconvergenceError
from src.mechanics import tensors as T
from src.mechanics.constitutive import MaterialModel
from src.mechanics.norsand import stress_invariants

logger = logging.getLogger(__name__)

RESPONSE_COLUMNS = ('step', 'axial_strain', 'vol_strain', 'p', 'q', 'iterations')

# Абсолютный порог невязки относительно масштаба напряжений
ABSOLUTE_FLOOR = 1e-12


@dataclass
class LoadPath:
    """
    Программа нагружения в главных осях.

    controlled[a] = True — компонента a управляется деформацией
    (приращение strain_increment[a] за шаг), иначе напряжение держится
    на stress_target[a].
    """
    n_steps: int
    strain_increment: np.ndarray
    controlled: np.ndarray
    stress_target: np.ndarray

    def __post_init__(self):
        self.strain_increment = np.asarray(self.strain_increment, dtype=float).reshape(3)
        self.controlled = np.asarray(self.controlled, dtype=bool).reshape(3)
        self.stress_target = np.asarray(self.stress_target, dtype=float).reshape(3)
        if self.n_steps < 1:
            raise ConfigurationError("Load path needs at least one step", key='schedule.steps')

    @property
    def free_components(self) -> np.ndarray:
        return np.flatnonzero(~self.controlled)

    @property
    def driven_components(self) -> np.ndarray:
        return np.flatnonzero(self.controlled)


def triaxial_path(axial_strain: float, n_steps: int, radial_stress: float) -> LoadPath:
    """Дренированное трёхосное сжатие: осевая деформация задана, боковое напряжение постоянно."""
    return LoadPath(
        n_steps=n_steps,
        strain_increment=np.array([axial_strain / n_steps, 0.0, 0.0]),
        controlled=np.array([True, False, False]),
        stress_target=np.array([0.0, radial_stress, radial_stress]),
    )


@dataclass
class StressPointResponse:
    """Кривая отклика: строка 0 — начальное состояние."""
    strain: np.ndarray
    stress: np.ndarray
    iterations: List[int] = field(default_factory=list)
    residual_history: List[List[float]] = field(default_factory=list)

    @property
    def axial_strain(self) -> np.ndarray:
        return self.strain[:, 0]

    @property
    def vol_strain(self) -> np.ndarray:
        return self.strain.sum(axis=1)

    @property
    def p(self) -> np.ndarray:
        return stress_invariants(self.stress)[0]

    @property
    def q(self) -> np.ndarray:
        return stress_invariants(self.stress)[1]

    def rows(self) -> List[Dict[str, Any]]:
        p, q = stress_invariants(self.stress)
        iterations = [0] + list(self.iterations)
        return [
            {
                'step': k,
                'axial_strain': float(self.strain[k, 0]),
                'vol_strain': float(self.strain[k].sum()),
                'p': float(p[k]),
                'q': float(q[k]),
                'iterations': int(iterations[k]),
            }
            for k in range(self.strain.shape[0])
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'steps': len(self.iterations),
            'max_iterations': max(self.iterations) if self.iterations else 0,
            'peak_q': float(np.max(self.q)),
            'final_q': float(self.q[-1]),
            'final_vol_strain': float(self.vol_strain[-1]),
        }


# ============================================================================
# ОБНОВЛЕНИЕ В ТОЧКЕ
# ============================================================================

def _diagonal(v: Any) -> Any:
    zero = np.zeros(value_of(v).shape[0])
    return T.from_components([
        [v[:, 0], zero, zero],
        [zero, v[:, 1], zero],
        [zero, zero, v[:, 2]],
    ])


def _principal(A: Any) -> Any:
    return ops.stack([A[:, a, a] for a in range(3)], axis=-1)


def point_update(
        model: MaterialModel,
        strain: np.ndarray,
        strain_increment: Any,
        state: Dict[str, np.ndarray]
) -> Tuple[Any, Dict[str, Any]]:
    """
    Главные напряжения (1, 3) после приращения главных деформаций.

    Модели конечных деформаций получают F = diag(exp ε) и возвращают σ = τ/J.
    """
    eps_n = np.asarray(strain, dtype=float).reshape(1, 3)
    d_eps = strain_increment.reshape((1, 3))

    if hasattr(model, 'principal_update'):
        return model.principal_update(d_eps, state)

    if model.small_strain:
        sigma, trial = model.small_strain_stress(_diagonal(eps_n + d_eps), state)
        return _principal(sigma), trial

    f = _diagonal(ops.exp(d_eps))
    F_n = _diagonal(np.exp(eps_n))
    tau, trial = model.kirchhoff(f, F_n, state)
    J = ops.exp(ops.sum_axis(eps_n + d_eps, axis=-1))
    return _principal(tau) / ops.expand_dims(J, -1), trial


def _full_increment(path: LoadPath, free_increment: Any) -> Any:
    driven = path.driven_components
    return ops.add(
        ops.place(3, path.free_components, free_increment),
        ops.place(3, driven, path.strain_increment[driven]),
    )


# ============================================================================
# ДРАЙВЕР
# ============================================================================

def stress_point_drive(
        model: MaterialModel,
        path: LoadPath,
        tolerance: float = 1e-10,
        max_iterations: int = 30,
        log_manager: Optional[Any] = None,
        session_id: Optional[str] = None
) -> StressPointResponse:
    """
    Пройти программу нагружения.

    Сходимость шага: ‖R_k‖ ≤ tolerance·‖R_0‖ или ‖R_k‖ ≤ 1e-12·масштаб напряжений;
    начальное приближение — нулевые приращения свободных компонент.

    Raises:
        NewtonNonconvergenceError: шаг не сошёлся за max_iterations
    """
    state = model.initial_state(1)
    strain = np.zeros(3)
    free = path.free_components
    k = free.size

    sigma0, _ = point_update(model, strain, np.zeros(3), state)
    strains = [strain.copy()]
    stresses = [np.array(value_of(sigma0)).reshape(3)]
    response = StressPointResponse(strain=np.zeros((1, 3)), stress=np.zeros((1, 3)))
    tape = Tape()

    for step in range(1, path.n_steps + 1):
        x = np.zeros(k)
        history: List[float] = []
        iterations = 0

        if k:
            scale = max(1.0, float(np.max(np.abs(stresses[-1]))), float(np.max(np.abs(path.stress_target[free]))))

            def residual(xx: Any) -> Any:
                sigma, _ = point_update(model, strain, _full_increment(path, xx), state)
                return sigma[0, free] - path.stress_target[free]

            r0 = None
            for iteration in range(max_iterations + 1):
                tape, r = record(residual, x, tape=tape)
                norm = float(np.linalg.norm(r))
                if r0 is None:
                    r0 = norm
                history.append(norm / r0 if r0 > 0.0 else 0.0)
                if log_manager is not None:
                    log_manager.log_iteration(session_id, step, iteration, history[-1])
                if norm <= tolerance * r0 or norm <= ABSOLUTE_FLOOR * scale:
                    iterations = iteration
                    break
                if iteration == max_iterations:
                    raise NewtonNonconvergenceError(step, history, context={'driver': 'stress_point'})
                jacobian = tape.backward(np.eye(k)).T
                x = x + np.linalg.solve(jacobian, -r)

        increment = np.array(value_of(_full_increment(path, x)), dtype=float)
        sigma, trial = point_update(model, strain, increment, state)
        state = model.commit(trial)
        strain = strain + increment
        strains.append(strain.copy())
        stresses.append(np.array(value_of(sigma)).reshape(3))
        response.iterations.append(iterations)
        response.residual_history.append(history)

    response.strain = np.array(strains)
    response.stress = np.array(stresses)
    logger.info(
        f"✓ Точечный драйвер ({model.kind}): {path.n_steps} шагов, "
        f"макс. итераций {max(response.iterations) if response.iterations else 0}"
    )
    return response


def convergence_orders(histories: List[List[float]], floor: float = 1e-13) -> List[float]:
    """
    Оценки порядка сходимости log(r_{k+1}/r_k) / log(r_k/r_{k−1}) по последним трём невязкам шага.

    Учитываются шаги, где последняя невязка выше floor (не на уровне округления).
    """
    orders = []
    for history in histories:
        if len(history) < 3:
            continue
        r_prev, r_mid, r_last = history[-3:]
        if r_last <= floor or r_mid <= 0.0 or r_prev <= r_mid:
            continue
        orders.append(float(np.log(r_last / r_mid) / np.log(r_mid / r_prev)))
    return orders


__all__ = [
    'LoadPath',
    'StressPointResponse',
    'RESPONSE_COLUMNS',
    'triaxial_path',
    'point_update',
    'stress_point_drive',
    'convergence_orders',
]
