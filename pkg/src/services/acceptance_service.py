"""
Приёмочные проверки сценариев: аналитические решения и пороги.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from src.autodiff.tape import record
from src.core.exceptions import ConfigurationError
from src.mechanics.constitutive import ElasticParams, HenckyElastic, NeoHookean
from src.mechanics.shape_functions import block_size
from src.mechanics.stress_point import StressPointResponse, convergence_orders
from src.models.grid import Grid, LoadSchedule, NodeConstraint
from src.models.particles import ParticleSet
from src.services.base_service import CheckResult, RunResult
from src.services.jacobian_service import BlockPartition, dense_jacobian, sparse_jacobian
from src.services.mpm_service import MpmSolver, SolverOptions, linear_solve
from src.services.poromechanics_service import (
    ConsolidationResult,
    ConsolidationSetup,
    PoroMpmSolver,
    PoroParams,
    build_column,
)

logger = logging.getLogger(__name__)

GRAVITY = 9.81

# Пороги по умолчанию; секция checks сценария их переопределяет
DEFAULT_THRESHOLDS: Dict[str, Dict[str, Any]] = {
    'bar': {
        'stress_error': 2.0e-2,
        'max_iterations': 4,
        'newton_slope': 1.8,
        'refinement_levels': [2, 3, 4, 5, 6],
        'convergence_slope': [1.0, 2.0],
    },
    'cantilever': {
        'small_load_fraction': 0.1,
        'small_load_tol': 0.05,
        'self_convergence': 0.01,
        'refinement_h': [],
    },
    'consolidation': {
        'profile_l2': 0.02,
        'settlement': 0.01,
    },
    'triaxial': {
        'max_iterations': 6,
        'convergence_order': 1.8,
        'behaviour': 'contractive',
        'softening': 0.01,
    },
    'inverse': {
        'modulus_error': 0.01,
        'max_iterations': 20,
        'gradient_fd': 1.0e-4,
    },
    'jacobian-bench': {
        'equivalence': 1.0e-12,
        'sparse_variation': 3.0,
        'speedup': 4.0,
    },
}


def thresholds(kind: str, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Raises:
        ConfigurationError: для сценария не зарегистрированы проверки
    """
    if kind not in DEFAULT_THRESHOLDS:
        raise ConfigurationError(f"No acceptance checks registered for scenario '{kind}'", key='scenario.kind')
    merged = dict(DEFAULT_THRESHOLDS[kind])
    merged.update(overrides or {})
    return merged


# ============================================================================
# СТОЛБ ПОД СОБСТВЕННЫМ ВЕСОМ
# ============================================================================

def bar_analytic_stress(Y: np.ndarray, density: float, length: float, gravity: float = GRAVITY) -> np.ndarray:
    """σ = −ρ0·g·(l0 − Y) для частицы с начальной высотой Y."""
    return -density * gravity * (length - np.asarray(Y, dtype=float))


def bar_stress_error(
        sigma: np.ndarray,
        Y: np.ndarray,
        volume0: np.ndarray,
        density: float,
        length: float,
        gravity: float = GRAVITY
) -> float:
    """Σ|σ − σ_a|·V0 / (g·ρ0·l0·ΣV0)."""
    exact = bar_analytic_stress(Y, density, length, gravity)
    return float(np.sum(np.abs(sigma - exact) * volume0) / (gravity * density * length * np.sum(volume0)))


def convergence_slope(h: Sequence[float], errors: Sequence[float]) -> float:
    """Наклон log(ошибка) от log(h) по МНК."""
    slope, _ = np.polyfit(np.log(np.asarray(h, dtype=float)), np.log(np.asarray(errors, dtype=float)), 1)
    return float(slope)


def newton_orders(run: RunResult) -> List[float]:
    return convergence_orders([s.residual_history for s in run.steps])


def order_check(name: str, orders: Sequence[float], limit: float) -> CheckResult:
    """Медиана порядков сходимости; без измеримых шагов проверка не пройдена."""
    if not orders:
        return CheckResult.not_measurable(
            name, limit, "not measurable: no step kept three residuals above round-off"
        )
    return CheckResult.at_least(
        name, float(np.median(orders)), limit, detail=f"{len(orders)} steps with a measurable tail"
    )


def bar_checks(
        run: RunResult,
        error: float,
        limits: Dict[str, Any],
        study: Optional[Dict[str, List[float]]] = None
) -> List[CheckResult]:
    """Точность напряжений, число итераций, порядок Ньютона; наклон сходимости по сетке при наличии study."""
    checks = [
        CheckResult.at_most('stress_error', error, limits['stress_error']),
        CheckResult.at_most('max_newton_iterations', run.max_iterations, limits['max_iterations']),
    ]
    checks.append(order_check('newton_slope', newton_orders(run), limits['newton_slope']))
    if study:
        low, high = limits['convergence_slope']
        checks.append(CheckResult.between('convergence_slope', convergence_slope(study['h'], study['error']), low, high))
    return checks


# ============================================================================
# КОНСОЛЬ
# ============================================================================

def plane_strain_bending_stiffness(E: float, nu: float, thickness: float) -> float:
    """E/(1 − ν²)·t³/12 на единицу ширины."""
    return E / (1.0 - nu * nu) * thickness ** 3 / 12.0


def euler_bernoulli_tip(load: float, length: float, bending_stiffness: float) -> float:
    """FL³/(3EI)."""
    return load * length ** 3 / (3.0 * bending_stiffness)


def elastica_tip_deflection(load: float, length: float, bending_stiffness: float) -> float:
    """
    Прогиб конца нерастяжимой консоли под мёртвой концевой силой без
    допущения о малых поворотах.

    EI θ'' = −F cos θ, θ(0) = 0, θ'(L) = 0; пристрелка по θ'(0).
    """
    alpha = abs(load) / bending_stiffness
    if alpha == 0.0:
        return 0.0

    def shoot(kappa0: float) -> np.ndarray:
        solution = solve_ivp(
            lambda s, y: [y[1], -alpha * np.cos(y[0]), np.cos(y[0]), np.sin(y[0])],
            (0.0, length),
            [0.0, kappa0, 0.0, 0.0],
            rtol=1e-10,
            atol=1e-12,
        )
        return solution.y[:, -1]

    upper = alpha * length
    kappa = brentq(lambda k: shoot(k)[1], 1e-9 * upper, upper, xtol=1e-14 * upper)
    return float(shoot(kappa)[3])


def cantilever_checks(
        small_load_tip: Optional[float],
        small_load_oracle: Optional[float],
        refined_tips: Optional[Sequence[float]],
        limits: Dict[str, Any]
) -> List[CheckResult]:
    checks = []
    if small_load_tip is not None:
        checks.append(CheckResult.within(
            'small_load_tip', small_load_tip, small_load_oracle, limits['small_load_tol'],
            detail=f"{limits['small_load_fraction']:g} of the load, Euler-Bernoulli oracle"
        ))
    if refined_tips is not None and len(refined_tips) >= 2:
        coarse, fine = refined_tips[-2], refined_tips[-1]
        change = abs(fine - coarse) / abs(fine)
        checks.append(CheckResult.at_most('self_convergence', change, limits['self_convergence']))
    return checks


# ============================================================================
# КОНСОЛИДАЦИЯ
# ============================================================================

def consolidation_checks(result: ConsolidationResult, limits: Dict[str, Any]) -> List[CheckResult]:
    checks = [
        CheckResult.at_most(f"profile_l2_tv_{profile.t_v:g}", profile.l2_error, limits['profile_l2'])
        for profile in result.profiles
    ]
    checks.append(CheckResult.at_most('final_settlement', result.settlement_error, limits['settlement']))
    return checks


# ============================================================================
# ТРЁХОСНОЕ СЖАТИЕ
# ============================================================================

def triaxial_checks(
        response: StressPointResponse,
        limits: Dict[str, Any],
        reference: Optional[StressPointResponse] = None
) -> List[CheckResult]:
    """
    contractive: q проходит пик раньше последнего шага и к концу падает
    больше чем на долю softening от пика, к пику образец сжат;
    dilative: итоговая объёмная деформация > 0.

    reference — отклик контрактивного образца: пик dilative должен быть выше.
    """
    summary = response.to_dict()
    q = response.q
    vol = response.vol_strain
    peak = int(np.argmax(q))
    last = len(q) - 1
    checks = [
        CheckResult.at_most('max_newton_iterations', summary['max_iterations'], limits['max_iterations']),
        order_check('convergence_order', convergence_orders(response.residual_history), limits['convergence_order']),
    ]

    if limits['behaviour'] == 'dilative':
        checks.append(CheckResult.at_least('net_dilation', vol[-1], 0.0, detail='final volumetric strain'))
        if reference is not None:
            checks.append(CheckResult.at_least(
                'peak_above_contractive', q[peak], float(np.max(reference.q)),
                detail='peak q of the contractive specimen'
            ))
        return checks

    drop = 1.0 - q[-1] / q[peak] if q[peak] > 0.0 else 0.0
    checks.append(CheckResult(
        'peak_then_softening', float(drop), float(limits['softening']), 0.0,
        bool(peak < last and drop > limits['softening']),
        f"peak at step {peak} of {last}, relative drop of q after the peak"
    ))
    checks.append(CheckResult.at_most('contraction_at_peak', vol[peak], 0.0, detail='volumetric strain at peak q'))
    return checks


# ============================================================================
# ОБРАТНЫЙ АНАЛИЗ
# ============================================================================

def inverse_checks(
        E_found: float,
        E_true: float,
        iterations: int,
        limits: Dict[str, Any],
        gradient_pairs: Optional[Sequence[Sequence[float]]] = None
) -> List[CheckResult]:
    """gradient_pairs — пары (сопряжённый, конечные разности) в проверяемых точках."""
    checks = [
        CheckResult.within('recovered_modulus', E_found, E_true, limits['modulus_error']),
        CheckResult.at_most('descent_iterations', iterations, limits['max_iterations']),
    ]
    for k, (adjoint, fd) in enumerate(gradient_pairs or []):
        scale = max(abs(fd), 1e-300)
        checks.append(CheckResult.at_most(
            f"gradient_fd_{k}", abs(adjoint - fd) / scale, limits['gradient_fd'],
            detail=f"adjoint {adjoint:.8e}, central difference {fd:.8e}"
        ))
    return checks


# ============================================================================
# РАЗРЕЖЕННЫЙ ≡ ПЛОТНЫЙ ЯКОБИАН
# ============================================================================

@dataclass
class EquivalenceResult:
    problem: str
    dim: int
    n_dof: int
    max_rel_diff: float
    passes: int
    expected_passes: int

    def to_row(self) -> Dict[str, Any]:
        return {
            'problem': self.problem,
            'dim': self.dim,
            'n_dof': self.n_dof,
            'max_rel_diff': self.max_rel_diff,
            'passes': self.passes,
            'expected_passes': self.expected_passes,
        }


EQUIVALENCE_COLUMNS = ('problem', 'dim', 'n_dof', 'max_rel_diff', 'passes', 'expected_passes')


def jacobian_equivalence(solver: MpmSolver, problem: str, dt: Optional[float] = None) -> EquivalenceResult:
    """
    Сравнить блочную и построчную сборку на ленте невязки после одного
    шага Ньютона первого шага нагружения.
    """
    ctx = solver.begin_step(1, dt)
    dofs = ctx.dofs
    partition = BlockPartition.from_dofs(solver.grid, dofs, solver.kind)
    tape, r = record(lambda du: solver.residual(du, ctx), np.zeros(dofs.n_free))
    J0, _ = sparse_jacobian(tape, partition)
    du = linear_solve(J0, -r)
    tape, _ = record(lambda x: solver.residual(x, ctx), du)

    dense, _ = dense_jacobian(tape, dofs.n_free)
    sparse, passes = sparse_jacobian(tape, partition, check='always')
    scale = float(np.max(np.abs(dense.data))) if dense.nnz else 1.0
    diff = abs(dense - sparse)
    max_rel = float(diff.max()) / scale if diff.nnz else 0.0
    result = EquivalenceResult(
        problem=problem,
        dim=solver.dim,
        n_dof=dofs.n_free,
        max_rel_diff=max_rel,
        passes=passes,
        expected_passes=block_size(solver.kind) ** solver.dim,
    )
    logger.info(
        f"✓ {problem}: {dofs.n_free} неизвестных, расхождение {max_rel:.2e}, "
        f"{passes} проходов (ожидается {result.expected_passes})"
    )
    return result


EQUIVALENCE_PROBLEMS = ('bar', 'cantilever', 'consolidation', 'smoke-3d')


def equivalence_solver(problem: str, shape_function: str = 'gimp') -> Tuple[MpmSolver, Optional[float]]:
    """
    Малые постановки для проверки эквивалентности: 1D столб, 2D консоль,
    связанная колонна, 3D куб. По каждой оси не меньше пяти свободных узлов.

    Returns:
        (решатель, Δt первого шага или None)

    Raises:
        ConfigurationError: неизвестная постановка
    """
    options = SolverOptions(shape_function=shape_function)
    if problem == 'bar':
        particles = ParticleSet.fill_box([0.0], [2.0], 0.25, 2, density=80.0)
        solver = MpmSolver(
            HenckyElastic(ElasticParams(E=1.0e4, nu=0.0)),
            Grid.from_box([0.0], [2.0], 0.25),
            particles,
            constraints=[NodeConstraint([-1.0], [0.0], (0,))],
            options=options,
            gravity=[-GRAVITY],
        )
        return solver, None
    if problem == 'cantilever':
        particles = ParticleSet.fill_box([0.0, 0.0], [2.0, 0.5], 0.125, 2, density=1000.0)
        particles.apply_point_load(particles.select([1.875, 0.0], [2.0, 0.5]), [0.0, -2.0e4])
        solver = MpmSolver(
            HenckyElastic(ElasticParams(E=1.2e7, nu=0.2)),
            Grid.from_box([0.0, 0.0], [2.0, 0.5], 0.125),
            particles,
            constraints=[NodeConstraint([-1.0, -1.0], [0.0, 1.5], (0, 1))],
            options=options,
        )
        return solver, None
    if problem == 'consolidation':
        setup = ConsolidationSetup(
            params=PoroParams(lam=6.0e5, mu=6.0e5),
            height=1.0,
            cells=8,
            dt=10.0,
            dt_max=10.0,
            shape_function=shape_function,
        )
        grid, particles, constraints = build_column(setup)
        solver = PoroMpmSolver(
            setup.params,
            grid,
            particles,
            constraints=constraints,
            schedule=LoadSchedule(n_steps=1, traction_ramp=False),
            options=options,
        )
        return solver, setup.dt
    if problem == 'smoke-3d':
        particles = ParticleSet.fill_box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.2, 2, density=1000.0)
        solver = MpmSolver(
            NeoHookean(ElasticParams(E=1.0e6, nu=0.3)),
            Grid.from_box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.2),
            particles,
            constraints=[NodeConstraint([-1.0, -1.0, -1.0], [2.0, 2.0, 0.0], (0, 1, 2))],
            options=options,
            gravity=[0.0, 0.0, -GRAVITY],
        )
        return solver, None
    raise ConfigurationError(f"Unknown equivalence problem '{problem}'", key='bench.equivalence')


def bench_checks(
        equivalence: Sequence[EquivalenceResult],
        sparse_diff: Sequence[float],
        dense_diff: Sequence[float],
        limits: Dict[str, Any]
) -> List[CheckResult]:
    """Эквивалентность и число проходов; масштабирование времени — если есть замеры обеих стратегий."""
    checks = []
    for item in equivalence:
        checks.append(CheckResult.at_most(f"equivalence_{item.problem}", item.max_rel_diff, limits['equivalence']))
        checks.append(CheckResult(
            f"passes_{item.problem}", float(item.passes), float(item.expected_passes), 0.0,
            item.passes == item.expected_passes
        ))
    if len(sparse_diff) >= 2 and min(sparse_diff) > 0.0:
        checks.append(CheckResult.at_most(
            'sparse_variation', max(sparse_diff) / min(sparse_diff), limits['sparse_variation']
        ))
    if sparse_diff and dense_diff and sparse_diff[-1] > 0.0:
        checks.append(CheckResult.at_least('finest_speedup', dense_diff[-1] / sparse_diff[-1], limits['speedup']))
    return checks


__all__ = [
    'DEFAULT_THRESHOLDS',
    'EQUIVALENCE_COLUMNS',
    'EQUIVALENCE_PROBLEMS',
    'EquivalenceResult',
    'thresholds',
    'bar_analytic_stress',
    'bar_stress_error',
    'convergence_slope',
    'newton_orders',
    'order_check',
    'bar_checks',
    'plane_strain_bending_stiffness',
    'euler_bernoulli_tip',
    'elastica_tip_deflection',
    'cantilever_checks',
    'consolidation_checks',
    'triaxial_checks',
    'inverse_checks',
    'jacobian_equivalence',
    'equivalence_solver',
    'bench_checks',
]
