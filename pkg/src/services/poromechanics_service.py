"""
Связанная u–p постановка для насыщенной среды (малые деформации).

Неизвестные узла: приращения перемещений и полное поровое давление.
Импульс: σ = σ′ − p_w I; масса (неявный Эйлер, несжимаемые компоненты):
w·tr(Δε)·V + Δt·(k/μ_f)·∇w·∇p·V. Дренированная граница — p = 0 в узлах.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.autodiff import ops
from src.core.exceptions import ConfigurationError
from src.mechanics import tensors as T
from src.mechanics.constitutive import ElasticParams, LinearElastic, MaterialModel
from src.mechanics.shape_functions import Stencil
from src.models.grid import Grid, LoadSchedule, NodeConstraint
from src.models.particles import ParticleSet
from src.services.base_service import RunResult, StepResult
from src.services.jacobian_service import JacobianAssembler
from src.services.mpm_service import (
    MpmSolver,
    NewtonOutcome,
    SolverOptions,
    StepContext,
    StepInputs,
    interpolate,
    interpolate_gradient,
    internal_force_slots,
    nodal_field,
)

logger = logging.getLogger(__name__)

TERZAGHI_TERMS = 200
# Фактор времени финального дренированного шага
DRAINED_TIME_FACTOR = 1.0e3

PROFILE_COLUMNS = ('t_v', 'time', 'depth', 'pressure', 'terzaghi')
SETTLEMENT_COLUMNS = ('time', 't_v', 'settlement', 'degree', 'terzaghi_degree', 'flux')


# ============================================================================
# ПАРАМЕТРЫ
# ============================================================================

@dataclass
class PoroParams:
    """Скелет (λ, μ), проницаемость k (м²), вязкость жидкости μ_f (Па·с)."""
    lam: float
    mu: float
    k: float = 1.0e-12
    mu_f: float = 0.1
    rho_f: float = 1000.0

    @property
    def mobility(self) -> float:
        return self.k / self.mu_f

    @property
    def constrained_modulus(self) -> float:
        return self.lam + 2.0 * self.mu

    @property
    def c_v(self) -> float:
        """c_v = (k/μ_f)(λ + 2μ)."""
        return self.mobility * self.constrained_modulus

    def validate(self) -> None:
        for name in ('k', 'mu_f', 'mu'):
            value = getattr(self, name)
            if not value > 0.0:
                raise ConfigurationError(f"{name} must be positive, got {value}", key=f'material.{name}')
        if not self.lam + 2.0 * self.mu / 3.0 > 0.0:
            raise ConfigurationError("Bulk modulus must be positive", key='material.lam')

    def elastic(self) -> ElasticParams:
        return ElasticParams.from_lame(self.lam, self.mu)

    def to_dict(self) -> Dict[str, float]:
        return {
            'lam': self.lam,
            'mu': self.mu,
            'k': self.k,
            'mu_f': self.mu_f,
            'rho_f': self.rho_f,
            'c_v': self.c_v,
        }


# ============================================================================
# РЕШЕНИЕ ТЕРЦАГИ
# ============================================================================

def terzaghi_pressure(depth: Any, t_v: float, height: float = 1.0, n_terms: int = TERZAGHI_TERMS) -> np.ndarray:
    """
    p/p0 = Σ_m 4/((2m+1)π) · sin((2m+1)πz/(2H)) · exp(−(2m+1)²π²T_v/4).

    z — глубина от дренированной границы.
    """
    z = np.asarray(depth, dtype=float)
    m = np.arange(n_terms)
    M = (2 * m + 1) * np.pi
    terms = (4.0 / M)[None, :] * np.sin(np.outer(z.ravel(), M) / (2.0 * height)) * np.exp(-M * M * t_v / 4.0)[None, :]
    return terms.sum(axis=1).reshape(z.shape)


def consolidation_degree(t_v: float, n_terms: int = TERZAGHI_TERMS) -> float:
    """U(T_v) = 1 − Σ_m 2/M² · exp(−M² T_v), M = (2m+1)π/2."""
    M = (2 * np.arange(n_terms) + 1) * np.pi / 2.0
    return float(1.0 - np.sum(2.0 / (M * M) * np.exp(-M * M * t_v)))


# ============================================================================
# РЕШАТЕЛЬ
# ============================================================================

class PoroMpmSolver(MpmSolver):
    """Решатель u–p: последняя компонента узла — поровое давление."""

    def __init__(
            self,
            params: PoroParams,
            grid: Grid,
            particles: ParticleSet,
            constraints: Optional[List[NodeConstraint]] = None,
            schedule: Optional[LoadSchedule] = None,
            options: Optional[SolverOptions] = None,
            gravity: Optional[Sequence[float]] = None,
            assembler: Optional[JacobianAssembler] = None,
            log_manager: Optional[Any] = None,
            session_id: Optional[str] = None
    ):
        params.validate()
        self.params = params
        super().__init__(
            LinearElastic(params.elastic()),
            grid,
            particles,
            constraints=constraints,
            schedule=schedule,
            options=options,
            gravity=gravity,
            assembler=assembler,
            log_manager=log_manager,
            session_id=session_id,
        )
        if self.particles.pore_pressure is None:
            self.particles.pore_pressure = np.zeros(particles.n)

    @property
    def n_comp(self) -> int:
        return self.grid.dim + 1

    @property
    def pressure_component(self) -> int:
        return self.grid.dim

    def begin_step(self, step: int, dt: Optional[float] = None) -> StepContext:
        if dt is None or not dt > 0.0:
            raise ConfigurationError(f"Time increment must be positive, got {dt}", key='schedule.dt')
        return super().begin_step(step, dt)

    def particle_contributions(
            self,
            U: Any,
            stencil: Stencil,
            inputs: StepInputs,
            ctx: StepContext,
            model: MaterialModel
    ) -> Tuple[Any, Dict[str, Any]]:
        d = self.dim
        grad = interpolate_gradient(U, stencil, d + 1)
        grad_u = grad[:, :d, :]
        grad_p = grad[:, d, :]
        pore_pressure = interpolate(U, stencil)[:, d]

        strain = T.symmetric_part(T.embed(grad_u, d) - T.IDENTITY)
        sigma_eff, trial = model.small_strain_stress(strain + inputs.state['eps'], inputs.state)
        sigma = sigma_eff - T.scale(T.identity_like(sigma_eff), pore_pressure)
        volume = self.particles.volume0 * T.det(inputs.F)

        momentum = internal_force_slots(T.scale(sigma, volume), stencil.grads, d) \
            - self.external_force_slots(stencil.weights, ctx)
        storage = stencil.weights * ops.expand_dims(T.trace(strain) * volume, -1)
        flux = ops.sum_axis(stencil.grads * grad_p[:, None, :], axis=-1) \
            * ops.expand_dims((ctx.dt * self.params.mobility) * volume, -1)
        mass = storage + flux

        contrib = ops.concatenate([momentum, ops.expand_dims(mass, -1)], axis=-1)
        return contrib, {'trial': trial, 'stress': sigma, 'pore_pressure': pore_pressure}

    def up_residual(self, u_nodes: np.ndarray, p_nodes: np.ndarray, ctx: StepContext) -> np.ndarray:
        """
        Связанная невязка по свободным неизвестным для узловых полей
        приращений перемещений (N, d) и давлений (N,).
        """
        field_ = np.concatenate(
            [np.asarray(u_nodes, dtype=float).reshape(self.grid.n_nodes, self.dim),
             np.asarray(p_nodes, dtype=float).reshape(self.grid.n_nodes, 1)],
            axis=1,
        ).ravel()
        return np.asarray(self.residual(field_[ctx.dofs.free_flat], ctx))

    def g2p_and_update(self, ctx: StepContext, outcome: NewtonOutcome) -> None:
        super().g2p_and_update(ctx, outcome)
        self.particles.pore_pressure = np.array(outcome.aux['pore_pressure'])

    def drained_flux(self, ctx: StepContext, outcome: NewtonOutcome) -> float:
        """Расход через дренированную границу: −Σ реакций по давлению / Δt."""
        comps = ctx.dofs.prescribed_flat % self.n_comp
        pressure_rows = comps == self.pressure_component
        return float(-np.sum(self.reactions(ctx, outcome)[pressure_rows]) / ctx.dt)

    def surface_node(self, height: float) -> int:
        """Узел сетки на верхней поверхности колонны (ось d−1)."""
        x = self.grid.node_positions()
        axis = self.dim - 1
        on_top = np.isclose(x[:, axis], height, atol=1e-9 * float(self.grid.spacing[axis]))
        if self.dim > 1:
            on_top &= np.isclose(x[:, 0], 0.0, atol=1e-9 * float(self.grid.spacing[0]))
        nodes = np.flatnonzero(on_top)
        if nodes.size == 0:
            raise ConfigurationError("Column top does not coincide with a grid line", key='geometry.height')
        return int(nodes[0])


# ============================================================================
# ОДНОМЕРНАЯ КОНСОЛИДАЦИЯ
# ============================================================================

@dataclass
class ConsolidationSetup:
    """Колонна высоты H под мгновенной нагрузкой t̂, дренаж сверху."""
    params: PoroParams
    height: float = 10.0
    cells: int = 100
    particles_per_cell: int = 2
    load: float = 1.0e3
    dim: int = 1
    dt: float = 100.0
    dt_growth: float = 1.2
    dt_max: float = 1.0e4
    output_times_tv: List[float] = field(default_factory=lambda: [0.05, 0.2, 0.5, 0.9])
    drained: bool = True
    shape_function: str = 'gimp'
    jacobian: str = 'sparse'
    tolerance: float = 1e-10

    @property
    def h(self) -> float:
        return self.height / self.cells

    def time_of(self, t_v: float) -> float:
        return t_v * self.height ** 2 / self.params.c_v

    def validate(self) -> None:
        self.params.validate()
        if self.dim not in (1, 2):
            raise ConfigurationError("Consolidation column must be 1D or 2D", key='geometry.dim')
        if not self.dt > 0.0 or not self.dt_max >= self.dt:
            raise ConfigurationError("Time increments must satisfy 0 < dt <= dt_max", key='schedule.dt')
        if self.dt_growth < 1.0:
            raise ConfigurationError("dt_growth must be >= 1", key='schedule.dt_growth')
        if any(t <= 0.0 for t in self.output_times_tv):
            raise ConfigurationError("Output time factors must be positive", key='schedule.output_times_tv')


@dataclass
class PressureProfile:
    t_v: float
    time: float
    depth: np.ndarray
    pressure: np.ndarray
    oracle: np.ndarray

    @property
    def l2_error(self) -> float:
        """Относительная L2-ошибка по частицам."""
        return float(np.linalg.norm(self.pressure - self.oracle) / np.linalg.norm(self.oracle))

    def rows(self) -> List[Dict[str, float]]:
        order = np.argsort(self.depth)
        return [
            {
                't_v': self.t_v,
                'time': self.time,
                'depth': float(self.depth[i]),
                'pressure': float(self.pressure[i]),
                'terzaghi': float(self.oracle[i]),
            }
            for i in order
        ]


@dataclass
class ConsolidationResult:
    profiles: List[PressureProfile] = field(default_factory=list)
    history: List[Dict[str, float]] = field(default_factory=list)
    final_settlement: float = 0.0
    expected_settlement: float = 0.0
    run: RunResult = field(default_factory=RunResult)

    @property
    def settlement_error(self) -> float:
        return abs(self.final_settlement - self.expected_settlement) / self.expected_settlement

    def profile_at(self, t_v: float) -> PressureProfile:
        for profile in self.profiles:
            if np.isclose(profile.t_v, t_v):
                return profile
        raise KeyError(t_v)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'profiles': {f"{p.t_v:g}": p.l2_error for p in self.profiles},
            'final_settlement': self.final_settlement,
            'expected_settlement': self.expected_settlement,
            'settlement_error': self.settlement_error,
            **self.run.to_dict(),
        }


def build_column(setup: ConsolidationSetup) -> Tuple[Grid, ParticleSet, List[NodeConstraint]]:
    """
    Сетка, частицы и граничные условия колонны.

    Основание закреплено и непроницаемо; боковые грани (2D) — ролики;
    верх нагружен и дренирован.
    """
    h = setup.h
    d = setup.dim
    axis = d - 1
    box_min = np.zeros(d)
    box_max = np.full(d, h)
    box_max[axis] = setup.height
    grid = Grid.from_box(box_min, box_max, h)
    particles = ParticleSet.fill_box(box_min, box_max, h, setup.particles_per_cell, density=1.0)

    far = 10.0 * setup.height
    constraints: List[NodeConstraint] = []
    base_max = np.full(d, far)
    base_max[axis] = 0.0
    constraints.append(NodeConstraint(np.full(d, -far), base_max, components=list(range(d))))
    if d == 2:
        constraints.append(NodeConstraint([-far, -far], [0.0, far], components=[0]))
        constraints.append(NodeConstraint([h, -far], [far, far], components=[0]))
    if setup.drained:
        top_min = np.full(d, -far)
        top_min[axis] = setup.height
        constraints.append(NodeConstraint(top_min, np.full(d, far), components=[d]))

    sub = h / setup.particles_per_cell
    top = particles.select(
        np.where(np.arange(d) == axis, setup.height - sub, -far),
        np.full(d, far),
    )
    traction = np.zeros(d)
    traction[axis] = -setup.load
    particles.apply_traction(top, traction, normal_axis=axis)
    return grid, particles, constraints


def time_increments(setup: ConsolidationSetup) -> List[Tuple[float, Optional[float]]]:
    """
    Последовательность (Δt, T_v вывода или None).

    Шаг растёт в dt_growth раз до dt_max; шаг, перескакивающий момент
    вывода, укорачивается до него.
    """
    targets = sorted(setup.output_times_tv)
    increments = []
    t = 0.0
    dt = setup.dt
    for t_v in targets:
        t_target = setup.time_of(t_v)
        while t < t_target * (1.0 - 1e-12):
            step_dt = dt
            hit = None
            if t + dt >= t_target * (1.0 - 1e-12):
                step_dt = t_target - t
                hit = t_v
            increments.append((step_dt, hit))
            t += step_dt
            dt = min(dt * setup.dt_growth, setup.dt_max)
    return increments


def consolidation_run(
        setup: ConsolidationSetup,
        log_manager: Optional[Any] = None,
        session_id: Optional[str] = None,
        final_drained: bool = True
) -> ConsolidationResult:
    """
    Колонна под мгновенной нагрузкой: профили давления в моменты вывода
    и история осадки; в конце — один дренированный шаг.
    """
    setup.validate()
    grid, particles, constraints = build_column(setup)
    solver = PoroMpmSolver(
        setup.params,
        grid,
        particles,
        constraints=constraints,
        schedule=LoadSchedule(n_steps=1, traction_ramp=False, body_force_ramp=False, point_load_ramp=False),
        options=SolverOptions(
            tolerance=setup.tolerance,
            jacobian=setup.jacobian,
            shape_function=setup.shape_function,
        ),
        log_manager=log_manager,
        session_id=session_id,
    )
    axis = setup.dim - 1
    top_node = solver.surface_node(setup.height)
    expected = setup.load * setup.height / setup.params.constrained_modulus

    result = ConsolidationResult(expected_settlement=expected)
    started = time.perf_counter()
    t = 0.0
    settlement = 0.0

    def advance(step: int, dt: float) -> StepResult:
        nonlocal t, settlement
        step_result = solver.step(step, dt=dt)
        t += dt
        U = nodal_field(solver.last_outcome.du, solver.last_context.dofs)
        settlement -= float(U[top_node, axis])
        flux = solver.drained_flux(solver.last_context, solver.last_outcome) if setup.drained else 0.0
        t_v = t * setup.params.c_v / setup.height ** 2
        result.history.append({
            'time': t,
            't_v': t_v,
            'settlement': settlement,
            'degree': settlement / expected,
            'terzaghi_degree': consolidation_degree(t_v),
            'flux': flux,
        })
        result.run.steps.append(step_result)
        result.run.n_dof = max(result.run.n_dof, solver.last_context.dofs.n_free)
        return step_result

    step = 0
    for dt, hit in time_increments(setup):
        step += 1
        advance(step, dt)
        if hit is not None:
            depth = setup.height - particles.X[:, axis]
            profile = PressureProfile(
                t_v=hit,
                time=t,
                depth=depth,
                pressure=particles.pore_pressure.copy(),
                oracle=setup.load * terzaghi_pressure(depth, hit, setup.height),
            )
            result.profiles.append(profile)
            logger.info(f"✓ T_v = {hit:g}: L2-ошибка давления {profile.l2_error:.3%}")

    if final_drained:
        step += 1
        advance(step, setup.time_of(DRAINED_TIME_FACTOR))

    result.final_settlement = settlement
    result.run.wall_s = time.perf_counter() - started
    result.run.diff_s = solver.assembler.stats.diff_s
    logger.info(
        f"✓ Консолидация: {step} шагов, осадка {settlement * 1e3:.4f} мм "
        f"(ожидается {expected * 1e3:.4f} мм)"
    )
    return result


def undrained_response(setup: ConsolidationSetup, dt: Optional[float] = None) -> np.ndarray:
    """Давление в частицах после первого шага при закрытой верхней границе."""
    sealed = replace(setup, drained=False)
    sealed.validate()
    grid, particles, constraints = build_column(sealed)
    solver = PoroMpmSolver(
        sealed.params,
        grid,
        particles,
        constraints=constraints,
        schedule=LoadSchedule(n_steps=1, traction_ramp=False),
        options=SolverOptions(tolerance=sealed.tolerance, jacobian=sealed.jacobian, shape_function=sealed.shape_function),
    )
    solver.step(1, dt=dt or sealed.dt)
    return particles.pore_pressure.copy()


__all__ = [
    'PoroParams',
    'PoroMpmSolver',
    'ConsolidationSetup',
    'ConsolidationResult',
    'PressureProfile',
    'PROFILE_COLUMNS',
    'SETTLEMENT_COLUMNS',
    'terzaghi_pressure',
    'consolidation_degree',
    'build_column',
    'time_increments',
    'consolidation_run',
    'undrained_response',
]
