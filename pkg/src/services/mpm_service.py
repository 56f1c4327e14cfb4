"""
Неявный квазистатический шаг MPM.

Шаг: P2G (массы узлов и активные узлы), Ньютон по свободным неизвестным
с якобианом от ленты, G2P (перемещения, F, полуширины GIMP, напряжения
и история), сброс сетки. Веса и их градиенты внутри шага берутся в
конфигурации начала шага; напряжения каждую итерацию пересчитываются
от зафиксированного состояния начала шага.
"""

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from src.autodiff import ops
from src.autodiff.tape import Tape, record, value_of
from src.core.exceptions import (
    ConfigurationError,
    InvertedElementError,
    LinearSolverError,
    NewtonNonconvergenceError,
    handle_solver_errors,
)
from src.mechanics import tensors as T
from src.mechanics.constitutive import MaterialModel
from src.mechanics.shape_functions import Stencil, compute_stencil, get_kind, update_particle_domain
from src.models.grid import DofMap, Grid, LoadSchedule, NodeConstraint, number_dofs
from src.models.particles import ParticleSet
from src.services.base_service import BaseService, RunResult, StepResult
from src.services.jacobian_service import JacobianAssembler

logger = logging.getLogger(__name__)

# Узел активен, если его масса выше доли от максимальной массы частицы
MASS_CUTOFF = 1e-12
REFINEMENT_THRESHOLD = 1e-10
PIVOT_THRESHOLD = 1e-14


@dataclass
class SolverOptions:
    """Параметры Ньютона и дискретизации."""
    tolerance: float = 1e-11
    max_iterations: int = 20
    absolute_floor: float = 1e-14
    jacobian: str = 'sparse'
    shape_function: str = 'gimp'

    def validate(self) -> None:
        if not 0.0 < self.tolerance < 1.0:
            raise ConfigurationError(f"Newton tolerance must lie in (0, 1), got {self.tolerance}", key='solver.tolerance')
        if self.max_iterations < 1:
            raise ConfigurationError("Newton needs at least one iteration", key='solver.max_iterations')
        get_kind(self.shape_function)


# ============================================================================
# ПЕРЕНОС ЧАСТИЦЫ → СЕТКА
# ============================================================================

@dataclass
class GridTransfer:
    """Результат P2G: стенсил, массы узлов, активные узлы, перенесённые поля."""
    stencil: Stencil
    mass: np.ndarray
    active: np.ndarray
    fields: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())


def p2g(
        particles: ParticleSet,
        grid: Grid,
        kind: str,
        fields: Optional[Dict[str, np.ndarray]] = None,
        cutoff: float = MASS_CUTOFF
) -> GridTransfer:
    """
    M_i = Σ_p w_ip m_p; f_i = Σ_p w_ip m_p f_p / M_i на активных узлах.

    Raises:
        OutOfDomainError: носитель частицы выходит за сетку
    """
    stencil = compute_stencil(kind, particles.x, particles.lp, grid.origin, grid.spacing, grid.shape)
    nodes = stencil.nodes.ravel()
    wm = stencil.weights * particles.mass[:, None]
    mass = np.bincount(nodes, weights=wm.ravel(), minlength=grid.n_nodes)
    active = mass > cutoff * float(np.max(particles.mass))

    mapped = {}
    for name, values in (fields or {}).items():
        values = np.asarray(values, dtype=float)
        flat = values.reshape(particles.n, -1)
        out = np.zeros((grid.n_nodes, flat.shape[1]))
        for k in range(flat.shape[1]):
            acc = np.bincount(nodes, weights=(wm * flat[:, k:k + 1]).ravel(), minlength=grid.n_nodes)
            out[active, k] = acc[active] / mass[active]
        mapped[name] = out.reshape((grid.n_nodes,) + values.shape[1:])

    return GridTransfer(stencil=stencil, mass=mass, active=active, fields=mapped)


# ============================================================================
# ИНТЕРПОЛЯЦИЯ
# ============================================================================

def nodal_field(du: Any, dofs: DofMap) -> Any:
    """Узловое поле (N, n_comp): свободные неизвестные плюс заданные приращения."""
    size = dofs.n_nodes * dofs.n_comp
    U = ops.add(ops.place(size, dofs.free_flat, du), dofs.prescribed_vector())
    return U.reshape((dofs.n_nodes, dofs.n_comp))


def interpolate(U: Any, stencil: Stencil) -> Any:
    """Σ_s w_s U_s → (P, n_comp)."""
    return ops.sum_axis(U[stencil.nodes] * stencil.weights[:, :, None], axis=1)


def interpolate_gradient(U: Any, stencil: Stencil, components: int) -> Any:
    """Σ_s U_s ⊗ ∇w_s для первых components компонент → (P, components, d)."""
    Us = U[stencil.nodes][:, :, :components]
    return ops.sum_axis(Us[:, :, :, None] * stencil.grads[:, :, None, :], axis=1)


def internal_force_slots(stress_volume: Any, grads: Any, dim: int) -> Any:
    """(σV)·∇w по слотам стенсила → (P, S, d)."""
    return ops.sum_axis(stress_volume[:, None, :dim, :dim] * grads[:, :, None, :], axis=-1)


# ============================================================================
# ЛИНЕЙНЫЙ РЕШАТЕЛЬ
# ============================================================================

def locate_pivot(matrix: Any, limit: int) -> Optional[int]:
    """Номер первого нулевого ведущего элемента плотного LU (для малых систем)."""
    n = matrix.shape[0]
    if n > limit:
        return None
    dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        lu, _ = scipy.linalg.lu_factor(dense, check_finite=False)
    diagonal = np.abs(np.diag(lu))
    scale = max(float(np.max(np.abs(dense))), 1.0e-300)
    small = np.flatnonzero(diagonal <= PIVOT_THRESHOLD * scale)
    return int(small[0]) if small.size else None


@handle_solver_errors
def linear_solve(J: Any, rhs: np.ndarray, dense_limit: Optional[int] = None) -> np.ndarray:
    """
    Прямое решение J x = rhs (SuperLU, LU с выбором ведущего элемента).

    Один шаг итерационного уточнения, если ‖Jx − rhs‖/‖rhs‖ > 1e-10.

    Raises:
        LinearSolverError: вырожденная факторизация (с номером ведущего элемента)
    """
    rhs = np.asarray(rhs, dtype=float)
    A = sp.csc_matrix(J)
    if A.shape[0] != A.shape[1] or A.shape[0] != rhs.shape[0]:
        raise LinearSolverError(f"Dimension mismatch: matrix {A.shape}, rhs {rhs.shape}")
    if A.shape[0] == 0:
        return np.zeros(0)
    if dense_limit is None:
        from src.config import get_settings
        dense_limit = get_settings().jacobian.dense_lu_limit

    try:
        lu = splu(A)
    except RuntimeError as e:
        raise LinearSolverError(
            "Singular factorization",
            pivot=locate_pivot(A, dense_limit),
            original_exception=e,
            context={'n': int(A.shape[0])}
        )

    x = lu.solve(rhs)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm > 0.0:
        residual = rhs - A @ x
        if float(np.linalg.norm(residual)) > REFINEMENT_THRESHOLD * rhs_norm:
            x = x + lu.solve(residual)
    if not np.all(np.isfinite(x)):
        raise LinearSolverError(
            "Non-finite solution",
            pivot=locate_pivot(A, dense_limit),
            context={'n': int(A.shape[0])}
        )
    return x


# ============================================================================
# ШАГ
# ============================================================================

@dataclass
class StepContext:
    """Неизменяемые в пределах шага данные: P2G, нумерация, множители нагрузок."""
    step: int
    transfer: GridTransfer
    dofs: DofMap
    body_scale: float = 1.0
    traction_scale: float = 1.0
    point_scale: float = 1.0
    dt: Optional[float] = None

    @property
    def stencil(self) -> Stencil:
        return self.transfer.stencil


@dataclass
class StepInputs:
    """Состояние начала шага; при обратном анализе — входы ленты."""
    x: Any
    F: Any
    state: Dict[str, Any]


@dataclass
class NewtonOutcome:
    """Сошедшийся шаг: приращения, история невязок, принятые значения."""
    du: np.ndarray
    history: List[float]
    iterations: int
    residual_flat: np.ndarray
    aux: Dict[str, Any]

    @property
    def trial(self) -> Dict[str, Any]:
        return self.aux.get('trial', {})


class MpmSolver(BaseService[RunResult]):
    """
    Неявный решатель MPM для одного тела.

    Неизвестные узла — приращения перемещений (n_comp = d).
    """

    def __init__(
            self,
            model: MaterialModel,
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
        super().__init__()
        if hasattr(model, 'principal_update'):
            raise ConfigurationError(
                f"Material '{model.kind}' is available for stress-point runs only",
                key='material.kind'
            )
        if particles.dim != grid.dim:
            raise ConfigurationError("Particle and grid dimensions differ", key='geometry')
        self.model = model
        self.grid = grid
        self.particles = particles
        self.constraints = list(constraints or [])
        self.schedule = schedule or LoadSchedule(n_steps=1)
        self.options = options or SolverOptions()
        self.options.validate()
        self.gravity = np.zeros(grid.dim) if gravity is None else np.asarray(gravity, dtype=float).reshape(grid.dim)
        self.assembler = assembler or JacobianAssembler(self.options.jacobian)
        self.log_manager = log_manager
        self.session_id = session_id

        from src.config import get_settings
        self._tape = Tape(max_nodes=get_settings().jacobian.max_tape_nodes)
        if not self.particles.state:
            self.particles.state = model.initial_state(particles.n)

        self.last_context: Optional[StepContext] = None
        self.last_outcome: Optional[NewtonOutcome] = None

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def n_comp(self) -> int:
        return self.grid.dim

    @property
    def kind(self) -> str:
        return self.options.shape_function

    # ------------------------------------------------------------------
    # P2G и невязка
    # ------------------------------------------------------------------

    def begin_step(self, step: int, dt: Optional[float] = None) -> StepContext:
        """P2G и нумерация неизвестных шага."""
        transfer = p2g(self.particles, self.grid, self.kind)
        dofs = number_dofs(self.grid, transfer.active, self.constraints, self.n_comp)
        return StepContext(
            step=step,
            transfer=transfer,
            dofs=dofs,
            body_scale=self.schedule.body_scale(step),
            traction_scale=self.schedule.traction_scale(step),
            point_scale=self.schedule.point_scale(step),
            dt=dt,
        )

    def step_inputs(self) -> StepInputs:
        return StepInputs(x=self.particles.x, F=self.particles.F, state=self.particles.state)

    def stencil_for(self, inputs: StepInputs) -> Stencil:
        """Стенсил по (возможно отслеживаемым) положениям и F начала шага."""
        if self.kind == 'gimp':
            lp = update_particle_domain(inputs.F, self.particles.lp0, self.grid.spacing)
        else:
            lp = self.particles.lp
        return compute_stencil(self.kind, inputs.x, lp, self.grid.origin, self.grid.spacing, self.grid.shape)

    def external_force_slots(self, weights: Any, ctx: StepContext) -> Any:
        """w·(m g + точечные силы + поверхностные силы) с множителями программы."""
        p = self.particles
        load = (
            p.mass[:, None] * self.gravity[None, :] * ctx.body_scale
            + p.point_force * ctx.point_scale
            + p.traction_force * ctx.traction_scale
        )
        return weights[:, :, None] * load[:, None, :]

    def particle_contributions(
            self,
            U: Any,
            stencil: Stencil,
            inputs: StepInputs,
            ctx: StepContext,
            model: MaterialModel
    ) -> Tuple[Any, Dict[str, Any]]:
        """
        Вклады частиц в невязку по слотам: f_int − f_ext, (P, S, d).

        Конечные деформации: f_int = V0·(τ f⁻ᵀ)·∇w; малые: f_int = V·σ·∇w.
        """
        d = self.dim
        grad = interpolate_gradient(U, stencil, d)
        V0 = self.particles.volume0

        if model.small_strain:
            strain = T.symmetric_part(T.embed(grad, d) - T.IDENTITY)
            eps = strain + inputs.state['eps'] if 'eps' in inputs.state else strain
            sigma, trial = model.small_strain_stress(eps, inputs.state)
            stress_volume = T.scale(sigma, V0 * T.det(inputs.F))
            cauchy = sigma
        else:
            f = T.embed(grad, d)
            tau, trial = model.kirchhoff(f, inputs.F, inputs.state)
            stress_volume = T.scale(T.matmul(tau, T.inverse_transpose(f)), V0)
            cauchy = T.scale(tau, 1.0 / (T.det(f) * T.det(inputs.F)))

        f_int = internal_force_slots(stress_volume, stencil.grads, d)
        f_ext = self.external_force_slots(stencil.weights, ctx)
        return f_int - f_ext, {'trial': trial, 'stress': cauchy}

    def assemble_residual(
            self,
            du: Any,
            ctx: StepContext,
            inputs: Optional[StepInputs] = None,
            model: Optional[MaterialModel] = None
    ) -> Tuple[Any, Dict[str, Any]]:
        """
        Невязка по всем неизвестным сетки (N·n_comp): Σ_p (f_int − f_ext).

        Строки свободных неизвестных — уравнения Ньютона, строки заданных —
        реакции. inputs / model подменяются при обратном анализе.
        """
        model = model or self.model
        if inputs is None:
            inputs = self.step_inputs()
            stencil = ctx.stencil
        else:
            stencil = self.stencil_for(inputs)

        U = nodal_field(du, ctx.dofs)
        contrib, aux = self.particle_contributions(U, stencil, inputs, ctx, model)
        n_particles, slots = stencil.nodes.shape
        nc = self.n_comp
        r_nodes = ops.segment_sum(
            contrib.reshape((n_particles * slots, nc)),
            stencil.nodes.ravel(),
            self.grid.n_nodes,
        )
        aux['U'] = U
        aux['stencil'] = stencil
        return r_nodes.reshape((self.grid.n_nodes * nc,)), aux

    def residual(self, du: Any, ctx: StepContext) -> Any:
        """Невязка по свободным неизвестным."""
        r_flat, _ = self.assemble_residual(du, ctx)
        return r_flat[ctx.dofs.free_flat]

    # ------------------------------------------------------------------
    # Ньютон
    # ------------------------------------------------------------------

    def newton_solve(self, ctx: StepContext) -> NewtonOutcome:
        """
        Ньютон: −J δ = r до ‖r_k‖/‖r_0‖ ≤ tolerance.

        При ‖r_0‖ < absolute_floor шаг принимается сразу.

        Raises:
            NewtonNonconvergenceError: превышено max_iterations
        """
        opts = self.options
        dofs = ctx.dofs
        n = dofs.n_free
        du = np.zeros(n)
        captured: Dict[str, Any] = {}

        def residual(x: Any) -> Any:
            r_flat, aux = self.assemble_residual(x, ctx)
            captured['r_flat'] = r_flat
            captured['aux'] = aux
            return r_flat[dofs.free_flat]

        history: List[float] = []
        iterations = 0
        if n == 0:
            residual(du)
            history.append(0.0)
        else:
            r0 = None
            for iteration in range(opts.max_iterations + 1):
                tape, r = record(residual, du, tape=self._tape)
                norm = float(np.linalg.norm(r))
                if r0 is None:
                    r0 = norm
                    if norm < opts.absolute_floor:
                        history.append(0.0)
                        self.logger.debug(f"Шаг {ctx.step}: начальная невязка {norm:.3e} ниже порога")
                        break
                relative = norm / r0
                history.append(relative)
                if self.log_manager is not None:
                    self.log_manager.log_iteration(self.session_id, ctx.step, iteration, relative)
                if relative <= opts.tolerance:
                    break
                if iteration == opts.max_iterations:
                    raise NewtonNonconvergenceError(ctx.step, history, context={'n_dof': n})
                J = self.assembler.assemble(tape, self.grid, dofs, self.kind)
                du = du + linear_solve(J, -r)
                iterations = iteration + 1

        aux = captured['aux']
        values = {
            'trial': aux['trial'],
            'stress': value_of(aux['stress']),
        }
        for key, val in aux.items():
            if key not in ('trial', 'stress', 'U', 'stencil'):
                values[key] = value_of(val)
        return NewtonOutcome(
            du=du,
            history=history,
            iterations=iterations,
            residual_flat=np.array(value_of(captured['r_flat'])),
            aux=values,
        )

    # ------------------------------------------------------------------
    # Перенос сетка → частицы
    # ------------------------------------------------------------------

    def g2p_and_update(self, ctx: StepContext, outcome: NewtonOutcome) -> None:
        """
        x += Σ w Δu; F ← (I + ∇Δu)F; полуширины GIMP; напряжения и история.

        Raises:
            InvertedElementError: det(I + ∇Δu) ≤ 0
        """
        p = self.particles
        d = self.dim
        U = nodal_field(outcome.du, ctx.dofs)
        stencil = ctx.stencil

        displacement = interpolate(U[:, :d], stencil)
        f = T.embed(interpolate_gradient(U, stencil, d), d)
        det_f = np.linalg.det(f)
        bad = np.flatnonzero(det_f <= 0.0)
        if bad.size:
            raise InvertedElementError(int(bad[0]), float(det_f[bad[0]]), context={'step': ctx.step})

        p.x = p.x + displacement
        p.F = np.matmul(f, p.F)
        if self.kind == 'gimp':
            p.lp = np.array(update_particle_domain(p.F, p.lp0, self.grid.spacing))
        p.state = self.model.commit(outcome.trial)
        p.stress = np.array(outcome.aux['stress'])

    def reactions(self, ctx: StepContext, outcome: NewtonOutcome) -> np.ndarray:
        """Реакции на заданных неизвестных (в порядке dofs.prescribed_flat)."""
        return outcome.residual_flat[ctx.dofs.prescribed_flat]

    # ------------------------------------------------------------------
    # Прогон
    # ------------------------------------------------------------------

    def step(self, step: int, dt: Optional[float] = None) -> StepResult:
        """Один шаг нагружения целиком."""
        started = time.perf_counter()
        diff_before = self.assembler.stats.diff_s
        ctx = self.begin_step(step, dt)
        outcome = self.newton_solve(ctx)
        self.g2p_and_update(ctx, outcome)
        self.last_context = ctx
        self.last_outcome = outcome
        return StepResult(
            step=step,
            iterations=outcome.iterations,
            residual_history=outcome.history,
            wall_s=time.perf_counter() - started,
            diff_s=self.assembler.stats.diff_s - diff_before,
            time=dt,
        )

    def run(self, on_step: Optional[Callable[['MpmSolver', StepResult], None]] = None) -> RunResult:
        """Пройти программу нагружения."""
        started = time.perf_counter()
        result = RunResult()
        for step in range(1, self.schedule.n_steps + 1):
            step_result = self.step(step)
            result.steps.append(step_result)
            result.n_dof = max(result.n_dof, self.last_context.dofs.n_free)
            self.logger.debug(
                f"Шаг {step}/{self.schedule.n_steps}: {step_result.iterations} итераций, "
                f"невязка {step_result.final_residual:.2e}"
            )
            if on_step is not None:
                on_step(self, step_result)
        result.wall_s = time.perf_counter() - started
        result.diff_s = self.assembler.stats.diff_s
        self.logger.info(
            f"✓ Прогон MPM: {len(result.steps)} шагов, макс. итераций {result.max_iterations}, "
            f"{result.wall_s:.2f} с (дифференцирование {result.diff_s:.2f} с)"
        )
        return result


__all__ = [
    'MASS_CUTOFF',
    'SolverOptions',
    'GridTransfer',
    'StepContext',
    'StepInputs',
    'NewtonOutcome',
    'MpmSolver',
    'p2g',
    'nodal_field',
    'interpolate',
    'interpolate_gradient',
    'internal_force_slots',
    'linear_solve',
    'locate_pivot',
]
