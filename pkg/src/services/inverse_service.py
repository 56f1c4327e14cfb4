"""
Обратный анализ: идентификация модуля Юнга через неявную симуляцию.

Параметр оптимизации θ = ln E. Прямой прогон сохраняет сошедшиеся
приращения и состояние начала каждого шага. Обратный проход идёт по шагам
от последнего к первому: на шаге записывается лента
(Δu, θ, x_n, F_n, история_n) → (r_free, отклик, x_{n+1}, F_{n+1}, история_{n+1}),
решается Jᵀλ = ∂L/∂Δu и накапливается dL/dθ (теорема о неявной функции
в сошедшейся точке Ньютона).
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.autodiff import ops
from src.autodiff.tape import Tape, record
from src.core.exceptions import (
    AdjointSolveError,
    ConfigurationError,
    ErrorLogger,
    LinearSolverError,
    NewtonNonconvergenceError,
    OptimizationDivergenceError,
)
from src.mechanics import tensors as T
from src.mechanics.constitutive import ElasticParams, HenckyElastic, MaterialModel, NeoHookean
from src.models.grid import Grid, LoadSchedule, NodeConstraint
from src.models.particles import ParticleSet
from src.services.base_service import BaseService, RunResult
from src.services.jacobian_service import JacobianAssembler
from src.services.mpm_service import (
    MpmSolver,
    SolverOptions,
    StepContext,
    StepInputs,
    interpolate,
    interpolate_gradient,
    linear_solve,
)
from src.utils.output_writer import read_csv, write_csv

logger = logging.getLogger(__name__)
error_logger = ErrorLogger(__name__)

LOSS_KINDS = ('slope', 'terminal-displacement')
DIVERGENCE_FACTOR = 1.0e6
OPTIMIZATION_COLUMNS = ('iteration', 'theta', 'E', 'loss', 'gradient')
SLOPE_REFERENCE_COLUMNS = ('displacement', 'force')
TERMINAL_REFERENCE_COLUMNS = ('value',)


# ============================================================================
# НАКЛОН И ФУНКЦИЯ ПОТЕРЬ
# ============================================================================

def least_squares_slope(displacement: Sequence[float], force: Sequence[float]) -> Tuple[float, np.ndarray]:
    """
    Наклон МНК-прямой (со свободным членом) и его производные по силам.

    Returns:
        (s, ds/df), ds/df_n = (d_n − d̄) / Σ(d − d̄)²
    """
    d = np.asarray(displacement, dtype=float)
    f = np.asarray(force, dtype=float)
    if d.size < 2 or d.size != f.size:
        raise ConfigurationError("Slope fit needs at least two (displacement, force) samples", key='inverse.reference')
    centered = d - d.mean()
    sdd = float(centered @ centered)
    if sdd <= 0.0:
        raise ConfigurationError("Displacement samples are all equal", key='inverse.reference')
    weights = centered / sdd
    return float(weights @ (f - f.mean())), weights


@dataclass(frozen=True)
class LossSpec:
    """
    Функция потерь и опорные данные.

    slope: L = (s − s_ref)² / (s·s_ref), s — наклон сила–перемещение;
    terminal-displacement: L = ((u − u*)/u*)², u — перемещение пробной частицы в конце.
    """
    kind: str
    displacement: Tuple[float, ...] = ()
    force: Tuple[float, ...] = ()
    target: Optional[float] = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"Unknown loss kind: {self.kind}", key='inverse.loss')
        if self.kind == 'terminal-displacement' and not self.target:
            raise ConfigurationError("Terminal-displacement loss needs a nonzero target", key='inverse.reference')

    @property
    def reference_slope(self) -> float:
        slope, _ = least_squares_slope(self.displacement, self.force)
        return slope

    @classmethod
    def from_simulation(cls, kind: str, simulation: 'Simulation') -> 'LossSpec':
        """Опорные данные из прямого прогона (обычно при E_true)."""
        if kind == 'slope':
            return cls(
                kind=kind,
                displacement=tuple(float(v) for v in simulation.displacements),
                force=tuple(float(v) for v in simulation.responses),
            )
        return cls(kind=kind, target=simulation.terminal_value)

    def evaluate(self, simulation: 'Simulation') -> Tuple[float, np.ndarray, np.ndarray]:
        """
        Returns:
            (L, ∂L/∂y по шагам, ∂L/∂x конечных положений частиц)
        """
        problem = simulation.problem
        n_steps = len(simulation.records)
        y_bar = np.zeros(n_steps)
        x_bar = np.zeros_like(simulation.final_positions)

        if self.kind == 'slope':
            slope, weights = least_squares_slope(simulation.displacements, simulation.responses)
            reference = self.reference_slope
            if slope == 0.0 or reference == 0.0:
                raise ConfigurationError("Force response has zero slope", key='inverse.response')
            if slope * reference < 0.0:
                raise ConfigurationError("Simulated and reference slopes have opposite signs", key='inverse.response')
            gap = slope - reference
            y_bar[:] = (slope * slope - reference * reference) / (slope * slope * reference) * weights
            return float(gap * gap / (slope * reference)), y_bar, x_bar

        value = simulation.terminal_value
        gap = (value - self.target) / self.target
        x_bar[problem.monitor, problem.monitor_component] = 2.0 * gap / self.target
        return float(gap * gap), y_bar, x_bar

    def rows(self) -> List[Dict[str, float]]:
        if self.kind == 'slope':
            return [{'displacement': d, 'force': f} for d, f in zip(self.displacement, self.force)]
        return [{'value': self.target}]

    @property
    def columns(self) -> Tuple[str, ...]:
        return SLOPE_REFERENCE_COLUMNS if self.kind == 'slope' else TERMINAL_REFERENCE_COLUMNS


def write_reference(path: Path, loss: LossSpec) -> Path:
    """Опорный отклик в CSV (displacement,force или value)."""
    return write_csv(path, loss.rows(), loss.columns)


def read_reference(path: Path, kind: str) -> LossSpec:
    """
    Raises:
        ConfigurationError: нет нужных столбцов
    """
    rows = read_csv(path)
    columns = SLOPE_REFERENCE_COLUMNS if kind == 'slope' else TERMINAL_REFERENCE_COLUMNS
    if not rows or any(c not in rows[0] for c in columns):
        raise ConfigurationError(
            f"Reference CSV {path} must have columns {','.join(columns)}",
            key='inverse.reference_csv'
        )
    if kind == 'slope':
        return LossSpec(
            kind=kind,
            displacement=tuple(r['displacement'] for r in rows),
            force=tuple(r['force'] for r in rows),
        )
    return LossSpec(kind=kind, target=rows[-1]['value'])


# ============================================================================
# ПОСТАНОВКА
# ============================================================================

@dataclass
class InverseProblem:
    """
    Прямая задача с одним неизвестным модулем.

    Отклик шага — сумма реакций компоненты response_component в узлах
    response_box; перемещение управления на шаге n равно n·control_increment.
    Контрольная частица monitor задаёт перемещение для terminal-displacement.
    """
    name: str
    template: MaterialModel
    grid: Grid
    particles: ParticleSet
    constraints: List[NodeConstraint]
    schedule: LoadSchedule
    options: SolverOptions = field(default_factory=SolverOptions)
    gravity: Optional[np.ndarray] = None
    response_box: Optional[Tuple[np.ndarray, np.ndarray]] = None
    response_component: int = 0
    control_increment: float = 1.0
    monitor: int = 0
    monitor_component: int = 0
    E_true: Optional[float] = None

    def validate(self) -> None:
        if not self.template.differentiable_history:
            raise ConfigurationError(
                f"Material '{self.template.kind}' commits history that is not a function of the trial state",
                key='material.kind'
            )
        if self.response_box is None and self.monitor >= self.particles.n:
            raise ConfigurationError("Monitored particle out of range", key='inverse.monitor')

    def new_solver(self, E: float, assembler: Optional[JacobianAssembler] = None) -> MpmSolver:
        return MpmSolver(
            self.template.with_modulus(E),
            self.grid,
            self.particles.copy(),
            constraints=self.constraints,
            schedule=self.schedule,
            options=self.options,
            gravity=self.gravity,
            assembler=assembler,
        )

    def response_rows(self, ctx: StepContext, n_comp: int) -> np.ndarray:
        """Плоские номера заданных неизвестных, чьи реакции образуют отклик."""
        if self.response_box is None:
            return np.zeros(0, dtype=np.int64)
        nodes = self.grid.nodes_in_box(*self.response_box)
        flat = nodes * n_comp + self.response_component
        prescribed = ctx.dofs.prescribed_flat
        return prescribed[np.isin(prescribed, flat)]


def strip_footing_problem(
        E_true: float = 1.0e6,
        nu: float = 0.3,
        width: float = 1.0,
        height: float = 1.0,
        h: float = 0.125,
        particles_per_cell: int = 2,
        footing_width: float = 0.25,
        settlement_per_step: float = 1.0e-3,
        n_steps: int = 5,
        jacobian: str = 'sparse',
        shape_function: str = 'gimp'
) -> InverseProblem:
    """
    Плоская деформация: блок Нео-Гука, жёсткий штамп на верхней грани
    (x ≤ footing_width) вдавливается на settlement_per_step за шаг.
    Основание закреплено, боковые грани — катки.
    """
    grid = Grid.from_box([0.0, 0.0], [width, height], h)
    particles = ParticleSet.fill_box([0.0, 0.0], [width, height], h, particles_per_cell, density=1800.0)
    constraints = [
        NodeConstraint([0.0, 0.0], [0.0, height], (0,)),
        NodeConstraint([width, 0.0], [width, height], (0,)),
        NodeConstraint([0.0, 0.0], [width, 0.0], (0, 1)),
        NodeConstraint([0.0, height], [footing_width, height], (0, 1), [0.0, -settlement_per_step]),
    ]
    return InverseProblem(
        name='strip-footing',
        template=NeoHookean(ElasticParams(E=E_true, nu=nu)),
        grid=grid,
        particles=particles,
        constraints=constraints,
        schedule=LoadSchedule(n_steps=n_steps),
        options=SolverOptions(jacobian=jacobian, shape_function=shape_function),
        response_box=(np.array([0.0, height]), np.array([footing_width, height])),
        response_component=1,
        control_increment=settlement_per_step,
        E_true=E_true,
    )


def settling_bar_problem(
        E_true: float = 1.0e4,
        density: float = 80.0,
        length: float = 1.0,
        h: float = 0.125,
        particles_per_cell: int = 2,
        n_steps: int = 5,
        gravity: float = -9.81,
        jacobian: str = 'sparse',
        shape_function: str = 'gimp'
) -> InverseProblem:
    """Одномерный столб Генки оседает под весом; отклик — осадка верхней частицы."""
    grid = Grid.from_box([0.0], [length], h)
    particles = ParticleSet.fill_box([0.0], [length], h, particles_per_cell, density=density)
    return InverseProblem(
        name='settling-bar',
        template=HenckyElastic(ElasticParams(E=E_true, nu=0.0)),
        grid=grid,
        particles=particles,
        constraints=[NodeConstraint([0.0], [0.0], (0,))],
        schedule=LoadSchedule(n_steps=n_steps),
        options=SolverOptions(jacobian=jacobian, shape_function=shape_function),
        gravity=np.array([gravity]),
        monitor=int(np.argmax(particles.X[:, 0])),
        monitor_component=0,
        E_true=E_true,
    )


# ============================================================================
# ПРЯМОЙ ПРОГОН
# ============================================================================

@dataclass
class StepRecord:
    """Сошедшийся шаг, нужный обратному проходу."""
    step: int
    context: StepContext
    inputs: StepInputs
    du: np.ndarray
    response: float


@dataclass
class Simulation:
    """Прямой прогон при заданном θ."""
    problem: InverseProblem
    theta: float
    solver: MpmSolver
    records: List[StepRecord] = field(default_factory=list)
    run: RunResult = field(default_factory=RunResult)

    @property
    def E(self) -> float:
        return float(np.exp(self.theta))

    @property
    def responses(self) -> np.ndarray:
        return np.array([r.response for r in self.records])

    @property
    def displacements(self) -> np.ndarray:
        return np.array([r.step * self.problem.control_increment for r in self.records])

    @property
    def final_positions(self) -> np.ndarray:
        return self.solver.particles.x

    @property
    def terminal_value(self) -> float:
        p = self.solver.particles
        k, c = self.problem.monitor, self.problem.monitor_component
        return float(p.x[k, c] - p.X[k, c])


# ============================================================================
# СОПРЯЖЁННЫЙ ШАГ
# ============================================================================

def adjoint_step(
        tape: Tape,
        n_free: int,
        jacobian: Any,
        tail_seed: np.ndarray,
        step: int = 0
) -> np.ndarray:
    """
    Сопряжённый шаг для ленты с выходами (r, хвост) и входами (u, остальные).

    Jᵀλ = ∂(хвост·ŝ)/∂u, затем сопряжённые остальных входов с затравкой (−λ, ŝ).

    Returns:
        Сопряжённые входов после первых n_free

    Raises:
        AdjointSolveError: вырожденная транспонированная система
    """
    head = np.zeros(n_free)
    g = tape.backward(np.concatenate([head, tail_seed]))[:n_free]
    if n_free:
        try:
            lam = linear_solve(jacobian.T.tocsr(), g)
        except LinearSolverError as e:
            raise AdjointSolveError(step, original_exception=e)
    else:
        lam = head
    return tape.backward(np.concatenate([-lam, tail_seed]))[n_free:]


# ============================================================================
# СЕРВИС
# ============================================================================

@dataclass
class OptimizerState:
    """Траектория градиентного спуска по θ = ln E."""
    theta: float
    lr: float
    loss_history: List[float] = field(default_factory=list)
    gradient_history: List[float] = field(default_factory=list)
    theta_history: List[float] = field(default_factory=list)
    converged: bool = False
    wall_s: float = 0.0

    @property
    def E(self) -> float:
        return float(np.exp(self.theta))

    @property
    def iterations(self) -> int:
        """Число сделанных шагов спуска."""
        return max(len(self.theta_history) - 1, 0)

    @property
    def loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else float('nan')

    def rows(self) -> List[Dict[str, float]]:
        return [
            {'iteration': k, 'theta': th, 'E': float(np.exp(th)), 'loss': loss, 'gradient': grad}
            for k, (th, loss, grad) in enumerate(zip(self.theta_history, self.loss_history, self.gradient_history))
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'theta': self.theta,
            'E': self.E,
            'lr': self.lr,
            'iterations': self.iterations,
            'loss': self.loss,
            'converged': self.converged,
            'wall_s': round(self.wall_s, 6),
        }


class InverseAnalysis(BaseService[OptimizerState]):
    """Потери, сопряжённые градиенты и градиентный спуск для одной постановки."""

    def __init__(
            self,
            problem: InverseProblem,
            loss: Optional[LossSpec] = None,
            assembler: Optional[JacobianAssembler] = None,
            log_manager: Optional[Any] = None,
            session_id: Optional[str] = None
    ):
        super().__init__()
        problem.validate()
        self.problem = problem
        self.loss: Optional[LossSpec] = None
        if loss is not None:
            self.set_loss(loss)
        self.assembler = assembler or JacobianAssembler(problem.options.jacobian)
        self.log_manager = log_manager
        self.session_id = session_id
        from src.config import get_settings
        self._tape = Tape(max_nodes=get_settings().jacobian.max_tape_nodes)

    def set_loss(self, loss: LossSpec) -> None:
        if loss.kind == 'slope' and self.problem.response_box is None:
            raise ConfigurationError("Slope loss needs a reaction box", key='inverse.response')
        self.loss = loss

    def _require_loss(self) -> LossSpec:
        if self.loss is None:
            raise ConfigurationError("No reference response loaded", key='inverse.reference_csv')
        return self.loss

    # ------------------------------------------------------------------
    # Прямой прогон
    # ------------------------------------------------------------------

    def simulate_with_params(self, theta: float) -> Simulation:
        """
        Прямой прогон при E = exp(θ) с сохранением шагов для обратного прохода.

        Raises:
            ConfigurationError: θ не даёт конечного положительного E
            NewtonNonconvergenceError: прямой шаг не сошёлся
        """
        theta = float(theta)
        E = float(np.exp(theta))
        if not np.isfinite(E) or E <= 0.0:
            raise ConfigurationError(f"theta = {theta} gives no finite positive modulus", key='inverse.theta0')

        solver = self.problem.new_solver(E, self.assembler)
        simulation = Simulation(problem=self.problem, theta=theta, solver=solver)
        started = time.perf_counter()
        p = solver.particles
        for step in range(1, self.problem.schedule.n_steps + 1):
            inputs = StepInputs(
                x=p.x.copy(),
                F=p.F.copy(),
                state={key: np.array(val) for key, val in p.state.items()},
            )
            try:
                step_result = solver.step(step)
            except NewtonNonconvergenceError as e:
                error_logger.log_exception(e, {'theta': theta, 'E': E})
                raise
            ctx, outcome = solver.last_context, solver.last_outcome
            rows = self.problem.response_rows(ctx, solver.n_comp)
            simulation.records.append(StepRecord(
                step=step,
                context=ctx,
                inputs=inputs,
                du=outcome.du.copy(),
                response=float(np.sum(outcome.residual_flat[rows])),
            ))
            simulation.run.steps.append(step_result)
            simulation.run.n_dof = max(simulation.run.n_dof, ctx.dofs.n_free)
        simulation.run.wall_s = time.perf_counter() - started
        return simulation

    def loss_value(self, theta: float) -> float:
        loss, _, _ = self._require_loss().evaluate(self.simulate_with_params(theta))
        return loss

    def reference(self, kind: str, E: Optional[float] = None) -> LossSpec:
        """Синтетический опорный отклик: прямой прогон при E (по умолчанию E_true постановки)."""
        E = E or self.problem.E_true
        if E is None:
            raise ConfigurationError("Reference generation needs E_true", key='inverse.E_true')
        loss = LossSpec.from_simulation(kind, self.simulate_with_params(np.log(E)))
        self.logger.info(f"✓ Опорный отклик ({kind}) при E = {E:.6e}")
        return loss

    # ------------------------------------------------------------------
    # Градиент
    # ------------------------------------------------------------------

    def _step_function(self, simulation: Simulation, record_: StepRecord) -> Callable[..., Any]:
        solver = simulation.solver
        ctx = record_.context
        keys = list(record_.inputs.state.keys())
        d = solver.dim
        rows = self.problem.response_rows(ctx, solver.n_comp)
        template = self.problem.template

        def outputs(du: Any, th: Any, x: Any, F: Any, *state_values: Any) -> Any:
            model = template.with_modulus(ops.exp(th)[0])
            inputs = StepInputs(x=x, F=F, state=dict(zip(keys, state_values)))
            r_flat, aux = solver.assemble_residual(du, ctx, inputs=inputs, model=model)
            U, stencil = aux['U'], aux['stencil']
            x_new = x + interpolate(U[:, :d], stencil)
            F_new = T.matmul(T.embed(interpolate_gradient(U, stencil, d), d), F)
            y = ops.sum_all(r_flat[rows]) if rows.size else np.zeros(())
            parts = [r_flat[ctx.dofs.free_flat], ops.expand_dims(y, 0), x_new.ravel(), F_new.ravel()]
            parts.extend(aux['trial'][key].ravel() for key in keys)
            return ops.concatenate(parts)

        return outputs

    def parameter_gradient(self, theta: float) -> Tuple[float, float, Simulation]:
        """
        dL/dθ обратным проходом по шагам.

        Returns:
            (L, dL/dθ, прямой прогон)

        Raises:
            AdjointSolveError: вырожденная Jᵀ на каком-либо шаге
        """
        simulation = self.simulate_with_params(theta)
        loss, y_bar, x_bar = self._require_loss().evaluate(simulation)
        solver = simulation.solver
        n_particles = solver.particles.n
        d = solver.dim

        keys = list(solver.particles.state.keys())
        hat_x = x_bar.ravel().copy()
        hat_F = np.zeros(n_particles * 9)
        hat_state = {key: np.zeros(np.asarray(val).size) for key, val in solver.particles.state.items()}
        theta_bar = 0.0

        for index in range(len(simulation.records) - 1, -1, -1):
            rec = simulation.records[index]
            n_free = rec.context.dofs.n_free
            tail = np.concatenate([[y_bar[index]], hat_x, hat_F] + [hat_state[key] for key in keys])
            if not np.any(tail):
                continue

            state_values = [rec.inputs.state[key] for key in keys]
            tape, _ = record(
                self._step_function(simulation, rec),
                rec.du, np.array([simulation.theta]), rec.inputs.x, rec.inputs.F, *state_values,
                tape=self._tape,
            )
            J = self.assembler.assemble(tape, solver.grid, rec.context.dofs, solver.kind) if n_free else None
            adj = adjoint_step(tape, n_free, J, tail, step=rec.step)

            theta_bar += float(adj[0])
            offset = 1
            hat_x = adj[offset:offset + n_particles * d]
            offset += n_particles * d
            hat_F = adj[offset:offset + n_particles * 9]
            offset += n_particles * 9
            for key, value in zip(keys, state_values):
                size = np.asarray(value).size
                hat_state[key] = adj[offset:offset + size]
                offset += size

        self.logger.debug(f"Градиент при θ = {theta:.6f}: L = {loss:.6e}, dL/dθ = {theta_bar:.6e}")
        return loss, theta_bar, simulation

    def finite_difference_gradient(self, theta: float, step: float = 1.0e-4) -> float:
        """Центральная разность по θ (два прямых прогона)."""
        return (self.loss_value(theta + step) - self.loss_value(theta - step)) / (2.0 * step)

    # ------------------------------------------------------------------
    # Спуск
    # ------------------------------------------------------------------

    def gradient_descent(
            self,
            theta0: float,
            lr: float = 0.2,
            loss_threshold: float = 1.0e-6,
            max_iters: int = 20,
            on_iteration: Optional[Callable[[int, float, float, float], None]] = None
    ) -> OptimizerState:
        """
        θ_{k+1} = θ_k − lr·dL/dθ до L ≤ loss_threshold или max_iters шагов.

        Raises:
            ConfigurationError: lr ≤ 0
            OptimizationDivergenceError: L > 1e6·L_0 или не конечна
        """
        if not lr > 0.0:
            raise ConfigurationError(f"Learning rate must be positive, got {lr}", key='inverse.lr')
        state = OptimizerState(theta=float(theta0), lr=lr)
        started = time.perf_counter()
        theta = float(theta0)
        initial = None

        for iteration in range(max_iters + 1):
            loss, gradient, _ = self.parameter_gradient(theta)
            if initial is None:
                initial = loss
            if not np.isfinite(loss) or not np.isfinite(gradient) or loss > DIVERGENCE_FACTOR * max(initial, 1e-300):
                raise OptimizationDivergenceError(loss, initial, lr)

            state.theta = theta
            state.theta_history.append(theta)
            state.loss_history.append(loss)
            state.gradient_history.append(gradient)
            self.logger.info(
                f"Итерация {iteration}: E = {np.exp(theta):.6e}, L = {loss:.3e}, dL/dθ = {gradient:.3e}"
            )
            if self.log_manager is not None:
                self.log_manager.add_log(
                    f"Итерация спуска {iteration}",
                    "DEBUG",
                    self.session_id,
                    {'iteration': iteration, 'theta': theta, 'loss': loss, 'gradient': gradient},
                    echo=False
                )
            if on_iteration is not None:
                on_iteration(iteration, theta, loss, gradient)

            if loss <= loss_threshold:
                state.converged = True
                break
            if iteration == max_iters:
                break
            theta = theta - lr * gradient

        state.wall_s = time.perf_counter() - started
        marker = '✓' if state.converged else '⚠'
        self.logger.info(
            f"{marker} Спуск: {state.iterations} итераций, E = {state.E:.6e}, L = {state.loss:.3e}"
        )
        return state

    def run(self, theta0: float, lr: float = 0.2, loss_threshold: float = 1.0e-6, max_iters: int = 20) -> OptimizerState:
        return self.gradient_descent(theta0, lr, loss_threshold, max_iters)


__all__ = [
    'LOSS_KINDS',
    'OPTIMIZATION_COLUMNS',
    'LossSpec',
    'InverseProblem',
    'StepRecord',
    'Simulation',
    'OptimizerState',
    'InverseAnalysis',
    'least_squares_slope',
    'adjoint_step',
    'strip_footing_problem',
    'settling_bar_problem',
    'write_reference',
    'read_reference',
]
