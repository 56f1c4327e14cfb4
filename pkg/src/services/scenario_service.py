"""
Прогон сценариев из YAML-конфигурации.

Сервис собирает тело, запускает нужный драйвер, пишет CSV-результаты и
summary.json и вычисляет приёмочные проверки. Режим check дополнительно
выполняет дорогие исследования (сходимость по сетке, проверка градиента
конечными разностями).
"""

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from src.config.scenario import POROUS_KEYS, ScenarioConfig, serialize_scenario, validate_scenario
from src.core.exceptions import ConfigurationError, ErrorLogger, MpmEngineException
from src.mechanics.constitutive import ElasticParams, MaterialModel, build_material
from src.mechanics.norsand import NorSand, NorSandParams
from src.mechanics.stress_point import RESPONSE_COLUMNS, stress_point_drive, triaxial_path
from src.models.grid import Grid, LoadSchedule, NodeConstraint
from src.models.particles import ParticleSet
from src.services import acceptance_service as acceptance
from src.services.base_service import BaseService, RunReport, RunResult, StepResult
from src.services.inverse_service import (
    OPTIMIZATION_COLUMNS,
    InverseAnalysis,
    InverseProblem,
    read_reference,
    settling_bar_problem,
    strip_footing_problem,
)
from src.services.jacobian_service import BENCHMARK_COLUMNS, JacobianAssembler, differentiation_benchmark
from src.services.mpm_service import MpmSolver, SolverOptions
from src.services.poromechanics_service import (
    PROFILE_COLUMNS,
    SETTLEMENT_COLUMNS,
    ConsolidationSetup,
    PoroParams,
    consolidation_run,
)
from src.utils.log_manager import RunLogManager, get_log_manager
from src.utils.output_writer import OutputWriter

logger = logging.getLogger(__name__)
error_logger = ErrorLogger(__name__)

ITERATION_COLUMNS = ('step', 'iteration', 'relative_residual')
STEP_COLUMNS = ('step', 'iterations', 'final_residual', 'wall_s')
BAR_COLUMNS = ('Y', 'stress', 'analytic')
BAR_STUDY_COLUMNS = ('level', 'h', 'error')
TIP_COLUMNS = ('step', 'load', 'tip', 'euler_bernoulli', 'elastica')
CANTILEVER_STUDY_COLUMNS = ('h', 'tip')


# ============================================================================
# СБОРКА ТЕЛА
# ============================================================================

@dataclass
class Body:
    """Всё, что нужно решателю MPM для одного тела."""
    model: MaterialModel
    grid: Grid
    particles: ParticleSet
    constraints: List[NodeConstraint]
    schedule: LoadSchedule
    options: SolverOptions
    gravity: Optional[np.ndarray]

    def solver(
            self,
            assembler: Optional[JacobianAssembler] = None,
            log_manager: Optional[Any] = None,
            session_id: Optional[str] = None
    ) -> MpmSolver:
        return MpmSolver(
            self.model,
            self.grid,
            self.particles,
            constraints=self.constraints,
            schedule=self.schedule,
            options=self.options,
            gravity=self.gravity,
            assembler=assembler,
            log_manager=log_manager,
            session_id=session_id,
        )


def elastic_params(params: Dict[str, float]) -> ElasticParams:
    """E, nu или lam, mu из параметров материала."""
    if 'E' in params:
        return ElasticParams(E=params['E'], nu=params.get('nu', 0.0))
    if 'lam' in params and 'mu' in params:
        return ElasticParams.from_lame(params['lam'], params['mu'])
    raise ConfigurationError("Material needs E and nu (or lam and mu)", key='material')


def build_body(config: ScenarioConfig, h: Optional[float] = None, load_scale: float = 1.0) -> Body:
    """
    Тело по секциям geometry / material / loads / schedule / solver.

    Args:
        config: Сценарий
        h: Шаг сетки вместо geometry.h (исследования сходимости)
        load_scale: Множитель поверхностных и сосредоточенных нагрузок

    Raises:
        ConfigurationError: нагрузка не выбирает ни одной частицы
    """
    geometry = config.geometry
    spacing = [h] * geometry.dim if h is not None else geometry.axis_values(geometry.h)
    ppc = geometry.axis_values(geometry.particles_per_cell)
    grid = Grid.from_box(geometry.box_min, geometry.box_max, spacing, margin=geometry.margin)
    particles = ParticleSet.fill_box(geometry.box_min, geometry.box_max, spacing, ppc, config.material.density)

    loads = config.loads
    for k, traction in enumerate(loads.tractions):
        indices = particles.select(traction.box_min, traction.box_max)
        if indices.size == 0:
            raise ConfigurationError("Traction selects no particles", key=f"loads.tractions.{k}")
        particles.apply_traction(indices, np.asarray(traction.value) * load_scale, traction.normal_axis)
    for load in loads.point_loads:
        indices = particles.select(load.box_min, load.box_max)
        particles.apply_point_load(indices, np.asarray(load.force) * load_scale)

    constraints = [
        NodeConstraint(c.box_min, c.box_max, tuple(c.components), c.increment or None)
        for c in loads.constraints
    ]
    schedule = config.schedule
    elastic = {key: val for key, val in config.material.params.items() if key not in POROUS_KEYS}
    return Body(
        model=build_material(config.material.kind, elastic),
        grid=grid,
        particles=particles,
        constraints=constraints,
        schedule=LoadSchedule(
            n_steps=schedule.steps,
            body_force_ramp=schedule.ramp,
            traction_ramp=schedule.ramp,
            point_load_ramp=schedule.ramp,
            output_steps=list(schedule.output_steps),
        ),
        options=SolverOptions(
            tolerance=config.solver.tolerance,
            max_iterations=config.solver.max_iterations,
            jacobian=config.solver.jacobian,
            shape_function=config.solver.shape_function,
        ),
        gravity=np.asarray(loads.gravity, dtype=float) if loads.gravity else None,
    )


def poro_setup(config: ScenarioConfig) -> ConsolidationSetup:
    """Колонна консолидации по сценарию; вертикаль — последняя ось."""
    geometry = config.geometry
    params = config.material.params
    elastic = elastic_params(params)
    axis = geometry.dim - 1
    height = geometry.box_max[axis] - geometry.box_min[axis]
    h = geometry.axis_values(geometry.h)[axis]
    schedule = config.schedule
    defaults = ConsolidationSetup(params=PoroParams(lam=1.0, mu=1.0))
    return ConsolidationSetup(
        params=PoroParams(
            lam=float(elastic.lam),
            mu=float(elastic.mu),
            k=params.get('k', defaults.params.k),
            mu_f=params.get('mu_f', defaults.params.mu_f),
            rho_f=params.get('rho_f', defaults.params.rho_f),
        ),
        height=height,
        cells=int(round(height / h)),
        particles_per_cell=geometry.axis_values(geometry.particles_per_cell)[axis],
        load=config.loads.surface_load,
        dim=geometry.dim,
        dt=schedule.dt,
        dt_growth=schedule.dt_growth,
        dt_max=schedule.dt_max or max(schedule.dt, defaults.dt_max),
        output_times_tv=list(schedule.output_times_tv) or defaults.output_times_tv,
        drained=config.loads.drained,
        shape_function=config.solver.shape_function,
        jacobian=config.solver.jacobian,
        tolerance=config.solver.tolerance,
    )


def inverse_problem(config: ScenarioConfig) -> InverseProblem:
    """Постановка обратной задачи по секциям inverse и geometry."""
    inverse = config.inverse
    geometry = config.geometry
    h = geometry.axis_values(geometry.h)[0]
    ppc = geometry.axis_values(geometry.particles_per_cell)[0]
    E_true = inverse.E_true or float(elastic_params(config.material.params).E)
    common = dict(
        h=h,
        particles_per_cell=ppc,
        n_steps=config.schedule.steps,
        jacobian=config.solver.jacobian,
        shape_function=config.solver.shape_function,
    )
    if inverse.problem == 'strip-footing':
        return strip_footing_problem(
            E_true=E_true,
            nu=config.material.params.get('nu', 0.3),
            width=geometry.box_max[0] - geometry.box_min[0],
            height=geometry.box_max[1] - geometry.box_min[1],
            footing_width=inverse.footing_width,
            settlement_per_step=inverse.settlement_per_step,
            **common,
        )
    return settling_bar_problem(
        E_true=E_true,
        density=config.material.density,
        length=geometry.box_max[0] - geometry.box_min[0],
        gravity=config.loads.gravity[0] if config.loads.gravity else -acceptance.GRAVITY,
        **common,
    )


# ============================================================================
# СЕРВИС
# ============================================================================

class ScenarioService(BaseService[RunReport]):
    """Один прогон сценария: тело, драйвер, CSV, проверки, summary.json."""

    def __init__(self, log_manager: Optional[RunLogManager] = None):
        super().__init__()
        self.log_manager = log_manager or get_log_manager()
        self._runners: Dict[str, Callable[..., RunReport]] = {
            'bar': self._run_bar,
            'cantilever': self._run_cantilever,
            'consolidation': self._run_consolidation,
            'triaxial': self._run_triaxial,
            'inverse': self._run_inverse,
            'jacobian-bench': self._run_bench,
        }

    def run(
            self,
            config: ScenarioConfig,
            output_dir: Optional[Path] = None,
            check: bool = False,
            strategy: Optional[str] = None
    ) -> RunReport:
        """
        Выполнить сценарий.

        Args:
            config: Сценарий
            output_dir: Каталог результатов; по умолчанию output.dir или OUTPUT_DIR/<имя>
            check: Выполнить дорогие приёмочные исследования
            strategy: Переопределить стратегию якобиана (dense | sparse)

        Raises:
            ConfigurationError: сценарий не прошёл проверку
            MpmEngineException: ошибка решателя во время прогона
        """
        if strategy is not None:
            if config.kind == 'jacobian-bench' and config.bench is not None:
                config.bench.strategies = [strategy]
            else:
                config.solver.jacobian = strategy

        validation = validate_scenario(config)
        for warning in validation['warnings']:
            self.logger.warning(f"⚠ {warning}")
        if not validation['valid']:
            raise ConfigurationError("; ".join(validation['issues']))

        writer = OutputWriter(self._output_dir(config, output_dir))
        writer.text('scenario.yaml', serialize_scenario(config))
        session_id = self.log_manager.create_session(config.name)
        self.logger.info(f"Сценарий {config.name} ({config.kind}), режим {'check' if check else 'run'}")

        started = time.perf_counter()
        try:
            report = self._runners[config.kind](config, writer, check, session_id)
        except MpmEngineException as e:
            error_logger.log_exception(e, {'scenario': config.name})
            self.log_manager.close_session(session_id, 'failed')
            raise

        report.wall_s = time.perf_counter() - started
        summary_path = writer.path('summary.json')
        report.outputs = writer.manifest + [str(summary_path)]
        writer.json('summary.json', report.to_dict())

        failed = [c.name for c in report.checks if not c.passed]
        if failed:
            self.logger.warning(f"⚠ Не пройдены проверки: {', '.join(failed)}")
        else:
            self.logger.info(f"✓ {config.name}: {len(report.checks)} проверок пройдено за {report.wall_s:.2f} с")
        self.log_manager.close_session(session_id, 'failed-checks' if failed else 'completed')
        return report

    def _output_dir(self, config: ScenarioConfig, output_dir: Optional[Path]) -> Path:
        if output_dir is not None:
            return Path(output_dir)
        if config.output.dir:
            return Path(config.output.dir)
        from src.config import get_settings
        return Path(get_settings().output.output_dir) / config.name

    # ------------------------------------------------------------------
    # Общие части
    # ------------------------------------------------------------------

    def _simulate(
            self,
            config: ScenarioConfig,
            body: Body,
            writer: OutputWriter,
            session_id: str,
            on_step: Optional[Callable[[MpmSolver, StepResult], None]] = None
    ) -> RunResult:
        """Прогон MPM с выводом деформированной конфигурации и журнала итераций."""
        solver = body.solver(log_manager=self.log_manager, session_id=session_id)
        deformed = set(config.output.deformed_steps)

        def after_step(s: MpmSolver, result: StepResult) -> None:
            if result.step in deformed or s.schedule.is_output_step(result.step):
                writer.csv(f"particles_step_{result.step:03d}.csv", s.particles.rows())
            if on_step is not None:
                on_step(s, result)

        run = solver.run(after_step)
        writer.csv('steps.csv', [s.to_dict() for s in run.steps], STEP_COLUMNS)
        if config.output.iteration_log:
            writer.csv('iterations.csv', run.iteration_rows(), ITERATION_COLUMNS)
        writer.csv('particles_final.csv', body.particles.rows())
        return run

    def _quiet_run(self, body: Body) -> RunResult:
        """Прогон исследования: без журнала итераций и файлов."""
        return body.solver().run()

    # ------------------------------------------------------------------
    # Столб
    # ------------------------------------------------------------------

    def _bar_error(self, config: ScenarioConfig, body: Body) -> float:
        axis = config.geometry.dim - 1
        p = body.particles
        length = config.geometry.box_max[axis] - config.geometry.box_min[axis]
        return acceptance.bar_stress_error(
            p.stress[:, axis, axis],
            p.X[:, axis] - config.geometry.box_min[axis],
            p.volume0,
            config.material.density,
            length,
            abs(body.gravity[axis]),
        )

    def _run_bar(self, config: ScenarioConfig, writer: OutputWriter, check: bool, session_id: str) -> RunReport:
        limits = acceptance.thresholds('bar', config.checks)
        body = build_body(config)
        if body.gravity is None:
            raise ConfigurationError("Bar scenario needs loads.gravity", key='loads.gravity')
        run = self._simulate(config, body, writer, session_id)

        axis = config.geometry.dim - 1
        length = config.geometry.box_max[axis] - config.geometry.box_min[axis]
        p = body.particles
        Y = p.X[:, axis] - config.geometry.box_min[axis]
        analytic = acceptance.bar_analytic_stress(Y, config.material.density, length, abs(body.gravity[axis]))
        writer.csv(
            'stress_profile.csv',
            [{'Y': y, 'stress': s, 'analytic': a} for y, s, a in zip(Y, p.stress[:, axis, axis], analytic)],
            BAR_COLUMNS,
        )
        error = self._bar_error(config, body)

        study = None
        if check:
            study = {'h': [], 'error': []}
            rows = []
            for level in limits['refinement_levels']:
                h = length / 2 ** int(level)
                refined = build_body(config, h=h)
                self._quiet_run(refined)
                level_error = self._bar_error(config, refined)
                study['h'].append(h)
                study['error'].append(level_error)
                rows.append({'level': level, 'h': h, 'error': level_error})
                self.logger.info(f"Уровень {level}: h = {h:g}, ошибка {level_error:.3e}")
            writer.csv('convergence.csv', rows, BAR_STUDY_COLUMNS)

        summary = run.to_dict()
        summary['stress_error'] = error
        return RunReport(
            scenario=config.name,
            steps=len(run.steps),
            checks=acceptance.bar_checks(run, error, limits, study),
            summary=summary,
        )

    # ------------------------------------------------------------------
    # Консоль
    # ------------------------------------------------------------------

    @staticmethod
    def _tip(particles: ParticleSet) -> float:
        """Среднее вертикальное перемещение частиц под сосредоточенной нагрузкой."""
        loaded = np.flatnonzero(np.any(particles.point_force != 0.0, axis=1))
        if loaded.size == 0:
            raise ConfigurationError("Cantilever scenario needs a point load", key='loads.point_loads')
        return float(np.mean(particles.displacement[loaded, -1]))

    @staticmethod
    def _beam(config: ScenarioConfig, body: Body) -> Dict[str, float]:
        geometry = config.geometry
        elastic = elastic_params(config.material.params)
        return {
            'length': geometry.box_max[0] - geometry.box_min[0],
            'stiffness': acceptance.plane_strain_bending_stiffness(
                float(elastic.E), elastic.nu, geometry.box_max[-1] - geometry.box_min[-1]
            ),
            'load': float(abs(np.sum(body.particles.point_force[:, -1]))),
        }

    def _run_cantilever(self, config: ScenarioConfig, writer: OutputWriter, check: bool, session_id: str) -> RunReport:
        limits = acceptance.thresholds('cantilever', config.checks)
        body = build_body(config)
        beam = self._beam(config, body)
        tips: List[Dict[str, float]] = []

        def record_tip(s: MpmSolver, result: StepResult) -> None:
            load = beam['load'] * s.schedule.point_scale(result.step)
            tips.append({
                'step': result.step,
                'load': load,
                'tip': self._tip(s.particles),
                'euler_bernoulli': -acceptance.euler_bernoulli_tip(load, beam['length'], beam['stiffness']),
                'elastica': -acceptance.elastica_tip_deflection(load, beam['length'], beam['stiffness']),
            })

        run = self._simulate(config, body, writer, session_id, record_tip)
        writer.csv('tip_deflection.csv', tips, TIP_COLUMNS)

        small_tip = small_oracle = refined = None
        if check:
            fraction = limits['small_load_fraction']
            small = build_body(config, load_scale=fraction)
            self._quiet_run(small)
            small_tip = abs(self._tip(small.particles))
            small_oracle = acceptance.euler_bernoulli_tip(fraction * beam['load'], beam['length'], beam['stiffness'])
            self.logger.info(f"Малая нагрузка ({fraction:g}): прогиб {small_tip:.6e}, Эйлер-Бернулли {small_oracle:.6e}")

            if limits['refinement_h']:
                refined = []
                for h in limits['refinement_h']:
                    fine = build_body(config, h=float(h))
                    self._quiet_run(fine)
                    refined.append(self._tip(fine.particles))
                    self.logger.info(f"h = {float(h):g}: прогиб {refined[-1]:.6e}")
                writer.csv(
                    'refinement.csv',
                    [{'h': h, 'tip': t} for h, t in zip(limits['refinement_h'], refined)],
                    CANTILEVER_STUDY_COLUMNS,
                )

        summary = run.to_dict()
        summary.update({'tip': tips[-1]['tip'], 'elastica': tips[-1]['elastica'],
                        'euler_bernoulli': tips[-1]['euler_bernoulli']})
        return RunReport(
            scenario=config.name,
            steps=len(run.steps),
            checks=acceptance.cantilever_checks(small_tip, small_oracle, refined, limits),
            summary=summary,
        )

    # ------------------------------------------------------------------
    # Консолидация
    # ------------------------------------------------------------------

    def _run_consolidation(self, config: ScenarioConfig, writer: OutputWriter, check: bool, session_id: str) -> RunReport:
        limits = acceptance.thresholds('consolidation', config.checks)
        result = consolidation_run(poro_setup(config), self.log_manager, session_id)

        rows = []
        for profile in result.profiles:
            rows.extend(profile.rows())
        writer.csv('pressure_profiles.csv', rows, PROFILE_COLUMNS)
        writer.csv('settlement.csv', result.history, SETTLEMENT_COLUMNS)
        writer.csv('steps.csv', [s.to_dict() for s in result.run.steps], STEP_COLUMNS + ('time',))
        if config.output.iteration_log:
            writer.csv('iterations.csv', result.run.iteration_rows(), ITERATION_COLUMNS)

        return RunReport(
            scenario=config.name,
            steps=len(result.run.steps),
            checks=acceptance.consolidation_checks(result, limits),
            summary=result.to_dict(),
        )

    # ------------------------------------------------------------------
    # Трёхосное сжатие
    # ------------------------------------------------------------------

    def _run_triaxial(self, config: ScenarioConfig, writer: OutputWriter, check: bool, session_id: str) -> RunReport:
        limits = acceptance.thresholds('triaxial', config.checks)
        model = build_material('nor-sand', config.material.params)
        radial = config.loads.radial_stress
        if radial is None:
            radial = float(model.params.initial_stress[1])
        path = triaxial_path(config.loads.axial_strain, config.schedule.steps, radial)
        response = stress_point_drive(
            model,
            path,
            tolerance=config.solver.tolerance,
            max_iterations=config.solver.max_iterations,
            log_manager=self.log_manager,
            session_id=session_id,
        )
        writer.csv('response.csv', response.rows(), RESPONSE_COLUMNS)
        if config.output.iteration_log:
            rows = [
                {'step': step, 'iteration': k, 'relative_residual': r}
                for step, history in enumerate(response.residual_history, start=1)
                for k, r in enumerate(history)
            ]
            writer.csv('iterations.csv', rows, ITERATION_COLUMNS)

        reference = None
        if check and limits['behaviour'] == 'dilative':
            loose = NorSand(NorSandParams.loose())
            self.logger.info("Рыхлый образец на той же программе для сравнения пиков q")
            reference = stress_point_drive(
                loose,
                triaxial_path(config.loads.axial_strain, config.schedule.steps, float(loose.params.initial_stress[1])),
                tolerance=config.solver.tolerance,
                max_iterations=config.solver.max_iterations,
            )

        return RunReport(
            scenario=config.name,
            steps=len(response.iterations),
            checks=acceptance.triaxial_checks(response, limits, reference),
            summary=response.to_dict(),
        )

    # ------------------------------------------------------------------
    # Обратный анализ
    # ------------------------------------------------------------------

    def _run_inverse(self, config: ScenarioConfig, writer: OutputWriter, check: bool, session_id: str) -> RunReport:
        limits = acceptance.thresholds('inverse', config.checks)
        settings = config.inverse
        problem = inverse_problem(config)
        analysis = InverseAnalysis(problem, log_manager=self.log_manager, session_id=session_id)

        if settings.reference_csv and Path(settings.reference_csv).exists():
            loss = read_reference(Path(settings.reference_csv), settings.loss)
            self.logger.info(f"Опорный отклик: {settings.reference_csv}")
        else:
            loss = analysis.reference(settings.loss)
        analysis.set_loss(loss)
        writer.csv('reference.csv', loss.rows(), loss.columns)

        theta0 = float(np.log(settings.initial_factor * problem.E_true))
        state = analysis.gradient_descent(
            theta0,
            lr=settings.lr,
            loss_threshold=settings.loss_threshold,
            max_iters=settings.max_iters,
        )
        writer.csv('optimization.csv', state.rows(), OPTIMIZATION_COLUMNS)

        pairs = None
        if check:
            pairs = []
            for theta, gradient in list(zip(state.theta_history, state.gradient_history))[:2]:
                fd = analysis.finite_difference_gradient(theta, settings.fd_step)
                pairs.append((gradient, fd))
                self.logger.info(f"θ = {theta:.6f}: сопряжённый {gradient:.8e}, конечные разности {fd:.8e}")

        summary = state.to_dict()
        summary['E_true'] = problem.E_true
        return RunReport(
            scenario=config.name,
            steps=state.iterations,
            checks=acceptance.inverse_checks(state.E, problem.E_true, state.iterations, limits, pairs),
            summary=summary,
        )

    # ------------------------------------------------------------------
    # Якобиан
    # ------------------------------------------------------------------

    def _run_bench(self, config: ScenarioConfig, writer: OutputWriter, check: bool, session_id: str) -> RunReport:
        limits = acceptance.thresholds('jacobian-bench', config.checks)
        bench = config.bench

        equivalence = []
        for problem in bench.equivalence:
            solver, dt = acceptance.equivalence_solver(problem, config.solver.shape_function)
            equivalence.append(acceptance.jacobian_equivalence(solver, problem, dt))
        writer.csv('equivalence.csv', [e.to_row() for e in equivalence], acceptance.EQUIVALENCE_COLUMNS)

        extents = np.asarray(config.geometry.box_max) - np.asarray(config.geometry.box_min)

        def runner(level: float, strategy: str):
            timed = replace(config, schedule=replace(config.schedule, steps=bench.steps),
                            solver=replace(config.solver, jacobian=strategy))
            body = build_body(timed, h=level)
            solver = body.solver()
            run = solver.run()
            return run.wall_s, solver.assembler.stats, run.n_dof

        rows = differentiation_benchmark(
            runner,
            bench.levels,
            bench.strategies,
            label=lambda level: 'x'.join(str(int(round(e / level))) for e in extents),
        )
        writer.csv('benchmark.csv', [row.to_row() for row in rows], BENCHMARK_COLUMNS)

        def timings(strategy: str) -> List[float]:
            return [row.diff_s for row in rows if row.strategy == strategy]

        summary = {
            'equivalence': [e.to_row() for e in equivalence],
            'benchmark': [dict(row.to_row(), passes=row.passes, n_dof=row.n_dof) for row in rows],
        }
        return RunReport(
            scenario=config.name,
            steps=bench.steps,
            checks=acceptance.bench_checks(equivalence, timings('sparse'), timings('dense'), limits),
            summary=summary,
        )


__all__ = [
    'Body',
    'ScenarioService',
    'build_body',
    'elastic_params',
    'poro_setup',
    'inverse_problem',
]
