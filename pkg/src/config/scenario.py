"""
Конфигурация сценария: YAML с секциями, единицами измерения и строгой проверкой ключей.

Величины задаются числом (СИ) или строкой с единицей ("10 kPa", "50 m").
При разборе всё приводится к СИ; serialize_scenario пишет числа СИ.
"""

import logging
import re
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import yaml

from src.core.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

SCENARIO_KINDS = ('triaxial', 'bar', 'cantilever', 'consolidation', 'inverse', 'jacobian-bench')

UNITS: Dict[str, float] = {
    'Pa': 1.0, 'kPa': 1.0e3, 'MPa': 1.0e6, 'GPa': 1.0e9,
    'N': 1.0, 'kN': 1.0e3, 'MN': 1.0e6,
    'm': 1.0, 'cm': 1.0e-2, 'mm': 1.0e-3,
    's': 1.0, 'min': 60.0, 'h': 3600.0, 'd': 86400.0,
    'kg/m3': 1.0, 't/m3': 1.0e3,
    'm2': 1.0,
    'Pa*s': 1.0,
    'm/s2': 1.0,
    'm2/s': 1.0,
}

_QUANTITY = re.compile(r'^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z/*0-9]+)?\s*$')

ELASTIC_KEYS = ('E', 'nu', 'lam', 'mu', 'kappa')
POROUS_KEYS = ('k', 'mu_f', 'rho_f')
NOR_SAND_KEYS = (
    'M', 'N', 'h_mod', 'lambda_tilde', 'v_c0', 'v0', 'p_i0', 'K0', 'p0',
    'chi_i', 'shear_ratio', 'tolerance', 'max_iterations',
)

CHECK_KEYS: Dict[str, Sequence[str]] = {
    'bar': ('stress_error', 'max_iterations', 'newton_slope', 'refinement_levels', 'convergence_slope'),
    'cantilever': ('small_load_fraction', 'small_load_tol', 'self_convergence', 'refinement_h'),
    'consolidation': ('profile_l2', 'settlement'),
    'triaxial': ('max_iterations', 'convergence_order', 'behaviour', 'softening'),
    'inverse': ('modulus_error', 'max_iterations', 'gradient_fd'),
    'jacobian-bench': ('equivalence', 'sparse_variation', 'speedup'),
}


# ============================================================================
# РАЗБОР ЗНАЧЕНИЙ
# ============================================================================

def parse_quantity(value: Any, key: str = '') -> float:
    """
    Число или строка "<число> <единица>" → float в СИ.

    Raises:
        ConfigurationError: неизвестная единица или не число
    """
    if isinstance(value, bool):
        raise ConfigurationError(f"Expected a number, got {value!r}", key=key)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        match = _QUANTITY.match(value)
        if match:
            number, unit = match.groups()
            if unit is None:
                return float(number)
            if unit in UNITS:
                return float(number) * UNITS[unit]
            raise ConfigurationError(f"Unknown unit '{unit}' in {value!r}", key=key)
    raise ConfigurationError(f"Expected a number, got {value!r}", key=key)


def _quantity_list(value: Any, key: str) -> List[float]:
    if isinstance(value, (list, tuple)):
        return [parse_quantity(v, f"{key}[{i}]") for i, v in enumerate(value)]
    return [parse_quantity(value, key)]


def _optional_quantity(value: Any, key: str) -> Optional[float]:
    return None if value is None else parse_quantity(value, key)


def _integer(value: Any, key: str) -> int:
    number = parse_quantity(value, key)
    if number != int(number):
        raise ConfigurationError(f"Expected an integer, got {value!r}", key=key)
    return int(number)


def _int_list(value: Any, key: str) -> List[int]:
    if isinstance(value, (list, tuple)):
        return [_integer(v, f"{key}[{i}]") for i, v in enumerate(value)]
    return [_integer(value, key)]


def _boolean(value: Any, key: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigurationError(f"Expected true/false, got {value!r}", key=key)
    return value


def _text(value: Any, key: str) -> str:
    if not isinstance(value, str):
        raise ConfigurationError(f"Expected a string, got {value!r}", key=key)
    return value


def _optional_text(value: Any, key: str) -> Optional[str]:
    return None if value is None else _text(value, key)


def _text_list(value: Any, key: str) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [_text(v, f"{key}[{i}]") for i, v in enumerate(value)]
    return [_text(value, key)]


def _check_value(value: Any, key: str) -> Any:
    """Порог проверки: число, список чисел или строка-метка."""
    if isinstance(value, (list, tuple)):
        return _quantity_list(value, key)
    if isinstance(value, str) and not _QUANTITY.match(value):
        return value
    return parse_quantity(value, key)


def _spec(parse: Callable[[Any, str], Any], **kwargs: Any) -> Any:
    """Поле секции с функцией разбора в metadata."""
    return field(metadata={'parse': parse}, **kwargs)


def _nested(cls: type, **kwargs: Any) -> Any:
    return field(metadata={'section': cls}, **kwargs)


def _items(cls: type) -> Any:
    return field(default_factory=list, metadata={'items': cls})


# ============================================================================
# СЕКЦИИ
# ============================================================================

@dataclass
class ScenarioSection:
    """Имя и тип сценария"""
    kind: str = _spec(_text, default='bar')
    name: str = _spec(_text, default='')


@dataclass
class GeometrySection:
    """Тело (ящик), шаг сетки, частицы на ячейку"""
    dim: int = _spec(_integer, default=1)
    box_min: List[float] = _spec(_quantity_list, default_factory=lambda: [0.0])
    box_max: List[float] = _spec(_quantity_list, default_factory=lambda: [1.0])
    h: List[float] = _spec(_quantity_list, default_factory=lambda: [0.25])
    particles_per_cell: List[int] = _spec(_int_list, default_factory=lambda: [2])
    margin: int = _spec(_integer, default=1)

    def axis_values(self, values: Sequence[Any]) -> List[Any]:
        """Скаляр распространяется на все оси."""
        return list(values) * self.dim if len(values) == 1 else list(values)


@dataclass
class MaterialSection:
    """Модель материала; params — параметры модели в СИ"""
    kind: str = 'hencky'
    density: float = 1000.0
    params: Dict[str, float] = field(default_factory=dict)

    @property
    def allowed_keys(self) -> Sequence[str]:
        if self.kind == 'nor-sand':
            return NOR_SAND_KEYS
        return ELASTIC_KEYS + POROUS_KEYS


@dataclass
class ScheduleSection:
    """Шаги нагружения и (для консолидации) приращения времени"""
    steps: int = _spec(_integer, default=1)
    ramp: bool = _spec(_boolean, default=True)
    dt: Optional[float] = _spec(_optional_quantity, default=None)
    dt_growth: float = _spec(parse_quantity, default=1.0)
    dt_max: Optional[float] = _spec(_optional_quantity, default=None)
    output_steps: List[int] = _spec(_int_list, default_factory=list)
    output_times_tv: List[float] = _spec(_quantity_list, default_factory=list)


@dataclass
class SolverSection:
    """Ньютон и дискретизация"""
    tolerance: float = _spec(parse_quantity, default=1e-11)
    max_iterations: int = _spec(_integer, default=20)
    jacobian: str = _spec(_text, default='sparse')
    shape_function: str = _spec(_text, default='gimp')


@dataclass
class TractionSpec:
    """Мёртвая поверхностная нагрузка на частицы ящика"""
    box_min: List[float] = _spec(_quantity_list, default_factory=list)
    box_max: List[float] = _spec(_quantity_list, default_factory=list)
    value: List[float] = _spec(_quantity_list, default_factory=list)
    normal_axis: int = _spec(_integer, default=0)


@dataclass
class PointLoadSpec:
    """Сосредоточенная сила, поровну на частицы ящика"""
    box_min: List[float] = _spec(_quantity_list, default_factory=list)
    box_max: List[float] = _spec(_quantity_list, default_factory=list)
    force: List[float] = _spec(_quantity_list, default_factory=list)


@dataclass
class ConstraintSpec:
    """Заданные приращения узловых неизвестных в ящике (пусто — закрепление)"""
    box_min: List[float] = _spec(_quantity_list, default_factory=list)
    box_max: List[float] = _spec(_quantity_list, default_factory=list)
    components: List[int] = _spec(_int_list, default_factory=list)
    increment: List[float] = _spec(_quantity_list, default_factory=list)


@dataclass
class LoadsSection:
    """Нагрузки и граничные условия"""
    gravity: List[float] = _spec(_quantity_list, default_factory=list)
    tractions: List[TractionSpec] = _items(TractionSpec)
    point_loads: List[PointLoadSpec] = _items(PointLoadSpec)
    constraints: List[ConstraintSpec] = _items(ConstraintSpec)
    surface_load: Optional[float] = _spec(_optional_quantity, default=None)
    drained: bool = _spec(_boolean, default=True)
    axial_strain: Optional[float] = _spec(_optional_quantity, default=None)
    radial_stress: Optional[float] = _spec(_optional_quantity, default=None)


@dataclass
class OutputSection:
    """Каталог результатов; пусто — MPM_OUTPUT_DIR/<name>"""
    dir: str = _spec(_text, default='')
    deformed_steps: List[int] = _spec(_int_list, default_factory=list)
    iteration_log: bool = _spec(_boolean, default=True)


@dataclass
class InverseSection:
    """Идентификация модуля Юнга"""
    problem: str = _spec(_text, default='strip-footing')
    loss: str = _spec(_text, default='slope')
    E_true: Optional[float] = _spec(_optional_quantity, default=None)
    initial_factor: float = _spec(parse_quantity, default=0.1)
    lr: float = _spec(parse_quantity, default=0.2)
    loss_threshold: float = _spec(parse_quantity, default=1e-6)
    max_iters: int = _spec(_integer, default=20)
    reference_csv: Optional[str] = _spec(_optional_text, default=None)
    fd_step: float = _spec(parse_quantity, default=1e-4)
    footing_width: float = _spec(parse_quantity, default=0.25)
    settlement_per_step: float = _spec(parse_quantity, default=1e-3)


@dataclass
class BenchSection:
    """Сравнение стратегий дифференцирования"""
    levels: List[float] = _spec(_quantity_list, default_factory=list)
    strategies: List[str] = _spec(_text_list, default_factory=lambda: ['sparse', 'dense'])
    steps: int = _spec(_integer, default=1)
    equivalence: List[str] = _spec(
        _text_list, default_factory=lambda: ['bar', 'cantilever', 'consolidation', 'smoke-3d']
    )


@dataclass
class ScenarioConfig:
    """Полная конфигурация прогона"""
    scenario: ScenarioSection = _nested(ScenarioSection, default_factory=ScenarioSection)
    geometry: GeometrySection = _nested(GeometrySection, default_factory=GeometrySection)
    material: MaterialSection = _nested(MaterialSection, default_factory=MaterialSection)
    schedule: ScheduleSection = _nested(ScheduleSection, default_factory=ScheduleSection)
    solver: SolverSection = _nested(SolverSection, default_factory=SolverSection)
    loads: LoadsSection = _nested(LoadsSection, default_factory=LoadsSection)
    output: OutputSection = _nested(OutputSection, default_factory=OutputSection)
    checks: Dict[str, Any] = field(default_factory=dict)
    inverse: Optional[InverseSection] = _nested(InverseSection, default=None)
    bench: Optional[BenchSection] = _nested(BenchSection, default=None)

    @property
    def kind(self) -> str:
        return self.scenario.kind

    @property
    def name(self) -> str:
        return self.scenario.name or self.scenario.kind


# ============================================================================
# СБОРКА ИЗ СЛОВАРЯ
# ============================================================================

def _mapping(data: Any, path: str) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Section must be a mapping, got {type(data).__name__}", key=path or None)
    return data


def _build(cls: type, data: Any, path: str) -> Any:
    """Собрать секцию; неизвестный ключ — ошибка с полным путём."""
    data = _mapping(data, path)
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"Unknown key '{key}'", key=f"{path}.{key}" if path else key)

    kwargs: Dict[str, Any] = {}
    for name, value in data.items():
        meta = known[name].metadata
        dotted = f"{path}.{name}" if path else name
        if 'section' in meta:
            kwargs[name] = None if value is None else _build(meta['section'], value, dotted)
        elif 'items' in meta:
            if not isinstance(value, list):
                raise ConfigurationError("Expected a list of mappings", key=dotted)
            kwargs[name] = [_build(meta['items'], item, f"{dotted}[{i}]") for i, item in enumerate(value)]
        elif 'parse' in meta:
            kwargs[name] = meta['parse'](value, dotted)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _build_material(data: Any) -> MaterialSection:
    data = dict(_mapping(data, 'material'))
    kind = _text(data.pop('kind', 'hencky'), 'material.kind')
    density = parse_quantity(data.pop('density', 1000.0), 'material.density')
    section = MaterialSection(kind=kind, density=density)
    allowed = section.allowed_keys
    params = {}
    for key, value in data.items():
        if key not in allowed:
            raise ConfigurationError(f"Unknown key '{key}' for material '{kind}'", key=f"material.{key}")
        if key == 'max_iterations':
            params[key] = _integer(value, f"material.{key}")
        else:
            params[key] = parse_quantity(value, f"material.{key}")
    section.params = params
    return section


def _build_checks(data: Any, kind: str) -> Dict[str, Any]:
    data = _mapping(data, 'checks')
    allowed = CHECK_KEYS.get(kind, ())
    checks = {}
    for key, value in data.items():
        if key not in allowed:
            raise ConfigurationError(f"Unknown check '{key}' for scenario '{kind}'", key=f"checks.{key}")
        checks[key] = _check_value(value, f"checks.{key}")
    return checks


def scenario_from_dict(data: Dict[str, Any]) -> ScenarioConfig:
    """
    Raises:
        ConfigurationError: неизвестный ключ, единица или тип значения
    """
    data = dict(_mapping(data, ''))
    material = data.pop('material', None)
    checks = data.pop('checks', None)
    config = _build(ScenarioConfig, data, '')
    if config.kind not in SCENARIO_KINDS:
        raise ConfigurationError(
            f"Unknown scenario kind '{config.kind}'; expected one of {', '.join(SCENARIO_KINDS)}",
            key='scenario.kind'
        )
    config.material = _build_material(material)
    config.checks = _build_checks(checks, config.kind)
    return config


def parse_scenario(text: str) -> ScenarioConfig:
    """Разобрать YAML-текст сценария."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Invalid YAML: {e}")
    return scenario_from_dict(data or {})


def load_scenario(path: Path, overrides: Optional[Sequence[str]] = None) -> ScenarioConfig:
    """Прочитать сценарий из файла и применить переопределения --set."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in {path}: {e}")
    if overrides:
        data = apply_overrides(data, overrides)
    config = scenario_from_dict(data)
    logger.debug(f"Сценарий загружен: {path} ({config.kind})")
    return config


# ============================================================================
# СЕРИАЛИЗАЦИЯ
# ============================================================================

def _plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def scenario_to_dict(config: ScenarioConfig) -> Dict[str, Any]:
    """Словарь в СИ; параметры материала — на уровне секции material."""
    data = _plain(config)
    material = data.pop('material')
    data['material'] = {'kind': material['kind'], 'density': material['density'], **material['params']}
    for optional in ('inverse', 'bench'):
        if data[optional] is None:
            data.pop(optional)
    return data


def serialize_scenario(config: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario_to_dict(config), sort_keys=False, allow_unicode=True)


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Переопределения вида "a.b.c=значение"; значение разбирается как YAML.

    Raises:
        ConfigurationError: нет '=' или путь проходит через не-словарь
    """
    result = _copy(data)
    for item in overrides:
        if '=' not in item:
            raise ConfigurationError(f"Override must look like key=value, got {item!r}")
        dotted, raw = item.split('=', 1)
        keys = [k for k in dotted.strip().split('.') if k]
        if not keys:
            raise ConfigurationError(f"Empty override key in {item!r}")
        node = result
        for depth, key in enumerate(keys[:-1]):
            child = node.setdefault(key, {})
            if child is None:
                child = node[key] = {}
            if not isinstance(child, dict):
                raise ConfigurationError("Cannot override inside non-mapping", key='.'.join(keys[:depth + 1]))
            node = child
        node[keys[-1]] = yaml.safe_load(raw)
    return result


def _copy(data: Any) -> Any:
    if isinstance(data, dict):
        return {k: _copy(v) for k, v in data.items()}
    if isinstance(data, list):
        return [_copy(v) for v in data]
    return data


# ============================================================================
# ВАЛИДАЦИЯ
# ============================================================================

def validate_scenario(config: ScenarioConfig) -> Dict[str, Any]:
    """
    Проверка до прогона.

    Returns:
        {'valid': bool, 'issues': [...], 'warnings': [...]}
    """
    from src.mechanics.constitutive import MATERIAL_KINDS, build_material
    from src.mechanics.shape_functions import SHAPE_FUNCTIONS
    from src.services.jacobian_service import STRATEGIES

    issues: List[str] = []
    warnings: List[str] = []
    geometry = config.geometry
    kind = config.kind

    # Геометрия
    dim = geometry.dim
    if not 1 <= dim <= 3:
        issues.append(f"geometry.dim must be 1, 2 or 3, got {dim}")
    else:
        for name in ('box_min', 'box_max'):
            if len(getattr(geometry, name)) != dim:
                issues.append(f"geometry.{name} must have {dim} entries")
        for name in ('h', 'particles_per_cell'):
            if len(getattr(geometry, name)) not in (1, dim):
                issues.append(f"geometry.{name} must have 1 or {dim} entries")
    if not issues:
        h = geometry.axis_values(geometry.h)
        ppc = geometry.axis_values(geometry.particles_per_cell)
        for a in range(dim):
            extent = geometry.box_max[a] - geometry.box_min[a]
            if extent <= 0.0:
                issues.append(f"geometry: body extent along axis {a} must be positive")
            if h[a] <= 0.0:
                issues.append("geometry.h must be positive")
            elif extent > 0.0 and abs(extent / h[a] - round(extent / h[a])) > 1e-6:
                warnings.append(f"geometry: extent along axis {a} is not a whole number of cells")
            if ppc[a] < 1:
                issues.append("geometry.particles_per_cell must be >= 1")
            elif config.solver.shape_function == 'gimp' and ppc[a] < 2:
                issues.append("GIMP needs particles_per_cell >= 2 so that 0 < lp < h/2")
    if geometry.margin < 1:
        issues.append("geometry.margin must leave at least one cell around the body")

    # Материал
    if config.material.kind not in MATERIAL_KINDS:
        issues.append(f"material.kind must be one of {MATERIAL_KINDS}, got {config.material.kind!r}")
    else:
        if config.material.density <= 0.0:
            issues.append("material.density must be positive")
        elastic = {k: v for k, v in config.material.params.items() if k not in POROUS_KEYS}
        try:
            build_material(config.material.kind, elastic)
        except ConfigurationError as e:
            issues.append(e.message)
        except TypeError as e:
            issues.append(f"material: {e}")
    if config.material.kind == 'nor-sand' and kind != 'triaxial':
        issues.append("Nor-Sand is available for triaxial stress-point runs only")

    # Решатель и программа
    solver = config.solver
    if not 0.0 < solver.tolerance < 1.0:
        issues.append("solver.tolerance must lie in (0, 1)")
    if solver.max_iterations < 1:
        issues.append("solver.max_iterations must be >= 1")
    if solver.jacobian not in STRATEGIES:
        issues.append(f"solver.jacobian must be one of {STRATEGIES}")
    spec = SHAPE_FUNCTIONS.get(solver.shape_function)
    if spec is None or not spec.implemented:
        issues.append(f"solver.shape_function {solver.shape_function!r} has no implemented weights")
    if config.schedule.steps < 1:
        issues.append("schedule.steps must be >= 1")
    if config.schedule.dt_growth < 1.0:
        issues.append("schedule.dt_growth must be >= 1")

    # Сценарные требования
    loads = config.loads
    if kind == 'consolidation':
        if loads.surface_load is None or loads.surface_load <= 0.0:
            issues.append("consolidation needs a positive loads.surface_load")
        if config.schedule.dt is None or config.schedule.dt <= 0.0:
            issues.append("consolidation needs a positive schedule.dt")
        for key in ('k', 'mu_f'):
            if config.material.params.get(key, 0.0) <= 0.0:
                issues.append(f"consolidation needs a positive material.{key}")
        if not config.schedule.output_times_tv:
            warnings.append("schedule.output_times_tv is empty: no pressure profiles will be written")
    if kind == 'triaxial':
        if loads.axial_strain is None:
            issues.append("triaxial needs loads.axial_strain")
        if config.material.kind != 'nor-sand':
            issues.append("triaxial stress-point runs need material.kind nor-sand")
    if kind == 'inverse':
        if config.inverse is None:
            issues.append("inverse scenario needs an 'inverse' section")
        else:
            inv = config.inverse
            if inv.lr <= 0.0:
                issues.append("inverse.lr must be positive")
            if inv.initial_factor <= 0.0:
                issues.append("inverse.initial_factor must be positive")
            if inv.loss not in ('slope', 'terminal-displacement'):
                issues.append(f"inverse.loss must be slope or terminal-displacement, got {inv.loss!r}")
            if inv.problem not in ('strip-footing', 'settling-bar'):
                issues.append(f"inverse.problem must be strip-footing or settling-bar, got {inv.problem!r}")
            if inv.problem == 'strip-footing' and dim != 2:
                issues.append("strip-footing inverse problem is two-dimensional")
            if inv.reference_csv and not Path(inv.reference_csv).exists():
                warnings.append(f"reference CSV {inv.reference_csv} not found: it will be generated")
    if kind == 'jacobian-bench':
        if config.bench is None:
            issues.append("jacobian-bench scenario needs a 'bench' section")
        else:
            bad = [s for s in config.bench.strategies if s not in STRATEGIES]
            if bad:
                issues.append(f"bench.strategies contains unknown strategies {bad}")
            if any(level <= 0.0 for level in config.bench.levels):
                issues.append("bench.levels must be positive grid spacings")

    return {
        'valid': len(issues) == 0,
        'issues': issues,
        'warnings': warnings,
    }


__all__ = [
    'SCENARIO_KINDS',
    'UNITS',
    'CHECK_KEYS',
    'ScenarioConfig',
    'ScenarioSection',
    'GeometrySection',
    'MaterialSection',
    'ScheduleSection',
    'SolverSection',
    'LoadsSection',
    'TractionSpec',
    'PointLoadSpec',
    'ConstraintSpec',
    'OutputSection',
    'InverseSection',
    'BenchSection',
    'parse_quantity',
    'parse_scenario',
    'load_scenario',
    'scenario_from_dict',
    'scenario_to_dict',
    'serialize_scenario',
    'apply_overrides',
    'validate_scenario',
]
