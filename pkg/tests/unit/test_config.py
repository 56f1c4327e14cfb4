"""
Тесты конфигурации: настройки из окружения и сценарии YAML.
"""

from pathlib import Path

import pytest

from src.config import get_settings, reset_settings, validate_settings
from src.config.scenario import (
    apply_overrides,
    load_scenario,
    parse_quantity,
    parse_scenario,
    scenario_from_dict,
    serialize_scenario,
    validate_scenario,
)
from src.core.exceptions import ConfigurationError

SCENARIO_DIR = Path(__file__).parent.parent.parent / 'src' / 'config' / 'scenarios'


# ============================================================================
# НАСТРОЙКИ
# ============================================================================

def test_settings_from_environment(monkeypatch):
    """Тест чтения настроек из переменных окружения."""
    monkeypatch.setenv('MPM_INTERFERENCE_CHECK', 'Sampled')
    monkeypatch.setenv('MPM_DENSE_LU_LIMIT', '1_000')
    reset_settings()

    settings = get_settings()

    assert settings.INTERFERENCE_CHECK == 'sampled'
    assert settings.jacobian.dense_lu_limit == 1000
    assert get_settings() is settings


def test_settings_bad_integer_falls_back(monkeypatch):
    """Тест: нечисловое значение заменяется значением по умолчанию."""
    monkeypatch.setenv('MPM_MAX_TAPE_NODES', 'many')
    reset_settings()

    assert get_settings().jacobian.max_tape_nodes == 50_000_000


def test_validate_settings(monkeypatch):
    """Тест проверки настроек."""
    monkeypatch.setenv('MPM_INTERFERENCE_CHECK', 'never')
    monkeypatch.setenv('MPM_LOG_LEVEL', 'chatty')
    reset_settings()

    report = validate_settings()

    assert not report['valid']
    assert len(report['issues']) == 2


def test_disabled_interference_check_warns(monkeypatch):
    """Тест предупреждения при отключённой проверке интерференции."""
    monkeypatch.setenv('MPM_INTERFERENCE_CHECK', 'off')
    reset_settings()

    report = validate_settings()

    assert report['valid']
    assert report['warnings']


# ============================================================================
# ВЕЛИЧИНЫ С ЕДИНИЦАМИ
# ============================================================================

@pytest.mark.parametrize('value,expected', [
    (3, 3.0),
    ('10 kPa', 1.0e4),
    ('1 t/m3', 1.0e3),
    ('-9.81 m/s2', -9.81),
    ('2.5e-3', 2.5e-3),
    ('5 mm', 5.0e-3),
])
def test_parse_quantity(value, expected):
    """Тест разбора числа с единицей измерения."""
    assert parse_quantity(value) == pytest.approx(expected)


@pytest.mark.parametrize('value', ['10 furlongs', 'ten', True, None])
def test_parse_quantity_rejects(value):
    """Тест недопустимых величин."""
    with pytest.raises(ConfigurationError):
        parse_quantity(value, 'material.E')


# ============================================================================
# СЦЕНАРИИ
# ============================================================================

@pytest.mark.parametrize('path', sorted(SCENARIO_DIR.glob('*.yaml')), ids=lambda p: p.stem)
def test_shipped_scenarios_are_valid(path):
    """Тест: поставляемые сценарии разбираются и проходят проверку."""
    config = load_scenario(path)

    report = validate_scenario(config)

    assert report['valid'], report['issues']


def test_scenario_units_and_material_params():
    """Тест перевода единиц в СИ и параметров материала."""
    config = load_scenario(SCENARIO_DIR / 'consolidation.yaml')

    assert config.kind == 'consolidation'
    assert config.material.density == pytest.approx(1000.0)
    assert config.material.params['lam'] == pytest.approx(6.0e5)
    assert config.material.params['k'] == pytest.approx(1.0e-12)
    assert config.loads.surface_load == pytest.approx(1.0e3)
    assert config.schedule.output_times_tv == [0.05, 0.2, 0.5, 0.9]


def test_overrides_applied_before_parsing():
    """Тест переопределений --set."""
    config = load_scenario(
        SCENARIO_DIR / 'bar_elastic.yaml',
        overrides=['schedule.steps=4', 'solver.jacobian=dense', 'material.E=20 kPa'],
    )

    assert config.schedule.steps == 4
    assert config.solver.jacobian == 'dense'
    assert config.material.params['E'] == pytest.approx(2.0e4)


def test_apply_overrides_creates_sections():
    """Тест: переопределение создаёт недостающие секции и не меняет исходный словарь."""
    data = {'scenario': {'kind': 'bar'}}

    result = apply_overrides(data, ['inverse.lr=0.5'])

    assert result['inverse'] == {'lr': 0.5}
    assert 'inverse' not in data


@pytest.mark.parametrize('override', ['schedule.steps', '=3', 'scenario.kind.x=1'])
def test_apply_overrides_rejects(override):
    """Тест некорректных переопределений."""
    with pytest.raises(ConfigurationError):
        apply_overrides({'scenario': {'kind': 'bar'}}, [override])


def test_unknown_key_reports_path():
    """Тест: неизвестный ключ сообщается с полным путём."""
    with pytest.raises(ConfigurationError) as exc_info:
        scenario_from_dict({'scenario': {'kind': 'bar'}, 'solver': {'tolerence': 1e-8}})

    assert exc_info.value.key == 'solver.tolerence'


def test_unknown_material_key():
    """Тест неизвестного параметра материала."""
    with pytest.raises(ConfigurationError) as exc_info:
        scenario_from_dict({'material': {'kind': 'hencky', 'E': 1.0, 'M': 1.2}})

    assert exc_info.value.key == 'material.M'


def test_unknown_check_for_kind():
    """Тест: порог проверки должен относиться к типу сценария."""
    with pytest.raises(ConfigurationError) as exc_info:
        scenario_from_dict({'scenario': {'kind': 'bar'}, 'checks': {'profile_l2': 0.02}})

    assert exc_info.value.key == 'checks.profile_l2'


def test_unknown_scenario_kind():
    """Тест неизвестного типа сценария."""
    with pytest.raises(ConfigurationError) as exc_info:
        scenario_from_dict({'scenario': {'kind': 'dam-break'}})

    assert exc_info.value.key == 'scenario.kind'


def test_missing_and_malformed_files(tmp_path):
    """Тест отсутствующего файла и битого YAML."""
    with pytest.raises(ConfigurationError):
        load_scenario(tmp_path / 'missing.yaml')

    broken = tmp_path / 'broken.yaml'
    broken.write_text('scenario: [kind: bar\n', encoding='utf-8')
    with pytest.raises(ConfigurationError):
        load_scenario(broken)


def test_serialized_scenario_parses_back():
    """Тест: сериализованный сценарий разбирается в ту же конфигурацию."""
    config = load_scenario(SCENARIO_DIR / 'cantilever.yaml')

    again = parse_scenario(serialize_scenario(config))

    assert again == config


def test_triaxial_requires_nor_sand():
    """Тест: трёхосный точечный прогон только с Nor-Sand."""
    config = scenario_from_dict({
        'scenario': {'kind': 'triaxial'},
        'material': {'kind': 'hencky', 'E': 1.0e6, 'nu': 0.3},
        'loads': {'axial_strain': -0.01},
    })

    report = validate_scenario(config)

    assert not report['valid']
    assert any('nor-sand' in issue for issue in report['issues'])


def test_nor_sand_outside_triaxial_rejected():
    """Тест: Nor-Sand недоступен решателю MPM."""
    config = scenario_from_dict({
        'scenario': {'kind': 'bar'},
        'material': {'kind': 'nor-sand'},
    })

    report = validate_scenario(config)

    assert any('Nor-Sand' in issue for issue in report['issues'])


def test_hencky_accepted_in_3d():
    """Тест: модель Генки допустима в трёхмерной постановке."""
    config = scenario_from_dict({
        'scenario': {'kind': 'cantilever'},
        'geometry': {'dim': 3, 'box_min': [0.0, 0.0, 0.0], 'box_max': [1.0, 1.0, 1.0]},
        'material': {'kind': 'hencky', 'E': 1.0e4},
    })

    report = validate_scenario(config)

    assert not any('hencky' in issue.lower() for issue in report['issues'])


def test_validation_collects_geometry_issues():
    """Тест проверки геометрии и схемы GIMP."""
    config = scenario_from_dict({
        'scenario': {'kind': 'bar'},
        'geometry': {'dim': 2, 'box_min': [0.0], 'box_max': [1.0, 1.0], 'particles_per_cell': [1]},
        'material': {'kind': 'hencky', 'E': 1.0e4},
    })

    report = validate_scenario(config)

    assert not report['valid']
    assert any('box_min' in issue for issue in report['issues'])


def test_consolidation_requirements():
    """Тест обязательных полей консолидации."""
    config = scenario_from_dict({
        'scenario': {'kind': 'consolidation'},
        'material': {'kind': 'linear-elastic', 'lam': 1.0e6, 'mu': 1.0e6},
    })

    issues = validate_scenario(config)['issues']

    assert any('surface_load' in issue for issue in issues)
    assert any('schedule.dt' in issue for issue in issues)
    assert any('material.k' in issue for issue in issues)
