# src/core/exceptions.py
"""
Централизованная система обработки исключений движка.
Предоставляет иерархию кастомных исключений и декораторы для обработки ошибок.
"""

import logging
import functools
from typing import Optional, Callable, Any, List, Sequence
from enum import Enum


# ============================================================================
# ERROR CODES
# ============================================================================

class ErrorCode(Enum):
    """Коды ошибок для категоризации."""

    # Tape / AD errors (1xxx)
    TAPE_ERROR = 1000
    TAPE_UNSUPPORTED_OPERATION = 1001
    TAPE_DOMAIN_ERROR = 1002
    TAPE_SEED_DIMENSION_MISMATCH = 1003
    TAPE_CAPACITY_EXCEEDED = 1004

    # Shape function / domain errors (2xxx)
    SHAPE_FUNCTION_ERROR = 2000
    PARTICLE_DOMAIN_OVERFLOW = 2001
    UNREGISTERED_SHAPE_KIND = 2002

    # Constitutive errors (3xxx)
    CONSTITUTIVE_ERROR = 3000
    INVALID_KINEMATICS = 3001
    RETURN_MAP_NONCONVERGENCE = 3002

    # Solver errors (4xxx)
    SOLVER_ERROR = 4000
    NEWTON_NONCONVERGENCE = 4001
    LINEAR_SOLVER_SINGULAR = 4002
    OUT_OF_DOMAIN = 4003
    INVERTED_ELEMENT = 4004

    # Jacobian assembly errors (5xxx)
    JACOBIAN_ERROR = 5000
    SEEDING_FAULT = 5001

    # Inverse analysis errors (6xxx)
    INVERSE_ERROR = 6000
    ADJOINT_SOLVE_ERROR = 6001
    OPTIMIZATION_DIVERGENCE = 6002

    # System errors (9xxx)
    CONFIGURATION_ERROR = 9001
    FILE_SYSTEM_ERROR = 9002
    UNKNOWN_ERROR = 9999


# ============================================================================
# BASE EXCEPTIONS
# ============================================================================

class MpmEngineException(Exception):
    """
    Базовое исключение для всего движка.
    Все кастомные исключения должны наследоваться от него.
    """

    def __init__(
            self,
            message: str,
            error_code: ErrorCode = ErrorCode.UNKNOWN_ERROR,
            original_exception: Optional[Exception] = None,
            context: Optional[dict] = None
    ):
        self.message = message
        self.error_code = error_code
        self.original_exception = original_exception
        self.context = context or {}

        super().__init__(self.message)

    def __str__(self) -> str:
        base = f"[{self.error_code.name}] {self.message}"
        if self.context:
            base += f" | Context: {self.context}"
        if self.original_exception:
            base += f" | Original: {type(self.original_exception).__name__}: {self.original_exception}"
        return base

    def to_dict(self) -> dict:
        """Конвертация исключения в словарь для JSON-отчёта."""
        return {
            'error': True,
            'error_code': self.error_code.name,
            'error_code_value': self.error_code.value,
            'message': self.message,
            'context': self.context,
            'original_error': (
                str(self.original_exception)
                if self.original_exception else None
            )
        }


# ============================================================================
# TAPE / AD EXCEPTIONS
# ============================================================================

class TapeException(MpmEngineException):
    """Базовое исключение для ошибок ленты AD."""

    def __init__(
            self,
            message: str,
            error_code: ErrorCode = ErrorCode.TAPE_ERROR,
            original_exception: Optional[Exception] = None,
            context: Optional[dict] = None
    ):
        super().__init__(message, error_code, original_exception, context)


class UnsupportedOperationError(TapeException):
    """Операция не входит в поддерживаемый набор элементарных операций."""

    def __init__(self, op_name: str, context: Optional[dict] = None):
        message = f"Unsupported operation on tape: {op_name}"
        context = context or {}
        context['op_name'] = op_name
        super().__init__(message, ErrorCode.TAPE_UNSUPPORTED_OPERATION, context=context)
        self.op_name = op_name


class DomainError(TapeException):
    """Аргумент вне области определения (ln x при x <= 0, sqrt x при x < 0)."""

    def __init__(
            self,
            op_name: str,
            node: Optional[int],
            value: float,
            element: Optional[int] = None,
            context: Optional[dict] = None
    ):
        message = f"Domain error in {op_name}: argument {value!r} at node {node}"
        context = context or {}
        context.update({
            'op_name': op_name,
            'node': node,
            'element': element,
            'value': float(value)
        })
        super().__init__(message, ErrorCode.TAPE_DOMAIN_ERROR, context=context)
        self.op_name = op_name
        self.node = node


class SeedDimensionError(TapeException):
    """Размерность вектора затравки не совпадает с числом выходов ленты."""

    def __init__(self, expected: int, actual: int, context: Optional[dict] = None):
        message = f"Seed dimension mismatch: expected {expected}, got {actual}"
        context = context or {}
        context.update({'expected': expected, 'actual': actual})
        super().__init__(message, ErrorCode.TAPE_SEED_DIMENSION_MISMATCH, context=context)


class TapeCapacityError(TapeException):
    """Лента превысила допустимое число узлов."""

    def __init__(self, size: int, limit: int):
        super().__init__(
            f"Tape size {size} exceeds configured limit {limit}",
            ErrorCode.TAPE_CAPACITY_EXCEEDED,
            context={'size': size, 'limit': limit}
        )


# ============================================================================
# SHAPE FUNCTION EXCEPTIONS
# ============================================================================

class ShapeFunctionError(MpmEngineException):
    """Базовое исключение для функций формы."""

    def __init__(
            self,
            message: str,
            error_code: ErrorCode = ErrorCode.SHAPE_FUNCTION_ERROR,
            original_exception: Optional[Exception] = None,
            context: Optional[dict] = None
    ):
        super().__init__(message, error_code, original_exception, context)


class ParticleDomainOverflowError(ShapeFunctionError):
    """Полуширина домена частицы достигла h/2."""

    def __init__(
            self,
            particle_id: Optional[int],
            axis: int,
            lp: float,
            h: float,
            context: Optional[dict] = None
    ):
        message = (
            f"Particle {particle_id} half-width lp={lp:.6g} reached h/2={h / 2:.6g} on axis {axis}; "
            f"use finer particles or cap lp"
        )
        context = context or {}
        context.update({'particle_id': particle_id, 'axis': axis, 'lp': float(lp), 'h': float(h)})
        super().__init__(message, ErrorCode.PARTICLE_DOMAIN_OVERFLOW, context=context)


class UnregisteredKindError(ShapeFunctionError):
    """Неизвестный или нереализованный тип функции формы."""

    def __init__(self, kind: str, context: Optional[dict] = None):
        context = context or {}
        context['kind'] = kind
        super().__init__(
            f"Shape function kind not available: {kind}",
            ErrorCode.UNREGISTERED_SHAPE_KIND,
            context=context
        )


# ============================================================================
# CONSTITUTIVE EXCEPTIONS
# ============================================================================

class ConstitutiveException(MpmEngineException):
    """Базовое исключение для определяющих соотношений."""

    def __init__(
            self,
            message: str,
            error_code: ErrorCode = ErrorCode.CONSTITUTIVE_ERROR,
            original_exception: Optional[Exception] = None,
            context: Optional[dict] = None
    ):
        super().__init__(message, error_code, original_exception, context)


class InvalidKinematicsError(ConstitutiveException):
    """det F <= 0 на входе в модель."""

    def __init__(self, det_f: float, particle_id: Optional[int] = None, context: Optional[dict] = None):
        context = context or {}
        context.update({'det_f': float(det_f), 'particle_id': particle_id})
        super().__init__(
            f"Non-positive det F = {det_f:.6g} (particle {particle_id})",
            ErrorCode.INVALID_KINEMATICS,
            context=context
        )
        self.particle_id = particle_id


class ReturnMapNonconvergenceError(ConstitutiveException):
    """Локальный Ньютон возврата на поверхность текучести не сошёлся."""

    def __init__(self, iterations: int, residual: float, diagnostics: Optional[dict] = None):
        context = {'iterations': iterations, 'residual': float(residual)}
        context.update(diagnostics or {})
        super().__init__(
            f"Return mapping did not converge after {iterations} iterations (residual {residual:.3e})",
            ErrorCode.RETURN_MAP_NONCONVERGENCE,
            context=context
        )


# ============================================================================
# SOLVER EXCEPTIONS
# ============================================================================

class SolverException(MpmEngineException):
    """Базовое исключение для ошибок решателя."""

    def __init__(
            self,
            message: str,
            error_code: ErrorCode = ErrorCode.SOLVER_ERROR,
            original_exception: Optional[Exception] = None,
            context: Optional[dict] = None
    ):
        super().__init__(message, error_code, original_exception, context)


class NewtonNonconvergenceError(SolverException):
    """Ньютон не достиг допуска за максимальное число итераций."""

    def __init__(self, step: Any, residual_history: Sequence[float], context: Optional[dict] = None):
        history: List[float] = [float(r) for r in residual_history]
        context = context or {}
        context.update({'step': step, 'residual_history': history})
        last = history[-1] if history else float('nan')
        super().__init__(
            f"Newton did not converge at step {step} after {max(len(history) - 1, 0)} iterations "
            f"(last relative residual {last:.3e})",
            ErrorCode.NEWTON_NONCONVERGENCE,
            context=context
        )
        self.residual_history = history


class LinearSolverError(SolverException):
    """Вырожденная факторизация."""

    def __init__(
            self,
            message: str = "Singular factorization",
            pivot: Optional[int] = None,
            original_exception: Optional[Exception] = None,
            context: Optional[dict] = None
    ):
        context = context or {}
        context['pivot'] = pivot
        super().__init__(
            f"{message} (pivot {pivot})" if pivot is not None else message,
            ErrorCode.LINEAR_SOLVER_SINGULAR,
            original_exception,
            context
        )
        self.pivot = pivot


class OutOfDomainError(SolverException):
    """Носитель частицы вышел за пределы сетки."""

    def __init__(self, particle_id: int, context: Optional[dict] = None):
        context = context or {}
        context['particle_id'] = int(particle_id)
        super().__init__(
            f"Particle {particle_id} support leaves the grid",
            ErrorCode.OUT_OF_DOMAIN,
            context=context
        )
        self.particle_id = int(particle_id)


class InvertedElementError(SolverException):
    """det(I + grad du) <= 0 при переносе на частицы."""

    def __init__(self, particle_id: int, det: float, context: Optional[dict] = None):
        context = context or {}
        context.update({'particle_id': int(particle_id), 'det': float(det)})
        super().__init__(
            f"Inverted particle {particle_id}: det(I + grad du) = {det:.6g}",
            ErrorCode.INVERTED_ELEMENT,
            context=context
        )
        self.particle_id = int(particle_id)


# ============================================================================
# JACOBIAN EXCEPTIONS
# ============================================================================

class JacobianException(MpmEngineException):
    """Базовое исключение для сборки якобиана."""

    def __init__(
            self,
            message: str,
            error_code: ErrorCode = ErrorCode.JACOBIAN_ERROR,
            original_exception: Optional[Exception] = None,
            context: Optional[dict] = None
    ):
        super().__init__(message, error_code, original_exception, context)


class SeedingFaultError(JacobianException):
    """Интерференция строк при блочной затравке."""

    def __init__(
            self,
            seeded_node: Any,
            offending_node: Any,
            magnitude: float,
            context: Optional[dict] = None
    ):
        context = context or {}
        context.update({
            'seeded_node': seeded_node,
            'offending_node': offending_node,
            'magnitude': float(magnitude)
        })
        super().__init__(
            f"Seeding interference between block node {seeded_node} and node {offending_node} "
            f"(|adjoint| = {magnitude:.3e})",
            ErrorCode.SEEDING_FAULT,
            context=context
        )


# ============================================================================
# INVERSE ANALYSIS EXCEPTIONS
# ============================================================================

class InverseException(MpmEngineException):
    """Базовое исключение для обратного анализа."""

    def __init__(
            self,
            message: str,
            error_code: ErrorCode = ErrorCode.INVERSE_ERROR,
            original_exception: Optional[Exception] = None,
            context: Optional[dict] = None
    ):
        super().__init__(message, error_code, original_exception, context)


class AdjointSolveError(InverseException):
    """Вырожденная транспонированная система на шаге сопряжённого прохода."""

    def __init__(self, step: int, original_exception: Optional[Exception] = None):
        super().__init__(
            f"Adjoint solve failed at step {step}",
            ErrorCode.ADJOINT_SOLVE_ERROR,
            original_exception,
            context={'step': step}
        )


class OptimizationDivergenceError(InverseException):
    """Градиентный спуск разошёлся."""

    def __init__(self, loss: float, initial_loss: float, lr: float):
        super().__init__(
            f"Gradient descent diverged: loss {loss:.3e} vs initial {initial_loss:.3e}; reduce lr (now {lr})",
            ErrorCode.OPTIMIZATION_DIVERGENCE,
            context={'loss': float(loss), 'initial_loss': float(initial_loss), 'lr': float(lr)}
        )


# ============================================================================
# CONFIGURATION EXCEPTIONS
# ============================================================================

class ConfigurationError(MpmEngineException):
    """Ошибка конфигурации сценария или параметров."""

    def __init__(
            self,
            message: str,
            key: Optional[str] = None,
            context: Optional[dict] = None
    ):
        context = context or {}
        if key is not None:
            context['key'] = key
        super().__init__(message, ErrorCode.CONFIGURATION_ERROR, context=context)
        self.key = key


# ============================================================================
# ERROR HANDLING DECORATORS
# ============================================================================

def handle_solver_errors(func: Callable) -> Callable:
    """
    Декоратор для линейных решателей.
    Конвертирует ошибки numpy/SciPy в LinearSolverError.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except MpmEngineException:
            raise
        except Exception as e:
            logger = logging.getLogger(func.__module__)

            import numpy as np

            if isinstance(e, (np.linalg.LinAlgError, RuntimeError, ValueError)):
                logger.error(f"Linear solver error in {func.__name__}: {e}")
                raise LinearSolverError(
                    message=str(e),
                    original_exception=e,
                    context={'function': func.__name__}
                )
            raise

    return wrapper


# ============================================================================
# ERROR LOGGER
# ============================================================================

class ErrorLogger:
    """Централизованный логгер ошибок."""

    def __init__(self, logger_name: str = __name__):
        self.logger = logging.getLogger(logger_name)

    def log_exception(
            self,
            exception: Exception,
            context: Optional[dict] = None,
            log_level: int = logging.ERROR
    ):
        """
        Логирование исключения с контекстом.

        Args:
            exception: Исключение для логирования
            context: Дополнительный контекст
            log_level: Уровень логирования
        """
        if isinstance(exception, MpmEngineException):
            message = str(exception)
            if context:
                message += f" | Additional context: {context}"

            self.logger.log(
                log_level,
                message,
                extra={
                    'error_code': exception.error_code.name,
                    'error_code_value': exception.error_code.value,
                    'error_context': {**exception.context, **(context or {})}
                }
            )
        else:
            message = f"Unexpected error: {type(exception).__name__}: {exception}"
            if context:
                message += f" | Context: {context}"

            self.logger.log(log_level, message, exc_info=True)


# ============================================================================
# EXPORTS
# ============================================================================

__all__ = [
    # Error codes
    'ErrorCode',

    # Base exceptions
    'MpmEngineException',

    # Tape exceptions
    'TapeException',
    'UnsupportedOperationError',
    'DomainError',
    'SeedDimensionError',
    'TapeCapacityError',

    # Shape function exceptions
    'ShapeFunctionError',
    'ParticleDomainOverflowError',
    'UnregisteredKindError',

    # Constitutive exceptions
    'ConstitutiveException',
    'InvalidKinematicsError',
    'ReturnMapNonconvergenceError',

    # Solver exceptions
    'SolverException',
    'NewtonNonconvergenceError',
    'LinearSolverError',
    'OutOfDomainError',
    'InvertedElementError',

    # Jacobian exceptions
    'JacobianException',
    'SeedingFaultError',

    # Inverse exceptions
    'InverseException',
    'AdjointSolveError',
    'OptimizationDivergenceError',

    # Configuration
    'ConfigurationError',

    # Decorators
    'handle_solver_errors',

    # Utilities
    'ErrorLogger',
]
