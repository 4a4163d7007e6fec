"""Exception types raised across the package."""


class FlowKacError(Exception):
    """Base class for all package errors."""


class UnknownModel(FlowKacError, KeyError):
    pass


class MissingParam(FlowKacError, KeyError):
    pass


class UnknownParam(FlowKacError, KeyError):
    pass


class LengthMismatch(FlowKacError, ValueError):
    pass


class NonFinitePath(FlowKacError, FloatingPointError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at integration step {step}")


class NonFiniteTarget(FlowKacError, FloatingPointError):
    pass


class MissingDerivative(FlowKacError, ValueError):
    pass


class HessianBudgetExceeded(FlowKacError, MemoryError):
    pass


class NonFiniteActivation(FlowKacError, FloatingPointError):
    pass


class NonFiniteGradient(FlowKacError, FloatingPointError):
    pass


class InversionOutOfRange(FlowKacError, ValueError):
    pass


class TrainingDiverged(FlowKacError, RuntimeError):
    pass


class DomainError(FlowKacError, ValueError):
    pass


class SingularCovariance(FlowKacError, ValueError):
    pass


class ZeroPivot(FlowKacError, ZeroDivisionError):
    pass


class UnstableScheme(FlowKacError, RuntimeError):
    pass


class DegenerateReference(FlowKacError, ValueError):
    pass


class ManifestMismatch(FlowKacError, ValueError):
    pass


class ConfigError(FlowKacError, ValueError):
    pass
