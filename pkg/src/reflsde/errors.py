"""Exception hierarchy shared by all modules."""


class ReflectsdeError(Exception):
    """Base class for package errors."""


class DomainError(ReflectsdeError, ValueError):
    pass


class OutsideTube(ReflectsdeError, ValueError):
    pass


class NonConvergence(ReflectsdeError, RuntimeError):
    pass


class QuadratureFailure(ReflectsdeError, RuntimeError):
    pass


class NoAdmissibleT(ReflectsdeError, RuntimeError):
    pass


class InfeasibleAngle(ReflectsdeError, RuntimeError):
    pass


class InvalidRange(ReflectsdeError, ValueError):
    pass


class CoverFailure(ReflectsdeError, RuntimeError):
    pass


class LedgerViolation(ReflectsdeError, RuntimeError):
    """A ledger constant failed the property it is supposed to certify."""


class ConfigError(ReflectsdeError, ValueError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class MissingConstant(ReflectsdeError, KeyError):
    """A required ledger constant is absent and could not be computed."""


class PropertyViolation(ReflectsdeError, RuntimeError):
    """A sampled point broke a property a construction must satisfy."""

    def __init__(self, message, point=None):
        self.point = point
        super().__init__(message if point is None else f"{message} at {point}")


class StepTooLarge(ReflectsdeError, ValueError):
    pass


class HypothesisViolated(ReflectsdeError, ValueError):
    pass
