"""Exception hierarchy. Every domain failure derives from EvsslError (CLI exit code 1)."""


class EvsslError(Exception):
    pass


# event_core
class BadMagic(EvsslError):
    pass


class Truncated(EvsslError):
    pass


class InvariantViolation(EvsslError):
    pass


class MixedLabelPresence(EvsslError):
    pass


class MalformedLine(EvsslError):
    pass


class MissingFile(EvsslError):
    pass


# augment / viewgen
class DegenerateBox(EvsslError):
    pass


class NonDivisibleGeometry(EvsslError):
    pass


class InsufficientSupport(EvsslError):
    pass


# gradcore
class ShapeMismatch(EvsslError):
    pass


class DomainError(EvsslError):
    pass


class NonScalarRoot(EvsslError):
    pass


# model / trainer
class GeometryMismatch(EvsslError):
    pass


class TeacherDimMismatch(EvsslError):
    pass


class NotUnitNorm(EvsslError):
    pass


class NonFiniteLoss(EvsslError):
    pass


class ConfigError(EvsslError):
    pass


# evalkit
class UnlabeledData(EvsslError):
    pass


class DegenerateRow(EvsslError):
    pass
