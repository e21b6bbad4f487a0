"""Exception types shared across the package."""


class ProtoPoseError(Exception):
    """Base class for package errors."""


class InvalidSpec(ProtoPoseError, ValueError):
    """A skeleton spec, bank shape, or operation argument violates its contract."""


class DuplicateSkeleton(ProtoPoseError, ValueError):
    """A skeleton name was registered twice."""


class ShapeError(ProtoPoseError, ValueError):
    """An array argument has the wrong shape."""


class NumericalError(ProtoPoseError, ArithmeticError):
    """A non-finite value appeared where the math requires finite input."""


class MissingLabel(ProtoPoseError, ValueError):
    """A supervised loss was asked for without ground truth."""


class ConfigError(ProtoPoseError, ValueError):
    """An experiment or training config failed validation."""


class CheckpointError(ProtoPoseError, RuntimeError):
    """A checkpoint or bank file is corrupt or inconsistent."""


class UndefinedMetric(ProtoPoseError, ValueError):
    """A metric has no defined value for this input (e.g. no visible joints)."""
