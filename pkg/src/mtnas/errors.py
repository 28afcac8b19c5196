"""Exception hierarchy shared across the package."""


class MTNASError(Exception):
    pass


class ShapeError(MTNASError, ValueError):
    pass


class NumericsError(MTNASError, FloatingPointError):
    pass


class StateError(MTNASError, RuntimeError):
    pass


class ArgumentError(MTNASError, ValueError):
    pass


class ConfigError(MTNASError, ValueError):
    pass


class PersistenceError(MTNASError, IOError):
    pass


class MetricError(MTNASError, ValueError):
    pass


class ConstraintError(MTNASError, ValueError):
    pass
