"""Exception hierarchy shared across the package."""


class TCDError(Exception):
    """Base class for all package errors."""


class ShapeError(TCDError, ValueError):
    pass


class NumericError(TCDError, ArithmeticError):
    pass


class ContractError(TCDError, RuntimeError):
    pass


class EmptyMaskError(TCDError, ValueError):
    pass


class VocabError(TCDError, ValueError):
    pass


class ConfigError(TCDError, ValueError):
    pass


class CompatibilityError(TCDError, ValueError):
    """Two models (or a model and a checkpoint) disagree on geometry."""


class CorruptCheckpointError(TCDError, IOError):
    pass
