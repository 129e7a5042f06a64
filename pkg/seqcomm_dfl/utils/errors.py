"""
Exception hierarchy shared by every SeqComm-DFL module.
"""


class SeqCommError(Exception):
    """Base class for all engine errors."""


class UsageError(SeqCommError, ValueError):
    """A caller passed arguments that violate an operation's preconditions."""


class NumericalError(SeqCommError, ArithmeticError):
    """A value became NaN/Inf or a numerical routine broke down."""


class IllConditionedError(NumericalError):
    """Conjugate gradient stopped making progress on the damped system."""


class CapabilityError(SeqCommError):
    """The request is well-formed but exceeds what the engine enumerates."""


class ConfigError(UsageError):
    """Configuration could not be validated."""
