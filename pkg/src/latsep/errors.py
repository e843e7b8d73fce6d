"""Exception types shared across the toolkit."""


class LatsepError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(LatsepError, ValueError):
    """Operand shapes are inconsistent; the message names the operand."""


class InputError(LatsepError, ValueError):
    """An input value violates an operation's precondition."""


class FormatError(LatsepError, ValueError):
    """A file is malformed; the message names the offending chunk or field."""


class ConditionError(LatsepError, ValueError):
    """An unknown or out-of-range condition identifier."""


class ConfigError(LatsepError, ValueError):
    """A configuration violates its invariants."""


class CheckpointError(LatsepError, ValueError):
    """A checkpoint file failed validation; the message names the first bad entry."""


class GradCheckError(LatsepError, RuntimeError):
    """A gradient check produced non-finite values."""


class TrainingDiverged(LatsepError, RuntimeError):
    """Training aborted on a non-finite loss; the last good checkpoint is retained."""
