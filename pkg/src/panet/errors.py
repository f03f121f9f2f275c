"""Exception types shared across modules, mapped to CLI exit codes."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DtypeError(TypeError):
    """Tensors of different precisions met in one graph."""


class UsageError(Exception):
    """Bad command-line arguments or configuration keys (exit code 1)."""


class DataError(Exception):
    """Invalid dataset, manifest, or file contents (exit code 2)."""


class NumericError(Exception):
    """Non-finite values or failed gradient checks (exit code 3)."""
