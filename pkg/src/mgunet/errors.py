"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI: configuration/dimension errors -> 2,
data errors -> 3, numerical/determinism failures -> 4.
"""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with an operation's contract."""


class ConfigError(ValueError):
    """A configuration object violates its invariants."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class DataError(ValueError):
    """A dataset file or label map is invalid; the message names the file."""


class DeterminismError(RuntimeError):
    """Two forward passes of a supposedly deterministic fragment disagreed."""


class NumericalError(RuntimeError):
    """A non-finite value appeared; the message names the producing op."""
