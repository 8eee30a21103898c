"""Exception hierarchy shared across the toolkit.

Contract violations (bad inputs, mismatched headers, out-of-range
arguments) raise :class:`ContractError`; unreadable or malformed files
raise :class:`FormatError`. Plain ``OSError`` is left alone so callers
can distinguish IO failures from everything else.
"""


class AbilityTransferError(Exception):
    """Base class for all toolkit errors."""


class FormatError(AbilityTransferError):
    """A file is malformed: bad magic, corrupt header, truncated payload."""


class ContractError(AbilityTransferError):
    """An operation precondition was violated by otherwise well-formed inputs."""
