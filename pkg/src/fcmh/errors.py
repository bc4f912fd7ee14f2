"""Exception classes shared across the package, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad configuration file or flag combination (exit code 2)."""

    exit_code = 2


class FormatError(Exception):
    """Malformed serialized data: bad magic, truncation, length overflow (exit code 4)."""

    exit_code = 4

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(Exception):
    """A precondition or invariant was violated by the caller (exit code 5)."""

    exit_code = 5


class StateError(ContractError):
    """Operation attempted on untrained or uninitialized parameters."""


class DecodeError(FormatError):
    """Entropy-coded payload is corrupt or inconsistent."""
