"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: contract violations exit 1,
I/O failures exit 2 (plain OSError), configuration problems exit 3.
"""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, range, pairing)."""


class InvalidInputError(ContractViolation):
    """Input data is malformed beyond shape, e.g. non-finite values."""


class ConfigurationError(ValueError):
    """A spec/config/checkpoint describes something the library cannot build."""


class NonFiniteLossError(RuntimeError):
    """Training hit a non-finite loss; the last checkpoint was retained."""

    def __init__(self, message: str, checkpoint_dir: str | None = None):
        super().__init__(message)
        self.checkpoint_dir = checkpoint_dir
