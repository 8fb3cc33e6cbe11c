"""Exception types shared across the package.

The CLI maps these onto its exit codes: input and contract problems exit
with 2, numerical failures with 3.
"""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class InputError(ValueError):
    """User-supplied data or configuration is malformed."""


class NumericalError(RuntimeError):
    """A computation broke down (singular system, degenerate density, ...)."""
