"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ContractError -> 2, NumericError -> 3,
LedgerBudgetExceeded -> 4.
"""


class IpselError(Exception):
    """Base class for all package errors."""


class ContractError(IpselError):
    """A caller violated a documented precondition (bad shapes, bad config)."""


class ModeError(ContractError):
    """An operation was invoked in the wrong gradient/training mode."""


class NumericError(IpselError):
    """A non-finite value was produced where finite values are required."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class GenerationError(ContractError):
    """Synthetic data generation could not satisfy its constraints."""


class LedgerBudgetExceeded(IpselError):
    """A tracked allocation pushed the memory ledger past its byte budget."""

    def __init__(self, message, peak_bytes=None):
        super().__init__(message)
        self.peak_bytes = peak_bytes
