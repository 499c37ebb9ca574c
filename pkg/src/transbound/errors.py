"""Exception hierarchy shared across the library and the CLI."""


class TransboundError(Exception):
    """Base class for all library errors."""


class InputError(TransboundError):
    """Malformed user input: unknown nodes, bad files, invalid config."""


class InfeasibleError(TransboundError):
    """No parameter setting satisfies the stated constraints at tolerance."""


class BudgetError(TransboundError):
    """An exact computation would exceed a configured resource budget."""
