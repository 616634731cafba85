"""Exception hierarchy shared across the package."""


class VfldpError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VfldpError, ValueError):
    """Invalid configuration or parameter value."""


class ShapeError(VfldpError, ValueError):
    """Input rejected because of a dimension or shape mismatch."""


class DomainError(VfldpError, ValueError):
    """Numeric input outside the domain of an operation."""


class IngestionError(VfldpError):
    """A dataset file could not be read or failed schema validation."""


class ProtocolFault(VfldpError):
    """A party violated the training protocol; the run must abort."""

    def __init__(self, message, round=None, party=None):
        where = []
        if round is not None:
            where.append(f"round={round}")
        if party is not None:
            where.append(f"party={party}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.round = round
        self.party = party


class BudgetExhausted(VfldpError):
    """The privacy accountant refused a spend that would exceed the budget."""

    def __init__(self, spent_epsilon, budget_epsilon, step_count):
        super().__init__(
            f"privacy budget exhausted: spending would reach epsilon={spent_epsilon:.6g} "
            f"> budget {budget_epsilon:.6g} after {step_count} steps"
        )
        self.spent_epsilon = spent_epsilon
        self.budget_epsilon = budget_epsilon
        self.step_count = step_count
