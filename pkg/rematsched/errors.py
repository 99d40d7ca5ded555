"""
Exception hierarchy of the rematsched package.

Every error raised deliberately by the package derives from
:class:`RematError`; the command-line front end maps the subclasses onto exit
codes.

.. autoclass:: rematsched.errors.RematError
.. autoclass:: rematsched.errors.Violation
.. autoclass:: rematsched.errors.ValidationError
.. autoclass:: rematsched.errors.SimulationError

"""

import dataclasses
from typing import Optional, Sequence

__all__ = (
    "RematError",
    "InputError",
    "ParseError",
    "Violation",
    "ValidationError",
    "DisconnectedInput",
    "IoError",
    "ModelTooLarge",
    "InfeasibleBlock",
    "SolutionInfeasible",
    "SearchExploded",
    "InfeasibleBudget",
    "SimulationError",
    "DanglingDependency",
    "ForgetAbsent",
    "DoubleLoss",
    "UnknownTarget",
    "IncompleteSchedule",
    "BudgetExceeded",
)


class RematError(Exception):
    """Base class of all errors raised by rematsched."""


class InputError(RematError):
    """An input file or in-memory structure is unusable."""


class ParseError(InputError):
    """
    A document could not be decoded.

    :param message: What went wrong.
    :param locus:
        Where it went wrong, either ``line N column M`` for syntax errors or
        a field path such as ``blocks[0].cnodes[2].time_us``.
    """

    def __init__(self, message: str, locus: Optional[str] = None) -> None:
        self.message = message
        self.locus = locus
        super().__init__(f"{locus}: {message}" if locus else message)


@dataclasses.dataclass(frozen=True)
class Violation:
    """A single broken invariant, reported as data."""

    #: Short name of the rule, e.g. ``loss-time``.
    rule: str
    #: The node, edge or block the rule fails on.
    subject: str
    #: Human readable description.
    detail: str

    def __str__(self) -> str:
        return f"[{self.rule}] {self.subject}: {self.detail}"


class ValidationError(InputError):
    """A decoded structure breaks one or more invariants."""

    def __init__(self, violations: Sequence[Violation]) -> None:
        self.violations = tuple(violations)
        super().__init__(
            "; ".join(str(violation) for violation in self.violations)
        )


class DisconnectedInput(InputError):
    """The forward graph is not weakly connected."""


class IoError(RematError):
    """A file could not be read or written."""


class ModelTooLarge(RematError):
    """An ILP model would exceed the configured variable cap."""


class InfeasibleBlock(RematError):
    """A block has no schedule at all (degenerate graph)."""


class SolutionInfeasible(RematError):
    """A solver assignment fails the constraint re-check."""


class SearchExploded(RematError):
    """The exhaustive oracle exceeded its state cap."""


class InfeasibleBudget(RematError):
    """
    No chain schedule fits the requested memory budget.

    :param budget: The requested budget in bytes.
    :param min_feasible:
        The smallest budget found to be feasible, if it was searched for.
    :param timed_out:
        Number of block budget pairs whose solve timed out, leaving the
        options incomplete.
    """

    def __init__(
        self,
        budget: int,
        min_feasible: Optional[int] = None,
        timed_out: int = 0,
    ):
        self.budget = budget
        self.min_feasible = min_feasible
        self.timed_out = timed_out
        msg = f"no schedule fits within {budget} bytes"
        if min_feasible is not None:
            msg += f" (minimum feasible budget: {min_feasible} bytes)"
        if timed_out:
            msg += f"; {timed_out} block solves timed out"
        super().__init__(msg)


class SimulationError(RematError):
    """
    Replay of a schedule failed.

    :param message: Description of the failure.
    :param op_index: Index of the offending op in the expanded schedule.
    """

    def __init__(self, message: str, op_index: Optional[int] = None):
        self.op_index = op_index
        super().__init__(
            message if op_index is None else f"op {op_index}: {message}"
        )


class DanglingDependency(SimulationError):
    """A compute ran while one of its dependencies was not available."""


class ForgetAbsent(SimulationError):
    """A forget targeted data that was not resident."""


class DoubleLoss(SimulationError):
    """The loss was computed more than once."""


class UnknownTarget(SimulationError):
    """An op referenced a block, node or option that does not exist."""


class IncompleteSchedule(SimulationError):
    """Replay finished without every backward and the loss running once."""


class BudgetExceeded(SimulationError):
    """
    The simulated peak went above the budget.

    :param peak: The peak reached in bytes.
    :param budget: The budget in bytes.
    """

    def __init__(self, peak: int, budget: int, op_index: Optional[int]):
        self.peak = peak
        self.budget = budget
        super().__init__(
            f"peak {peak} exceeds budget {budget} by {peak - budget} bytes",
            op_index,
        )
