import logging
import sys
from collections.abc import Callable

import commons

from fewtreat import constants

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INVARIANT_VIOLATION = 2


class FewTreatError(Exception):
    """Something about the inputs means we cannot continue.

    These are actionable by whoever supplied the inputs.
    """


class PanelValidationError(FewTreatError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("Invalid panel: " + "; ".join(violations))


class SchemeError(FewTreatError):
    """An aggregation scheme could not be built or does not fit the panel"""


class HeteroModelError(FewTreatError):
    """The heteroskedasticity model cannot be fitted or evaluated"""


class ResampleError(FewTreatError):
    pass


class ConfidenceError(FewTreatError):
    pass


class UsageError(FewTreatError):
    """Bad flags, config files or flag combinations"""


class SimulationError(FewTreatError):
    """A failure inside one Monte Carlo replication"""

    def __init__(self, replication: int, cause: Exception):
        self.replication = replication
        self.cause = cause
        super().__init__(f"Replication {replication} failed: {cause}")


class InvariantViolation(Exception):
    """An internal guarantee was broken, this is a bug rather than bad input"""


def handle_user_error(exc: FewTreatError) -> int:
    logger.warning(
        str(exc),
        extra={"error_type": type(exc).__name__},
    )
    print(f"error: {exc}", file=sys.stderr)
    if constants.DEBUG:
        print(commons.exception_as_string(exc), file=sys.stderr)

    return EXIT_USER_ERROR


def handle_invariant_violation(exc: InvariantViolation) -> int:
    logger.error(
        "Internal invariant violation",
        extra={"traceback": commons.exception_as_string(exc)},
    )
    print(f"internal error: {exc}", file=sys.stderr)
    return EXIT_INVARIANT_VIOLATION


EXCEPTION_HANDLERS: dict[type[Exception], Callable[..., int]] = {
    FewTreatError: handle_user_error,
    InvariantViolation: handle_invariant_violation,
}


def handle_exception(exc: Exception) -> int:
    """Dispatch to the handler of the closest registered base class.

    Anything unregistered is re-raised.
    """
    for exc_type in type(exc).__mro__:
        if exc_type in EXCEPTION_HANDLERS:
            return EXCEPTION_HANDLERS[exc_type](exc)

    raise exc
