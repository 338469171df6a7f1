"""Exception hierarchy for the harness.

Every error callers are expected to branch on gets its own class; transport
failures during a dialogue are deliberately NOT here (they are statuses on
AutTurnResult, not exceptions).
"""

from __future__ import annotations


class AtaError(Exception):
    """Base class for all harness errors."""

    exit_code = 1


class ConfigError(AtaError):
    """Invalid run, backend, or registration configuration."""

    exit_code = 2


class UnknownRunError(AtaError):
    """Run id not present in the store."""


class VersionConflictError(AtaError):
    """Optimistic commit lost the race; re-read and retry."""

    def __init__(self, run_id: str, expected: int, actual: int):
        super().__init__(
            f"run {run_id}: commit based on version {expected}, current is {actual}"
        )
        self.expected = expected
        self.actual = actual


class PhaseViolationError(AtaError):
    """Attempted a backward or otherwise forbidden phase transition."""


class IntegrityError(AtaError):
    """A state mutation would break a structural invariant of the run
    document, e.g. a scenario pointing at a weakness that does not exist
    or a scenario list being reordered."""


class DomainError(AtaError):
    """Numeric input outside the 1..10 difficulty/score domain."""


class EmptyHistoryError(AtaError):
    """Posterior requested over an empty difficulty history."""


class InsufficientHistoryError(AtaError):
    """Convergence check needs at least two scored entries."""


class BackendUnreachableError(AtaError):
    """Chat backend could not be reached within the retry budget."""


class CallTimeoutError(AtaError):
    """A single chat call exceeded the role's timeout budget."""


class SchemaViolationExhaustedError(AtaError):
    """Backend never produced schema-valid output within the retry budget.

    Carries every raw reply so the failure is diagnosable from the event log.
    """

    def __init__(self, role: str, raw_replies: list[str]):
        super().__init__(
            f"role {role}: {len(raw_replies)} replies, none matched the schema"
        )
        self.role = role
        self.raw_replies = raw_replies


class AutUnreachableError(AtaError):
    """AUT session could not be opened."""

    exit_code = 2


class UnknownAutError(ConfigError):
    """aut_id not present in the registry."""


class InvalidRubricError(AtaError):
    """Provided rubric failed structural validation."""


class AllRejectedError(AtaError):
    """Designer rejected every proposed weakness; nothing to test."""

    exit_code = 3


class ChannelClosedError(AtaError):
    """Interview or approval channel closed before the pipeline finished."""


class AlreadyJudgedError(AtaError):
    """Scenario already carries a judge result; results are immutable."""


class NoScoredScenariosError(AtaError):
    """Every dialogue ended in early failure; no scores to aggregate."""

    exit_code = 4


class ReportMissingError(AtaError):
    """Q&A requested before a report exists."""
