"""
Error types for the reliability calculus.

Every error carries a stable error_code and a human readable detail so the
CLI JSON output and the HTTP service can share one error body:

    {"error_code": "PRECONDITION_FAILED", "detail": "..."}
"""

from typing import Any, Optional


class ReliabilityError(Exception):
    """Base class for all user-facing errors raised by the engine."""

    error_code = "ERROR"

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context = context

    def to_dict(self) -> dict:
        """Serialize to the standard error body."""
        body = {"error_code": self.error_code, "detail": self.detail}
        if self.context:
            body["context"] = {k: str(v) for k, v in sorted(self.context.items())}
        return body


# ============================================================================
# Term and evaluation errors
# ============================================================================

class IndependenceViolation(ReliabilityError):
    """A parallel block has updates that read or write each other's targets."""
    error_code = "INDEPENDENCE_VIOLATION"

    def __init__(self, variable: str, detail: Optional[str] = None):
        super().__init__(
            detail or f"Parallel block is not independent on variable '{variable}'",
            variable=variable,
        )
        self.variable = variable


class EvaluationError(ReliabilityError):
    error_code = "EVALUATION_ERROR"


class UndefinedSymbol(ReliabilityError):
    """A function symbol has no registered definition."""
    error_code = "UNDEFINED_SYMBOL"

    def __init__(self, symbol: str):
        super().__init__(f"Function symbol '{symbol}' has no definition", symbol=symbol)
        self.symbol = symbol


class UnknownVariable(ReliabilityError):
    error_code = "UNKNOWN_VARIABLE"

    def __init__(self, variable: str):
        super().__init__(f"Variable '{variable}' is not bound", variable=variable)
        self.variable = variable


class ContinuousDistributionPresent(ReliabilityError):
    """Exact enumeration reached a distribution without finite support."""
    error_code = "CONTINUOUS_DISTRIBUTION_PRESENT"

    def __init__(self, variable: str):
        super().__init__(
            f"Update of '{variable}' uses a continuous distribution; "
            "exact evaluation needs finite support (use simulate instead)",
            variable=variable,
        )
        self.variable = variable


class SizeLimitExceeded(ReliabilityError):
    error_code = "SIZE_LIMIT_EXCEEDED"

    def __init__(self, size: int, limit: int):
        super().__init__(
            f"Enumeration reached {size} valuations, above the limit of {limit}",
            size=size, limit=limit,
        )


class ImproperDistribution(ReliabilityError):
    """Sampling needs total mass 1; the table deviates from it."""
    error_code = "IMPROPER_DISTRIBUTION"


class InvalidVariance(ReliabilityError):
    error_code = "INVALID_VARIANCE"

    def __init__(self, variance: Any):
        super().__init__(f"Variance must be > 0, got {variance}", variance=variance)


class BadGrid(ReliabilityError):
    error_code = "BAD_GRID"


# ============================================================================
# Rule engine errors
# ============================================================================

class PreconditionFailed(ReliabilityError):
    """A rule's side condition does not hold on the addressed sub-term."""
    error_code = "PRECONDITION_FAILED"

    def __init__(self, rule: str, reason: str):
        super().__init__(f"{rule}: {reason}", rule=rule)
        self.rule = rule
        self.reason = reason


class EventShapeMismatch(ReliabilityError):
    error_code = "EVENT_SHAPE_MISMATCH"


class EnvelopeNotCertified(ReliabilityError):
    error_code = "ENVELOPE_NOT_CERTIFIED"


class ObligationFalse(ReliabilityError):
    """The numeric obligation evaluated to false: bound not established, not refuted."""
    error_code = "OBLIGATION_FALSE"

    def __init__(self, detail: str, obligation: Any = None):
        super().__init__(detail)
        self.obligation = obligation


class UnknownRule(ReliabilityError):
    error_code = "UNKNOWN_RULE"

    def __init__(self, rule: str):
        super().__init__(f"No rule registered under '{rule}'", rule=rule)


class BadPath(ReliabilityError):
    error_code = "BAD_PATH"


class ScriptError(ReliabilityError):
    """A script step failed; carries the step index and the partial state."""
    error_code = "SCRIPT_ERROR"

    def __init__(self, step: int, cause: ReliabilityError, state: Any):
        super().__init__(f"Step {step}: {cause.detail}", step=step)
        self.step = step
        self.cause = cause
        self.state = state

    def to_dict(self) -> dict:
        body = self.cause.to_dict()
        body["step"] = self.step
        return body


# ============================================================================
# Input errors
# ============================================================================

class ParseError(ReliabilityError):
    error_code = "PARSE_ERROR"

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})", line=line, column=column)
        self.line = line
        self.column = column


class ConfigError(ReliabilityError):
    error_code = "CONFIG_ERROR"


class ReplayMismatch(ReliabilityError):
    """A replayed trace step produced a different term hash than recorded."""
    error_code = "REPLAY_MISMATCH"
