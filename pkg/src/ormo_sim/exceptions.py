import json
from collections.abc import Mapping
from typing import Literal, TypeAlias, override

# ======================================================================================
#   Models
# ======================================================================================

# fmt: off
Layer: TypeAlias = Literal[ # Literals based from: "Where did it happen?"
    # Simulation layer
    "ENGINE",       # Event loop, schedulers, scripted replay
    "OPTIMIZER",    # Server update rules

    # Oracle layer
    "PROBLEM",      # Gradient oracles and datasets

    # Analysis layer
    "VERIFIER",     # Auxiliary sequences, identities, bounds

    # Outer layer
    "HARNESS",      # Configuration, experiments, reports, CLI
    "REGISTRY",     # Name lookup of optimizers and problems

    # Generic
    "UNKNOWN",
]
"""System layers for error categorization."""

Category: TypeAlias = Literal[ # Literals based from: "What type of problem?"
    # Input
    "INVALID",      # Value violates a constraint
    "MISSING",      # Required key, file or registration absent

    # Simulation
    "ORDERING",     # Event or gradient arrived out of the order it must respect
    "DEADLOCK",     # No worker is able to deliver
    "NUMERIC",      # Non-finite arithmetic

    # Analysis
    "MISMATCH",     # Two things that must agree do not

    # Runtime
    "USAGE",        # Improper method usage

    # Generic
    "UNEXPECTED",   # Unexpected errors
    "UNKNOWN",
]
"""Error categories for error classification."""

Severity: TypeAlias = Literal["WARNING", "ERROR", "CRITICAL"]
"""Error severity levels."""
# fmt: on


# ======================================================================================
#   Base
# ======================================================================================


class SimError(Exception):
    """
    Base of every simulator error.

    The code reads `LAYER::service::CATEGORY::SEVERITY`, with a trailing
    `::RECOVERABLE` when the caller can fix the input and retry.
    """

    default_layer: Layer = "UNKNOWN"
    default_service: str = "unknown"
    default_category: Category = "UNKNOWN"
    default_severity: Severity = "ERROR"
    recoverable: bool = False

    def __init__(
        self,
        message: str,
        /,
        cause: BaseException | None = None,
        *,
        context: Mapping[str, object] | None = None,
        service: str | None = None,
        layer: Layer | None = None,
        category: Category | None = None,
        severity: Severity | None = None,
        recoverable: bool | None = None,
    ) -> None:
        self.msg: str = message.strip()
        if recoverable is not None:
            self.recoverable = recoverable

        # Service names keep their case
        parts: tuple[str, ...] = (
            layer or self.default_layer,
            service.strip() if service else self.default_service,
            category or self.default_category,
            severity or self.default_severity,
        )
        self.code: str = "::".join(parts + (("RECOVERABLE",) if self.recoverable else ()))
        self.msg_code: str = f"{self.msg}\n>> {self.code}"

        self.__cause__ = cause
        self.context: dict[str, object] = dict(context or {})

        super().__init__(self.msg_code)

    @override
    def __str__(self) -> str:
        return self.msg_code

    @override
    def __repr__(self) -> str:
        return f"{self.msg_code}:\n{json.dumps(self.context, indent=2, default=str)}"


# ======================================================================================
#   Models
# ======================================================================================


class SimConfigError(SimError):
    default_layer: Layer = "HARNESS"
    default_category: Category = "INVALID"
    default_severity: Severity = "ERROR"
    recoverable: bool = True


class SimRegistryError(SimError):
    default_layer: Layer = "REGISTRY"
    default_category: Category = "MISSING"
    default_severity: Severity = "ERROR"
    recoverable: bool = False


class SimDeadlockError(SimError):
    default_layer: Layer = "ENGINE"
    default_category: Category = "DEADLOCK"
    default_severity: Severity = "CRITICAL"
    recoverable: bool = False


class SimScheduleError(SimError):
    default_layer: Layer = "ENGINE"
    default_category: Category = "INVALID"
    default_severity: Severity = "ERROR"
    recoverable: bool = False


class SimOrderingError(SimError):
    default_layer: Layer = "OPTIMIZER"
    default_category: Category = "ORDERING"
    default_severity: Severity = "CRITICAL"
    recoverable: bool = False


class SimNumericError(SimError):
    default_layer: Layer = "OPTIMIZER"
    default_category: Category = "NUMERIC"
    default_severity: Severity = "ERROR"
    recoverable: bool = False


class SimSampleError(SimError):
    default_layer: Layer = "PROBLEM"
    default_category: Category = "INVALID"
    default_severity: Severity = "ERROR"
    recoverable: bool = False


class SimRuntimeError(SimError):
    default_layer: Layer = "ENGINE"
    default_category: Category = "UNEXPECTED"
    default_severity: Severity = "ERROR"
    recoverable: bool = False


class SimVerificationError(SimError):
    default_layer: Layer = "VERIFIER"
    default_category: Category = "MISMATCH"
    default_severity: Severity = "ERROR"
    recoverable: bool = False


class SimIncomparableRunsError(SimError):
    default_layer: Layer = "HARNESS"
    default_category: Category = "MISMATCH"
    default_severity: Severity = "ERROR"
    recoverable: bool = False


class SimRunPathError(SimError):
    default_layer: Layer = "HARNESS"
    default_category: Category = "MISSING"
    default_severity: Severity = "ERROR"
    recoverable: bool = False
