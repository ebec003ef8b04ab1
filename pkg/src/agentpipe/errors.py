"""Error types shared across the engine.

Every error carries a stable machine-readable ``code`` so pipelines can
branch on it (the catch scope binds ``error.code``) and the CLI can emit
it in JSON payloads.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base error: a short stable code plus a human message."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class IRParseError(EngineError):
    """Raised when JSON text cannot be decoded into a pipeline."""

    def __init__(self, message: str, code: str = "PARSE_ERROR"):
        super().__init__(code, message)


class PipelineRuntimeError(EngineError):
    """A step failed during execution; carries the step path from the root."""

    def __init__(self, code: str, message: str, step_path: list[int] | None = None):
        super().__init__(code, message)
        self.step_path = list(step_path) if step_path else []

    def with_path(self, step_path: list[int]) -> "PipelineRuntimeError":
        if not self.step_path:
            self.step_path = list(step_path)
        return self


class TransientError(PipelineRuntimeError):
    """Retryable failure (transport faults, explicitly transient functions)."""

    def __init__(self, message: str, code: str = "TRANSIENT", step_path: list[int] | None = None):
        super().__init__(code, message, step_path)


class BudgetExhaustedError(PipelineRuntimeError):
    """Step budget exceeded. Not catchable by tryCatchFinally."""

    def __init__(self, message: str, step_path: list[int] | None = None):
        super().__init__("BUDGET_EXHAUSTED", message, step_path)
