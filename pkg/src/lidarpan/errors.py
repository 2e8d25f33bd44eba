"""Exception hierarchy with machine-readable payloads.

Every error carries a ``details`` dict so the CLI can emit single-line
JSON diagnostics. ``ValidationError`` maps to exit code 1 (bad arguments,
shapes, configs), ``DataError`` to exit code 2 (bad or missing data).
"""


class LidarpanError(Exception):
    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def payload(self):
        return {"error": type(self).__name__, "message": self.message, **self.details}


class ValidationError(LidarpanError):
    """Caller supplied inconsistent arguments, shapes, or configuration."""


class ShapeError(ValidationError):
    """Tensor extents do not satisfy an operator's contract."""


class DataError(LidarpanError):
    """On-disk or in-memory data violates its declared format."""


class InfeasibleError(LidarpanError):
    """A constrained search has no feasible candidate."""
