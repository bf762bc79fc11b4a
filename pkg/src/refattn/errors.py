"""Exception hierarchy.

Every error carries a stable machine-readable ``code`` and maps onto one of the
CLI exit classes: usage (2), data (3), numeric (4).
"""


class RefAttnError(Exception):
    code = "E_INTERNAL"
    exit_status = 1

    def __init__(self, message: str, code: str | None = None, **details):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.details = details

    def line(self) -> str:
        """Single-line, grep-friendly rendering used by the CLI."""
        parts = [f"error={self.code}"]
        parts += [f"{k}={v}" for k, v in sorted(self.details.items())]
        parts.append(f"msg={str(self).replace(chr(10), ' ')!r}")
        return " ".join(parts)


class UsageError(RefAttnError, ValueError):
    code = "E_USAGE"
    exit_status = 2


class DataError(RefAttnError):
    code = "E_DATA"
    exit_status = 3


class NumericError(RefAttnError, ArithmeticError):
    code = "E_NONFINITE"
    exit_status = 4


class DegenerateRowError(NumericError):
    code = "E_DEGENERATE_ROW"


class DegenerateMaskError(DataError):
    code = "E_DEGENERATE_MASK"


class GenerationError(DataError):
    """Dataset synthesis failed (e.g. shapes cannot be packed)."""

    code = "E_PACKING"


class TrainingError(NumericError):
    code = "E_DIVERGED"


class PipelineError(NumericError):
    code = "E_NONFINITE_LATENT"
