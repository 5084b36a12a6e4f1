"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit with 1,
I/O problems (plain ``OSError``) with 2 and numerical failures with 3.
"""


class ValidationError(ValueError):
    """Invalid argument, configuration or input geometry."""


class DomainError(ValidationError):
    """A value lies outside the domain an operation is defined on."""


class NumericalError(FloatingPointError):
    """A computation produced non-finite values.

    ``diagnostics`` carries whatever context the raiser had at hand
    (loss terms, step index, ...).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({detail})"
