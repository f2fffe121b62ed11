class ValidationError(ValueError):
    """Malformed input: scenario files, configs, argument contracts."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or violated a stability audit."""
