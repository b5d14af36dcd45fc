class ConfigError(ValueError):
    """Invalid configuration or model/data mismatch (CLI exit code 2)."""


class NumericalAbort(RuntimeError):
    """A computation produced non-finite values (CLI exit code 3).

    ``payload`` carries whatever partial result is worth keeping, e.g. the
    last finite iterate of a fit.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload
