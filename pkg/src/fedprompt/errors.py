"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or infeasible setup."""


class DataError(ValueError):
    """Invalid or empty data where samples were required."""


class TrainingError(RuntimeError):
    """Local training failed; carries round/client context."""

    def __init__(self, message, round_index=None, client_id=None):
        if round_index is not None or client_id is not None:
            message = f"{message} (round={round_index}, client={client_id})"
        super().__init__(message)
        self.round_index = round_index
        self.client_id = client_id
