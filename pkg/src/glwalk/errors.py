"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid measure or experiment configuration; ``key`` names the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class NumericalError(RuntimeError):
    """Hard numerical failure (non-finite state, degenerate measure)."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
