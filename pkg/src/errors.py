class ConfigError(ValueError):
    """Invalid configuration or command-line usage (CLI exit code 2)."""


class DivergenceError(RuntimeError):
    """A network output or training loss stopped being finite."""
