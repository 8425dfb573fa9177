class ValidationError(ValueError):
    """Invalid input data, parameters or configuration (CLI exit code 1)."""


class ConfigError(ValidationError):
    pass
