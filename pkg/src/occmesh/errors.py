class ConfigError(ValueError):
    """Invalid configuration or incompatible shapes between configured parts."""
