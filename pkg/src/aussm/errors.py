"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates a documented shape/domain contract."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a place where only finite values are allowed."""
