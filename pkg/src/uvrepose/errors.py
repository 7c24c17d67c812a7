class UVReposeError(Exception):
    pass


class ConfigError(UVReposeError, ValueError):
    """Invalid configuration value or schema."""


class InputError(UVReposeError, ValueError):
    """Arguments with mismatched shapes, empty sets, or out-of-domain values."""


class ProjectionError(UVReposeError):
    def __init__(self, index, depth, near):
        self.index = index
        self.depth = depth
        super().__init__(
            f"vertex {index} at depth {depth:.6g} is at or behind the near plane ({near:g})"
        )


class NumericError(UVReposeError, ArithmeticError):
    """Non-finite values encountered during training or sampling."""
